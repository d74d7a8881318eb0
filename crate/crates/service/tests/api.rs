use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use lesionsyn::dataset::{directory_digest, write_dataset, write_lesion_samples, SampleRecord};
use lesionsyn::export::{decode_png, encode_png};
use lesionsyn::lsf;
use lesionsyn::nn::{DiscriminatorConfig, GeneratorConfig};
use lesionsyn::phantom::{generate_healthy, PhantomConfig};
use lesionsyn::train::{save_checkpoint, TrainState};
use lesionsyn::{Grid, LesionSample, Mask, HIST_BINS};
use lesionsyn_service::{router, AppState, ApiHistogram, ServiceConfig, LSF_MEDIA_TYPE, ROUNDTRIP_HEADER};

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServiceConfig,
}

fn disk(p: usize, r: f64) -> Mask {
    let c = (p as f64 - 1.0) / 2.0;
    Mask::from_fn(p, p, |y, x| (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= r * r)
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = GeneratorConfig { hist_bins: HIST_BINS, ..GeneratorConfig::tiny() };
    let state = TrainState::new(gen, DiscriminatorConfig::tiny(), 3).unwrap();
    save_checkpoint(&root.join("checkpoints/tiny"), &state, None).unwrap();

    let samples: Vec<LesionSample> = [1.5, 2.5, 3.5]
        .iter()
        .map(|&r| LesionSample::new(Grid::filled(8, 8, 0.3), disk(8, r), false).unwrap())
        .collect();
    write_lesion_samples(&root.join("shapes"), &samples).unwrap();

    let cfg = PhantomConfig { rows: 48, cols: 48, liver_semi_axis: (16.0, 19.0), ..PhantomConfig::default() };
    let healthy: Vec<SampleRecord> = (0..2).map(|s| SampleRecord::from_phantom(&generate_healthy(s, &cfg).unwrap())).collect();
    write_dataset(&root.join("slices"), &healthy).unwrap();

    let config = ServiceConfig {
        checkpoints: root.join("checkpoints"),
        shapes: Some(root.join("shapes")),
        slices: Some(root.join("slices")),
    };
    Fixture { _dir: dir, config }
}

fn app(config: &ServiceConfig) -> axum::Router {
    router(Arc::new(AppState::load(config).unwrap()))
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: &Value) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

fn delta(bin: usize) -> Vec<f64> {
    let mut b = vec![0.0; HIST_BINS];
    b[bin] = 1.0;
    b
}

fn json_of(body: &[u8]) -> Value {
    serde_json::from_slice(body).unwrap()
}

#[tokio::test]
async fn health_and_listings() {
    let f = fixture();
    let app = app(&f.config);
    let (s, _, body) = call(&app, get("/health")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json_of(&body)["status"], "ok");

    let (_, _, body) = call(&app, get("/checkpoints")).await;
    let list = json_of(&body);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["id"], "tiny");
    let digest = directory_digest_of_checkpoint(&f.config.checkpoints.join("tiny"));
    assert_eq!(list[0]["digest"], digest);
    // Stable across a restart.
    let (_, _, again) = call(&self::app(&f.config), get("/checkpoints")).await;
    assert_eq!(body, again);

    let (_, _, body) = call(&app, get("/masks")).await;
    let masks = json_of(&body);
    assert_eq!(masks.as_array().unwrap().len(), 3);
    assert_eq!(masks[0]["id"], "lesion_00000");
    let (s, headers, png) = call(&app, get(masks[2]["thumbnail"].as_str().unwrap())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    let (rows, cols, _) = decode_png(&png).unwrap();
    assert_eq!((rows, cols), (8, 8));
    let (s, _, body) = call(&app, get("/masks/nope/thumbnail")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["code"], "unknown_mask");

    let (_, _, body) = call(&app, get("/slices")).await;
    assert_eq!(json_of(&body).as_array().unwrap().len(), 2);
}

fn directory_digest_of_checkpoint(dir: &Path) -> String {
    lesionsyn::train::checkpoint_digest(dir).unwrap()
}

#[tokio::test]
async fn empty_store_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&ServiceConfig { checkpoints: dir.path().join("none"), ..ServiceConfig::default() });
    let (s, _, body) = call(&app, get("/checkpoints")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json_of(&body), json!([]));
}

#[tokio::test]
async fn synthesize_is_deterministic_and_reports_roundtrip() {
    let f = fixture();
    let app = app(&f.config);
    let req = json!({ "checkpoint_id": "tiny", "mask_id": "lesion_00002", "histogram": { "bins": delta(40) } });
    let (s, headers, a) = call(&app, post("/synthesize", &req)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    assert_eq!(headers["content-type"], "image/png");
    let l1: f64 = headers[ROUNDTRIP_HEADER].to_str().unwrap().parse().unwrap();
    assert!((0.0..=2.0).contains(&l1));
    let (_, _, b) = call(&app, post("/synthesize", &req)).await;
    assert_eq!(a, b);
    assert_eq!(decode_png(&a).unwrap().0, 8);

    // Lossless variant.
    let lsf_req = Request::post("/synthesize")
        .header("content-type", "application/json")
        .header("accept", LSF_MEDIA_TYPE)
        .body(Body::from(req.to_string()))
        .unwrap();
    let (s, headers, bytes) = call(&app, lsf_req).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers["content-type"], LSF_MEDIA_TYPE);
    let (shape, values) = lsf::decode(&bytes, Path::new("response")).unwrap();
    assert_eq!(shape, [8, 8]);
    let png_pixels = decode_png(&a).unwrap().2;
    for (v, p) in values.iter().zip(png_pixels) {
        assert_eq!(lesionsyn::export::to_u8(*v), p);
    }

    // Inline mask equal to a pool mask gives the same bytes.
    let inline = BASE64.encode(encode_png(&Grid::new(8, 8, lesionsyn::Mask::to_f32(&disk(8, 3.5))).unwrap()).unwrap());
    let req = json!({ "checkpoint_id": "tiny", "mask_png": inline, "histogram": { "bins": delta(40) } });
    let (s, _, c) = call(&app, post("/synthesize", &req)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a, c);
}

#[tokio::test]
async fn synthesize_errors() {
    let f = fixture();
    let app = app(&f.config);
    let negative = [vec![-0.01, 0.02], vec![0.01; 98]].concat();
    let cases = [
        (json!({ "checkpoint_id": "tiny", "mask_id": "lesion_00000", "histogram": { "bins": vec![0.01; 99] } }), StatusCode::BAD_REQUEST, "bad_histogram_length"),
        (json!({ "checkpoint_id": "tiny", "mask_id": "lesion_00000", "histogram": { "bins": negative } }), StatusCode::BAD_REQUEST, "negative_histogram_bin"),
        (json!({ "checkpoint_id": "tiny", "mask_id": "lesion_00000", "histogram": { "bins": vec![0.02; 100] } }), StatusCode::BAD_REQUEST, "bad_histogram_sum"),
        (json!({ "checkpoint_id": "ghost", "mask_id": "lesion_00000", "histogram": { "bins": delta(3) } }), StatusCode::NOT_FOUND, "unknown_checkpoint"),
        (json!({ "checkpoint_id": "../checkpoints", "mask_id": "lesion_00000", "histogram": { "bins": delta(3) } }), StatusCode::NOT_FOUND, "unknown_checkpoint"),
        (json!({ "checkpoint_id": "tiny", "mask_id": "ghost", "histogram": { "bins": delta(3) } }), StatusCode::NOT_FOUND, "unknown_mask"),
        (json!({ "checkpoint_id": "tiny", "histogram": { "bins": delta(3) } }), StatusCode::BAD_REQUEST, "bad_mask"),
    ];
    for (req, status, code) in cases {
        let (s, _, body) = call(&app, post("/synthesize", &req)).await;
        assert_eq!(s, status, "{code}");
        let err = json_of(&body);
        assert_eq!(err["code"], code);
        assert!(!err["message"].as_str().unwrap().is_empty());
    }
    // A 16x16 inline mask does not fit an 8x8 checkpoint.
    let inline = BASE64.encode(encode_png(&Grid::filled(16, 16, 1.0)).unwrap());
    let req = json!({ "checkpoint_id": "tiny", "mask_png": inline, "histogram": { "bins": delta(3) } });
    let (s, _, body) = call(&app, post("/synthesize", &req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["code"], "bad_mask");
}

#[test]
fn histogram_sum_tolerance_boundary() {
    let scaled = |k: f64| ApiHistogram { bins: vec![k / 100.0; 100] };
    for ok in [1.0, 1.0 + 0.9e-4, 1.0 - 0.9e-4] {
        let h = scaled(ok).validate().unwrap();
        assert!((h.bins().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for bad in [1.0 + 1.1e-4, 1.0 - 1.1e-4, 0.0] {
        assert_eq!(scaled(bad).validate().unwrap_err().code, "bad_histogram_sum");
    }
    assert_eq!(ApiHistogram { bins: vec![0.01; 101] }.validate().unwrap_err().code, "bad_histogram_length");
    let mut nan = vec![0.01; 100];
    nan[7] = f64::NAN;
    assert_eq!(ApiHistogram { bins: nan }.validate().unwrap_err().code, "negative_histogram_bin");
}

#[tokio::test]
async fn presets_match_core() {
    let f = fixture();
    let app = app(&f.config);
    let (s, _, body) = call(&app, post("/presets", &json!({ "kind": "delta", "bin": 50 }))).await;
    assert_eq!(s, StatusCode::OK);
    let h: ApiHistogram = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.bins, delta(50));
    let preset = json!({ "kind": "bimodal", "mean_bins": [20.0, 80.0], "width_bins": 4.0, "weights": [1.0, 1.0] });
    let (_, _, body) = call(&app, post("/presets", &preset)).await;
    let h: ApiHistogram = serde_json::from_slice(&body).unwrap();
    let core = lesionsyn::synthesis::make_preset(&serde_json::from_value(preset).unwrap()).unwrap();
    for (a, b) in h.bins.iter().zip(core.bins()) {
        assert!((a - b).abs() < 1e-15);
    }
    let (s, _, body) = call(&app, post("/presets", &json!({ "kind": "delta", "bin": 100 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["code"], "bad_preset");
}

#[tokio::test]
async fn implant_preview_contract() {
    let f = fixture();
    let app = app(&f.config);
    let req = json!({
        "slice_id": "sample_00001",
        "checkpoint_id": "tiny",
        "mask_id": "lesion_00001",
        "histogram": { "bins": delta(85) },
        "spec": { "seed": 11 }
    });
    let (s, _, a) = call(&app, post("/implant/preview", &req)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    let (_, _, b) = call(&app, post("/implant/preview", &req)).await;
    assert_eq!(a, b);
    let preview = json_of(&a);
    let mask_png = BASE64.decode(preview["mask_png"].as_str().unwrap()).unwrap();
    let (rows, cols, mask_px) = decode_png(&mask_png).unwrap();
    assert_eq!((rows, cols), (48, 48));
    let records = lesionsyn::dataset::read_dataset(f.config.slices.as_ref().unwrap()).unwrap();
    let liver = &records[1].liver;
    assert!(mask_px.contains(&255));
    for (k, &p) in mask_px.iter().enumerate() {
        if p == 255 {
            assert!(liver.get(k / cols, k % cols), "lesion pixel outside liver");
        }
    }
    assert!(preview["attempts"].as_u64().unwrap() >= 1);

    let mut huge = req.clone();
    huge["spec"] = json!({ "seed": 11, "scale": 6.0 });
    huge["mask_id"] = json!("lesion_00000");
    let (s, _, body) = call(&app, post("/implant/preview", &huge)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(json_of(&body)["code"], "placement_infeasible");

    let mut missing = req.clone();
    missing["slice_id"] = json!("sample_00009");
    let (s, _, body) = call(&app, post("/implant/preview", &missing)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["code"], "unknown_slice");
}

#[tokio::test]
async fn requests_do_not_mutate_the_store() {
    let f = fixture();
    let before = directory_digest(&f.config.checkpoints).unwrap();
    let app = app(&f.config);
    let req = json!({ "checkpoint_id": "tiny", "mask_id": "lesion_00000", "histogram": { "bins": delta(10) } });
    call(&app, post("/synthesize", &req)).await;
    call(&app, get("/checkpoints")).await;
    assert_eq!(before, directory_digest(&f.config.checkpoints).unwrap());
}
