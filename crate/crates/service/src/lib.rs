//! HTTP facade over checkpoints, the shape pool, histogram presets and
//! implant previews. Handlers only read; training happens offline.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use lesionsyn::dataset::{read_dataset, read_lesion_samples, SampleRecord};
use lesionsyn::export::{decode_png, encode_lsf, encode_png};
use lesionsyn::implant::{place_lesion, ImplantSpec};
use lesionsyn::synthesis::{make_preset, CheckpointInfo, CheckpointStore, HistogramPreset, Synthesizer};
use lesionsyn::{compute_histogram, histogram_l1, DensityHistogram, Error, Grid, Mask, HIST_BINS};

/// Header carrying the L1 distance between the requested histogram and
/// the one recomputed from the synthesized patch.
pub const ROUNDTRIP_HEADER: &str = "x-histogram-roundtrip-l1";
pub const LSF_MEDIA_TYPE: &str = "application/x-lsf";
/// Accepted deviation of a histogram's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct ServiceConfig {
    pub checkpoints: PathBuf,
    /// Lesion-sample directory whose masks form the shape pool.
    pub shapes: Option<PathBuf>,
    /// Dataset of healthy slices for implant previews.
    pub slices: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct Failure {
    status: StatusCode,
    body: ApiError,
}

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ApiError { code: code.into(), message: message.into() } }
    }

    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NotFound(_) => Self::not_found("not_found", e.to_string()),
            Error::Placement { .. } | Error::Transform(_) => Self::new(StatusCode::CONFLICT, "placement_infeasible", e.to_string()),
            Error::InvalidArgument(_) | Error::EmptyMask => Self::bad_request("invalid_argument", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, Failure>;

/// Histogram in transit: 100 non-negative bins summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiHistogram {
    pub bins: Vec<f64>,
}

impl ApiHistogram {
    /// Checks the wire invariants and renormalizes within tolerance.
    pub fn validate(&self) -> Result<DensityHistogram, ApiError> {
        let fail = |code: &str, message: String| Err(ApiError { code: code.into(), message });
        if self.bins.len() != HIST_BINS {
            return fail("bad_histogram_length", format!("expected {HIST_BINS} bins, got {}", self.bins.len()));
        }
        if let Some(i) = self.bins.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return fail("negative_histogram_bin", format!("bin {i} is negative or not finite"));
        }
        let sum: f64 = self.bins.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return fail("bad_histogram_sum", format!("bins sum to {sum}, expected 1 within {SUM_TOLERANCE}"));
        }
        DensityHistogram::from_weights(&self.bins).map_err(|e| ApiError { code: "bad_histogram_sum".into(), message: e.to_string() })
    }
}

fn histogram_of(h: &ApiHistogram) -> ApiResult<DensityHistogram> {
    h.validate().map_err(|body| Failure { status: StatusCode::BAD_REQUEST, body })
}

struct CachedSynth {
    modified: Option<SystemTime>,
    synth: Arc<Synthesizer>,
}

pub struct AppState {
    store: CheckpointStore,
    shapes: Vec<(String, Mask)>,
    slices: Vec<(String, SampleRecord)>,
    cache: Mutex<HashMap<String, CachedSynth>>,
}

impl AppState {
    /// Loads the shape pool and slice pool; checkpoints load lazily.
    pub fn load(config: &ServiceConfig) -> lesionsyn::Result<Self> {
        let shapes = match &config.shapes {
            Some(dir) => read_lesion_samples(dir)?.into_iter().map(|s| (s.id, s.sample.mask)).collect(),
            None => Vec::new(),
        };
        let slices = match &config.slices {
            Some(dir) => read_dataset(dir)?.into_iter().enumerate().map(|(i, r)| (format!("sample_{i:05}"), r)).collect(),
            None => Vec::new(),
        };
        Ok(Self { store: CheckpointStore::new(&config.checkpoints), shapes, slices, cache: Mutex::new(HashMap::new()) })
    }

    /// The current snapshot of a checkpoint; reloaded when its manifest
    /// changes on disk, swapped in whole.
    fn synthesizer(&self, id: &str) -> ApiResult<Arc<Synthesizer>> {
        let dir = self
            .store
            .path_of(id)
            .map_err(|_| Failure::not_found("unknown_checkpoint", format!("no checkpoint {id:?}")))?;
        let modified = std::fs::metadata(dir.join("manifest")).and_then(|m| m.modified()).ok();
        if let Some(hit) = self.cache.lock().expect("cache lock").get(id) {
            if hit.modified == modified {
                return Ok(hit.synth.clone());
            }
        }
        let synth = Arc::new(Synthesizer::load(&dir)?);
        self.cache.lock().expect("cache lock").insert(id.to_string(), CachedSynth { modified, synth: synth.clone() });
        Ok(synth)
    }

    fn shape(&self, id: &str) -> ApiResult<&Mask> {
        self.shapes
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, m)| m)
            .ok_or_else(|| Failure::not_found("unknown_mask", format!("no mask {id:?}")))
    }

    fn slice(&self, id: &str) -> ApiResult<&SampleRecord> {
        self.slices
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, r)| r)
            .ok_or_else(|| Failure::not_found("unknown_slice", format!("no slice {id:?}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/checkpoints", get(checkpoints))
        .route("/masks", get(masks))
        .route("/masks/{id}/thumbnail", get(mask_thumbnail))
        .route("/slices", get(slices))
        .route("/presets", post(preset))
        .route("/synthesize", post(synthesize))
        .route("/implant/preview", post(implant_preview))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, config: &ServiceConfig) -> std::io::Result<()> {
    let state = AppState::load(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn checkpoints(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<CheckpointInfo>>> {
    let store = state.store.clone();
    let list = tokio::task::spawn_blocking(move || store.list())
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(list))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub pixels: usize,
    pub thumbnail: String,
}

async fn masks(State(state): State<Arc<AppState>>) -> Json<Vec<MaskEntry>> {
    Json(
        state
            .shapes
            .iter()
            .map(|(id, m)| MaskEntry {
                id: id.clone(),
                rows: m.rows(),
                cols: m.cols(),
                pixels: m.count(),
                thumbnail: format!("/masks/{id}/thumbnail"),
            })
            .collect(),
    )
}

fn mask_grid(mask: &Mask) -> Grid {
    Grid::new(mask.rows(), mask.cols(), mask.to_f32()).expect("mask shape")
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn mask_thumbnail(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let mask = state.shape(&id)?;
    Ok(png_response(encode_png(&mask_grid(mask))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub liver_pixels: usize,
}

async fn slices(State(state): State<Arc<AppState>>) -> Json<Vec<SliceEntry>> {
    Json(
        state
            .slices
            .iter()
            .map(|(id, r)| SliceEntry {
                id: id.clone(),
                rows: r.slice.pixels.rows(),
                cols: r.slice.pixels.cols(),
                liver_pixels: r.liver.count(),
            })
            .collect(),
    )
}

async fn preset(Json(preset): Json<HistogramPreset>) -> ApiResult<Json<ApiHistogram>> {
    let h = make_preset(&preset).map_err(|e| Failure::bad_request("bad_preset", e.to_string()))?;
    Ok(Json(ApiHistogram { bins: h.bins().to_vec() }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeRequest {
    pub checkpoint_id: String,
    #[serde(default)]
    pub mask_id: Option<String>,
    /// Base64 PNG; pixels above mid-grey are foreground.
    #[serde(default)]
    pub mask_png: Option<String>,
    pub histogram: ApiHistogram,
}

fn request_mask(state: &AppState, mask_id: &Option<String>, mask_png: &Option<String>) -> ApiResult<Mask> {
    match (mask_id, mask_png) {
        (Some(id), None) => Ok(state.shape(id)?.clone()),
        (None, Some(b64)) => {
            let bytes = BASE64.decode(b64).map_err(|e| Failure::bad_request("bad_mask", format!("mask is not base64: {e}")))?;
            let (rows, cols, pixels) = decode_png(&bytes).map_err(|e| Failure::bad_request("bad_mask", e.to_string()))?;
            Ok(Mask::from_fn(rows, cols, |r, c| pixels[r * cols + c] >= 128))
        }
        _ => Err(Failure::bad_request("bad_mask", "give exactly one of mask_id and mask_png")),
    }
}

fn check_patch(synth: &Synthesizer, mask: &Mask) -> ApiResult<()> {
    let p = synth.patch_size();
    if mask.shape() != (p, p) {
        return Err(Failure::bad_request("bad_mask", format!("mask is {:?}, checkpoint expects {p}x{p}", mask.shape())));
    }
    if mask.is_empty() {
        return Err(Failure::bad_request("bad_mask", "mask is empty"));
    }
    Ok(())
}

fn wants_lsf(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim().starts_with(LSF_MEDIA_TYPE)))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn synthesize(State(state): State<Arc<AppState>>, headers: HeaderMap, Json(req): Json<SynthesizeRequest>) -> ApiResult<Response> {
    let histogram = histogram_of(&req.histogram)?;
    let mask = request_mask(&state, &req.mask_id, &req.mask_png)?;
    let synth = state.synthesizer(&req.checkpoint_id)?;
    check_patch(&synth, &mask)?;
    let lsf = wants_lsf(&headers);
    blocking(move || {
        let patch = synth.synthesize_normalized(&mask, &histogram)?;
        let achieved = compute_histogram(&patch, &mask, HIST_BINS)?;
        let l1 = histogram_l1(&histogram, &achieved)?;
        let (content_type, body) = if lsf { (LSF_MEDIA_TYPE, encode_lsf(&patch)) } else { ("image/png", encode_png(&patch)?) };
        let mut response = ([(header::CONTENT_TYPE, content_type)], body).into_response();
        response
            .headers_mut()
            .insert(ROUNDTRIP_HEADER, HeaderValue::from_str(&format!("{l1:.6}")).expect("ascii"));
        Ok(response)
    })
    .await
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApiImplantSpec {
    #[serde(default)]
    pub rotation_deg: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub feather_sigma: Option<f64>,
    #[serde(default)]
    pub max_retries: Option<u32>,
}

impl ApiImplantSpec {
    fn to_spec(&self) -> ImplantSpec {
        let d = ImplantSpec::default();
        ImplantSpec {
            rotation_deg: self.rotation_deg,
            scale: self.scale,
            seed: self.seed,
            feather_sigma: self.feather_sigma.unwrap_or(d.feather_sigma),
            max_retries: self.max_retries.unwrap_or(d.max_retries),
            ..d
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplantPreviewRequest {
    pub slice_id: String,
    pub checkpoint_id: String,
    #[serde(default)]
    pub mask_id: Option<String>,
    #[serde(default)]
    pub mask_png: Option<String>,
    pub histogram: ApiHistogram,
    #[serde(default)]
    pub spec: ApiImplantSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplantPreview {
    /// Base64 PNG of the augmented slice in its [0, 1] window.
    pub slice_png: String,
    /// Base64 PNG of the ground-truth lesion mask.
    pub mask_png: String,
    pub rotation_deg: f64,
    pub scale: f64,
    pub centre: (usize, usize),
    pub attempts: u32,
}

async fn implant_preview(State(state): State<Arc<AppState>>, Json(req): Json<ImplantPreviewRequest>) -> ApiResult<Json<ImplantPreview>> {
    let histogram = histogram_of(&req.histogram)?;
    let mask = request_mask(&state, &req.mask_id, &req.mask_png)?;
    let record = state.slice(&req.slice_id)?.clone();
    let synth = state.synthesizer(&req.checkpoint_id)?;
    check_patch(&synth, &mask)?;
    let spec = req.spec.to_spec();
    spec.validate().map_err(|e| Failure::bad_request("bad_spec", e.to_string()))?;
    blocking(move || {
        let window = record.window;
        let patch = synth.synthesize_normalized(&mask, &histogram)?.map(|v| window.denormalize(v as f64) as f32);
        let result = place_lesion(&record.slice, &record.liver, &patch, &mask, &spec)?;
        let shown = result.slice.pixels.map(|v| window.normalize(v as f64) as f32);
        Ok(Json(ImplantPreview {
            slice_png: BASE64.encode(encode_png(&shown)?),
            mask_png: BASE64.encode(encode_png(&mask_grid(&result.lesion_mask))?),
            rotation_deg: result.applied.rotation_deg,
            scale: result.applied.scale,
            centre: result.applied.centre,
            attempts: result.applied.attempts,
        }))
    })
    .await
}
