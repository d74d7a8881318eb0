use super::*;
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::train::gradcheck::{randomize, FD_STEP};
use proptest::prelude::*;

fn small_phantoms(seeds: std::ops::Range<u64>) -> Vec<SampleRecord> {
    let cfg = PhantomConfig {
        rows: 32,
        cols: 32,
        liver_semi_axis: (11.0, 13.0),
        lesion_count: (1, 1),
        lesion_radius: (2.5, 4.0),
        lesion_margin: 1.0,
        ..PhantomConfig::default()
    };
    seeds.map(|s| SampleRecord::from_phantom(&generate_phantom(s, &cfg).unwrap())).collect()
}

#[test]
fn f1_examples() {
    let truth = Mask::from_fn(8, 8, |r, _| r < 4);
    assert_eq!(f1_score(&truth, &truth).unwrap(), 1.0);
    assert_eq!(f1_score(&Mask::from_fn(8, 8, |r, _| r >= 4), &truth).unwrap(), 0.0);
    let half = Mask::from_fn(8, 8, |r, _| r < 2);
    assert!((f1_score(&half, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(f1_score(&Mask::empty(8, 8), &Mask::empty(8, 8)).unwrap(), 1.0);
    assert_eq!(f1_score(&truth, &Mask::empty(8, 8)).unwrap(), 0.0);
    assert!(matches!(f1_score(&truth, &Mask::empty(8, 9)), Err(Error::InvalidArgument(_))));
}

fn mask_strategy() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..2, 36), prop::collection::vec(0u8..2, 36))
}

proptest! {
    #[test]
    fn f1_matches_independent_count((p, t) in mask_strategy()) {
        let pred = Mask::new(6, 6, p.clone()).unwrap();
        let truth = Mask::new(6, 6, t.clone()).unwrap();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..36 {
            if p[i] == 1 && t[i] == 1 { tp += 1.0 }
            if p[i] == 1 && t[i] == 0 { fp += 1.0 }
            if p[i] == 0 && t[i] == 1 { fn_ += 1.0 }
        }
        let expected = if tp + fp + fn_ == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        prop_assert_eq!(f1_score(&pred, &truth).unwrap(), expected);
        prop_assert!((0.0..=1.0).contains(&expected));
        if t.contains(&1) {
            prop_assert_eq!(f1_score(&truth, &truth).unwrap(), 1.0);
        }
    }
}

#[test]
fn config_validation() {
    assert!(SegConfig::default().validate().is_ok());
    assert_eq!(SegConfig::default().threshold, 0.5);
    for bad in [
        SegConfig { threshold: 1.0, ..SegConfig::default() },
        SegConfig { threshold: 0.0, ..SegConfig::default() },
        SegConfig { batch_size: 0, ..SegConfig::default() },
        SegConfig { base_channels: 0, ..SegConfig::default() },
        SegConfig { learning_rate: -1.0, ..SegConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn output_shape_and_input_checks() {
    let seg = Segmenter::<f32>::init(SegConfig { base_channels: 2, ..SegConfig::default() }).unwrap();
    let x = Tensor::full(&[3, 2, 16, 12], 0.3);
    assert_eq!(seg.forward(&x, Mode::Eval).unwrap().shape(), &[3, 1, 16, 12]);
    assert!(seg.forward(&Tensor::full(&[1, 2, 10, 12], 0.3), Mode::Eval).is_err());
    assert!(seg.forward(&Tensor::full(&[1, 1, 16, 16], 0.3), Mode::Eval).is_err());
}

#[test]
fn backward_matches_finite_differences() {
    let cfg = SegConfig { base_channels: 2, ..SegConfig::default() };
    let mut seg = Segmenter::<f64>::init(cfg).unwrap();
    let mut rng = stream(7, "seg_audit", 0);
    randomize(&mut seg.params, &mut rng);
    let n = 2 * 2 * 8 * 8;
    let x = Tensor::from_vec(&[2, 2, 8, 8], (0..n).map(|i| ((i * 37 % 11) as f64 / 11.0) - 0.3).collect()).unwrap();
    let y = Tensor::from_vec(&[2, 1, 8, 8], (0..n / 2).map(|i| ((i / 5) % 2) as f64).collect()).unwrap();
    let (_, grads, _) = seg.loss_and_grads(&x, &y).unwrap();
    let mut worst = 0.0f64;
    for idx in 0..seg.params.len() {
        let param = seg.params.iter().nth(idx).unwrap();
        if !param.kind.trainable() {
            continue;
        }
        let name = param.name.clone();
        let len = param.value.len();
        let analytic = grads.tensors()[idx].clone();
        let mut numeric = vec![0.0; len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut probe = seg.clone();
                probe.params.iter_mut().nth(idx).unwrap().value.data_mut()[k] += delta;
                probe.loss_and_grads(&x, &y).unwrap().0
            };
            *slot = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        let scale = numeric.iter().chain(analytic.data()).fold(1e-6f64, |m, v| m.max(v.abs()));
        let err = numeric.iter().zip(analytic.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        assert!(err < 1e-4, "{name}: relative error {err}");
        worst = worst.max(err);
    }
    assert!(worst < 1e-4);
}

#[test]
fn zero_learning_rate_keeps_trainable_params() {
    let data = small_phantoms(0..3);
    let cfg = SegConfig { base_channels: 4, epochs: 2, learning_rate: 0.0, batch_size: 2, ..SegConfig::default() };
    let init = Segmenter::<f32>::init(cfg.clone()).unwrap();
    let (trained, history) = train_segmenter(&data, &cfg, None).unwrap();
    assert_eq!(history.len(), 2);
    for (a, b) in init.params.iter().zip(trained.params.iter()) {
        if a.kind.trainable() {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn overfits_four_phantoms() {
    let data = small_phantoms(0..4);
    let cfg = SegConfig { base_channels: 8, epochs: 150, learning_rate: 3e-3, batch_size: 4, ..SegConfig::default() };
    let mut log = Vec::new();
    let (seg, history) = train_segmenter(&data, &cfg, Some(&mut log)).unwrap();
    assert!(history.last().unwrap().loss < history[0].loss);
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 150);
    let f1 = evaluate(&seg, &data).unwrap().f1();
    assert!(f1 >= 0.9, "training F1 {f1}");
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = small_phantoms(0..3);
    let cfg = SegConfig { base_channels: 4, epochs: 3, batch_size: 2, seed: 5, ..SegConfig::default() };
    let (a, ha) = train_segmenter(&data, &cfg, None).unwrap();
    let (b, hb) = train_segmenter(&data, &cfg, None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ha, hb);
    let (c, _) = train_segmenter(&data, &SegConfig { seed: 6, ..cfg.clone() }, None).unwrap();
    assert_ne!(a.params, c.params);

    let dir = tempfile::tempdir().unwrap();
    save_segmenter(dir.path(), &a).unwrap();
    let back = load_segmenter(dir.path()).unwrap();
    assert_eq!(back.params, a.params);
    assert_eq!(back.config(), a.config());
    assert!(matches!(load_segmenter(&dir.path().join("missing")), Err(Error::NotFound(_))));
}

#[test]
fn predictions_stay_inside_the_liver() {
    let data = small_phantoms(0..2);
    let cfg = SegConfig { base_channels: 2, threshold: 0.01, ..SegConfig::default() };
    let seg = Segmenter::<f32>::init(cfg).unwrap();
    for r in &data {
        assert!(predict(&seg, r).unwrap().is_subset_of(&r.liver));
    }
}

#[test]
fn experiment_report_layout_and_determinism() {
    let real = small_phantoms(0..3);
    let test = small_phantoms(10..12);
    let cfg = SegConfig { base_channels: 2, epochs: 1, batch_size: 2, ..SegConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&real, &real, &real, &test, &cfg, &[1, 2], Some(dir.path())).unwrap();
    let b = run_experiment(&real, &real, &real, &test, &cfg, &[1, 2], None).unwrap();
    assert_eq!(a, b);
    let labels: Vec<&str> = a.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["original", "mask_synthesis", "mask_density_synthesis"]);
    let refs: Vec<f64> = a.rows.iter().map(|r| r.reference_f1).collect();
    assert_eq!(refs, [0.5996, 0.3409, 0.4013]);
    for row in &a.rows {
        assert_eq!(row.per_seed.len(), 2);
        assert!((0.0..=1.0).contains(&row.f1));
        assert!((row.f1 - (row.per_seed[0] + row.per_seed[1]) / 2.0).abs() < 1e-12);
    }
    // Identical training sets and seeds give identical rows.
    assert_eq!(a.rows[0].per_seed, a.rows[2].per_seed);
    assert!(dir.path().join("original_seed1.log").exists());
    let table = a.to_table();
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("0.4013"));
    let json = a.to_json();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    let f1 = json["rows"][1]["f1"].as_f64().unwrap();
    assert_eq!(f1, (f1 * 1e4).round() / 1e4);

    let odd = small_phantoms(0..1).into_iter().map(|mut r| {
        r.slice.pixels = crate::imaging::Grid::filled(16, 16, 0.0);
        r.liver = Mask::empty(16, 16);
        r.lesions = vec![];
        r
    });
    let odd: Vec<SampleRecord> = odd.collect();
    assert!(run_experiment(&real, &odd, &real, &test, &cfg, &[1], None).is_err());
    assert!(run_experiment(&real, &real, &real, &test, &cfg, &[], None).is_err());
}
