use super::*;
use crate::imaging::{HuWindow, Provenance};
use crate::nn::{Generator, GeneratorConfig};
use crate::phantom::{generate_healthy, PhantomConfig};
use proptest::prelude::*;

fn disk(p: usize, cr: f64, cc: f64, r: f64) -> Mask {
    Mask::from_fn(p, p, |y, x| (y as f64 - cr).powi(2) + (x as f64 - cc).powi(2) <= r * r)
}

fn ramp(p: usize) -> Grid {
    Grid::new(p, p, (0..p * p).map(|i| (i % p) as f32 / p as f32 + (i / p) as f32 * 0.01).collect()).unwrap()
}

fn flat_slice(n: usize, v: f32) -> Slice {
    Slice::new(Grid::filled(n, n, v), (1.0, 1.0), Provenance::Phantom).unwrap()
}

#[test]
fn identity_transform_is_exact() {
    let mask = disk(32, 15.0, 16.0, 6.0);
    let patch = ramp(32);
    let (p, m) = transform_lesion(&patch, &mask, 0.0, 1.0).unwrap();
    assert_eq!(p, patch);
    assert_eq!(m, mask);
}

#[test]
fn rotation_is_periodic() {
    let mask = Mask::from_fn(32, 32, |r, c| (10..20).contains(&r) && (12..17).contains(&c));
    let patch = ramp(32);
    let a = transform_lesion(&patch, &mask, 37.0, 1.1).unwrap();
    for turn in [397.0, -323.0, 757.0] {
        let b = transform_lesion(&patch, &mask, turn, 1.1).unwrap();
        assert_eq!(a.1, b.1);
        for (x, y) in a.0.data().iter().zip(b.0.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    let (_, full) = transform_lesion(&patch, &mask, 360.0, 1.0).unwrap();
    assert_eq!(full, mask);
}

#[test]
fn scaling_grows_the_bounding_box() {
    let mask = Mask::from_fn(64, 64, |r, c| (27..37).contains(&r) && (27..37).contains(&c));
    let (_, m) = transform_lesion(&Grid::filled(64, 64, 0.5), &mask, 0.0, 2.0).unwrap();
    let (r0, r1, c0, c1) = m.bbox().unwrap();
    for extent in [r1 - r0 + 1, c1 - c0 + 1] {
        assert!((19..=21).contains(&extent), "extent {extent}");
    }
}

#[test]
fn quarter_turn_swaps_axes() {
    let mask = Mask::from_fn(32, 32, |r, c| (14..19).contains(&r) && (8..25).contains(&c));
    let (_, m) = transform_lesion(&Grid::filled(32, 32, 0.0), &mask, 90.0, 1.0).unwrap();
    let (r0, r1, c0, c1) = m.bbox().unwrap();
    assert_eq!((r1 - r0 + 1, c1 - c0 + 1), (17, 5));
}

#[test]
fn transform_rejects_lesions_leaving_the_canvas() {
    let mask = disk(16, 8.0, 8.0, 6.0);
    let err = transform_lesion(&Grid::filled(16, 16, 0.0), &mask, 0.0, 2.0).unwrap_err();
    assert!(matches!(err, Error::Transform(_)), "{err}");
    assert!(matches!(transform_lesion(&Grid::filled(16, 16, 0.0), &Mask::empty(16, 16), 0.0, 1.0), Err(Error::EmptyMask)));
    assert!(transform_lesion(&Grid::filled(16, 16, 0.0), &mask, 0.0, 0.0).is_err());
}

#[test]
fn hard_paste_without_feathering() {
    let base = Grid::filled(20, 20, 0.2);
    let lesion = Grid::filled(20, 20, 0.9);
    let mask = disk(20, 10.0, 10.0, 4.0);
    let out = blend(&base, &lesion, &mask, 0.0).unwrap();
    for r in 0..20 {
        for c in 0..20 {
            assert_eq!(out.get(r, c), if mask.get(r, c) { 0.9 } else { 0.2 });
        }
    }
}

#[test]
fn feathering_stays_within_four_sigma() {
    let sigma = 1.5;
    let base = Grid::new(40, 40, (0..1600).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let lesion = Grid::filled(40, 40, 5.0);
    let mask = disk(40, 20.0, 20.0, 7.0);
    let out = blend(&base, &lesion, &mask, sigma).unwrap();
    let mut changed_outside = false;
    for r in 0..40 {
        for c in 0..40 {
            let d = ((r as f64 - 20.0).powi(2) + (c as f64 - 20.0).powi(2)).sqrt();
            if d > 7.0 + 4.0 * sigma + 1.0 {
                assert_eq!(out.get(r, c).to_bits(), base.get(r, c).to_bits(), "({r},{c})");
            } else if !mask.get(r, c) && out.get(r, c) != base.get(r, c) {
                changed_outside = true;
            }
        }
    }
    assert!(changed_outside, "feathering should bleed past the mask edge");
    // Deep inside, the kernel support is all lesion.
    assert!((out.get(20, 20) - 5.0).abs() < 1e-5);
}

#[test]
fn feather_alpha_is_monotone_from_the_centre() {
    let mask = disk(41, 20.0, 20.0, 6.0);
    let alpha = feather_alpha(&mask, 2.0);
    let row: Vec<f64> = (20..41).map(|c| alpha[20 * 41 + c]).collect();
    assert!(row.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(alpha.iter().all(|a| (0.0..=1.0).contains(a)));
}

fn liver_slice() -> (Slice, Mask) {
    let liver = disk(64, 32.0, 32.0, 20.0);
    (flat_slice(64, 0.5), liver)
}

#[test]
fn placement_stays_inside_the_liver() {
    let (slice, liver) = liver_slice();
    let mask = disk(16, 8.0, 8.0, 4.0);
    let patch = Grid::filled(16, 16, 0.1);
    for seed in 0..20 {
        let spec = ImplantSpec { seed, ..ImplantSpec::default() };
        let res = place_lesion(&slice, &liver, &patch, &mask, &spec).unwrap();
        assert!(res.lesion_mask.is_subset_of(&liver));
        assert!(!res.lesion_mask.is_empty());
        assert!((0.0..360.0).contains(&res.applied.rotation_deg));
        assert!((0.7..=1.3).contains(&res.applied.scale));
        assert!(liver.get(res.applied.centre.0, res.applied.centre.1));
        assert_eq!(res.slice.provenance, Provenance::Synthetic);
        // The lesion centroid is dominated by the lesion value.
        let (cr, cc) = res.lesion_mask.centroid().unwrap();
        assert!(res.slice.pixels.get(cr.round() as usize, cc.round() as usize) < 0.3);
    }
}

#[test]
fn placement_is_deterministic() {
    let (slice, liver) = liver_slice();
    let mask = disk(16, 7.0, 9.0, 3.5);
    let patch = ramp(16);
    let spec = ImplantSpec { seed: 42, ..ImplantSpec::default() };
    let a = place_lesion(&slice, &liver, &patch, &mask, &spec).unwrap();
    let b = place_lesion(&slice, &liver, &patch, &mask, &spec).unwrap();
    assert_eq!(a, b);
    let c = place_lesion(&slice, &liver, &patch, &mask, &ImplantSpec { seed: 43, ..spec }).unwrap();
    assert_ne!(a.applied, c.applied);
}

#[test]
fn infeasible_placement_reports_attempts() {
    let liver = disk(64, 32.0, 32.0, 3.0);
    let mask = disk(32, 16.0, 16.0, 10.0);
    let spec = ImplantSpec { scale: Some(1.0), max_retries: 7, ..ImplantSpec::default() };
    match place_lesion(&flat_slice(64, 0.5), &liver, &Grid::filled(32, 32, 0.1), &mask, &spec) {
        Err(Error::Placement { attempts, .. }) => assert_eq!(attempts, 7),
        other => panic!("expected placement failure, got {other:?}"),
    }
}

#[test]
fn single_pixel_lesion() {
    let (slice, liver) = liver_slice();
    let mask = Mask::from_fn(8, 8, |r, c| r == 3 && c == 4);
    let spec = ImplantSpec { rotation_deg: Some(45.0), scale: Some(1.0), feather_sigma: 0.0, ..ImplantSpec::default() };
    let res = place_lesion(&slice, &liver, &Grid::filled(8, 8, 0.9), &mask, &spec).unwrap();
    assert_eq!(res.lesion_mask.count(), 1);
    let (r, c) = res.applied.centre;
    assert!(res.lesion_mask.get(r, c));
    assert_eq!(res.slice.pixels.get(r, c), 0.9);
}

#[test]
fn spec_validation() {
    assert!(ImplantSpec::default().validate().is_ok());
    assert!(ImplantSpec { scale_range: (1.3, 0.7), ..ImplantSpec::default() }.validate().is_err());
    assert!(ImplantSpec { scale_range: (0.0, 1.0), ..ImplantSpec::default() }.validate().is_err());
    assert!(ImplantSpec { feather_sigma: -1.0, ..ImplantSpec::default() }.validate().is_err());
    assert!(ImplantSpec { scale: Some(-2.0), ..ImplantSpec::default() }.validate().is_err());
}

fn healthy_pool() -> Vec<SampleRecord> {
    let cfg = PhantomConfig {
        rows: 48,
        cols: 48,
        liver_semi_axis: (16.0, 19.0),
        ..PhantomConfig::default()
    };
    (0..3).map(|s| SampleRecord::from_phantom(&generate_healthy(s, &cfg).unwrap())).collect()
}

fn tiny_synth(conditioning: Conditioning) -> Synthesizer {
    let cfg = GeneratorConfig { conditioning, ..GeneratorConfig::tiny() };
    Synthesizer::from_generator(Generator::init(cfg, 5).unwrap(), "digest")
}

#[test]
fn dataset_build_is_deterministic_and_annotated() {
    let healthy = healthy_pool();
    let shapes = vec![disk(8, 4.0, 4.0, 2.0), Mask::from_fn(8, 8, |r, c| (2..6).contains(&r) && (3..5).contains(&c))];
    let hists = vec![DensityHistogram::uniform(8), DensityHistogram::delta(8, 2).unwrap()];
    let synth = tiny_synth(Conditioning::MaskAndDensity);
    let opts = BuildOptions::new(6, SynthesisMode::MaskPlusDensity, 9);
    let a = build_synthetic_dataset(&healthy, &shapes, &hists, &synth, &opts).unwrap();
    let b = build_synthetic_dataset(&healthy, &shapes, &hists, &synth, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 6);
    assert_eq!(a.manifest.samples.len(), 6);
    assert_eq!(a.manifest.checkpoint_digest, "digest");
    for (rec, prov) in a.records.iter().zip(&a.manifest.samples) {
        assert_eq!(rec.lesions.len(), 1);
        assert!(rec.lesions[0].is_subset_of(&rec.liver));
        assert_eq!(rec.window, HuWindow::UNIT);
        assert!(prov.histogram_index.is_some());
        assert_eq!(rec.liver, healthy[prov.healthy_index].liver);
    }
    let other = build_synthetic_dataset(&healthy, &shapes, &hists, &synth, &BuildOptions { seed: 10, ..opts }).unwrap();
    assert_ne!(a.manifest.samples, other.manifest.samples);

    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), &a).unwrap();
    let back = crate::dataset::read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 6);
    let text = std::fs::read_to_string(dir.path().join(BUILD_MANIFEST)).unwrap();
    let manifest: BuildManifest = toml::from_str(&text).unwrap();
    assert_eq!(manifest, a.manifest);
}

#[test]
fn dataset_build_checks_inputs() {
    let healthy = healthy_pool();
    let shapes = vec![disk(8, 4.0, 4.0, 2.0)];
    let dense = tiny_synth(Conditioning::MaskAndDensity);
    let opts = BuildOptions::new(2, SynthesisMode::MaskPlusDensity, 0);
    assert!(matches!(build_synthetic_dataset(&healthy, &shapes, &[], &dense, &opts), Err(Error::DatasetBuild(_))));
    let mask_only = BuildOptions::new(2, SynthesisMode::MaskOnly, 0);
    assert!(matches!(build_synthetic_dataset(&healthy, &shapes, &[], &dense, &mask_only), Err(Error::Configuration(_))));
    let ok = build_synthetic_dataset(&healthy, &shapes, &[], &tiny_synth(Conditioning::MaskOnly), &mask_only).unwrap();
    assert!(ok.manifest.samples.iter().all(|s| s.histogram_index.is_none()));

    let mut sick = healthy.clone();
    sick[1].lesions.push(disk(48, 24.0, 24.0, 2.0));
    assert!(build_synthetic_dataset(&sick, &shapes, &[], &tiny_synth(Conditioning::MaskOnly), &mask_only).is_err());

    // A lesion larger than any liver exhausts its redraws.
    let huge = vec![Mask::from_fn(8, 8, |_, _| true)];
    let tiny_liver: Vec<SampleRecord> = healthy
        .iter()
        .map(|h| SampleRecord { liver: disk(48, 24.0, 24.0, 1.0), ..h.clone() })
        .collect();
    let opts = BuildOptions { max_redraws: 2, ..mask_only };
    let err = build_synthetic_dataset(&tiny_liver, &huge, &[], &tiny_synth(Conditioning::MaskOnly), &opts).unwrap_err();
    assert!(matches!(err, Error::DatasetBuild(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn implants_are_contained(seed in 0u64..1000, radius in 1.0f64..5.0) {
        let (slice, liver) = liver_slice();
        let mask = disk(16, 8.0, 8.0, radius);
        let spec = ImplantSpec { seed, ..ImplantSpec::default() };
        let res = place_lesion(&slice, &liver, &Grid::filled(16, 16, 0.0), &mask, &spec).unwrap();
        prop_assert!(res.lesion_mask.is_subset_of(&liver));
        // Outside the feather band the slice is untouched.
        let alpha = feather_alpha(&res.lesion_mask, spec.feather_sigma);
        for (i, a) in alpha.iter().enumerate() {
            if *a == 0.0 {
                prop_assert_eq!(res.slice.pixels.data()[i], slice.pixels.data()[i]);
            }
        }
    }
}
