//! Procedural liver phantoms: an elliptical liver with smooth texture on a
//! darker background, carrying blob lesions whose intensities follow a
//! recorded target histogram.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    gaussian_mixture, DensityHistogram, Grid, Mask, MixtureComponent, Provenance, Slice, HIST_BINS,
};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub rows: usize,
    pub cols: usize,
    /// Range of the liver ellipse semi-axes, pixels.
    pub liver_semi_axis: (f64, f64),
    pub liver_level: f64,
    pub background_level: f64,
    /// Peak amplitude of the smooth parenchyma texture.
    pub texture_amplitude: f64,
    /// Inclusive range of lesions per slice.
    pub lesion_count: (usize, usize),
    /// Range of the mean lesion radius, pixels.
    pub lesion_radius: (f64, f64),
    /// Minimum distance between a lesion and the liver boundary, pixels.
    pub lesion_margin: f64,
    /// Bin ranges the lesion histogram modes are drawn from.
    pub lesion_mean_bins: Vec<(f64, f64)>,
    pub lesion_width_bins: (f64, f64),
    /// Probability that a lesion histogram has two modes.
    pub bimodal_probability: f64,
    pub spacing: (f64, f64),
    pub max_attempts: u32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            rows: 128,
            cols: 128,
            liver_semi_axis: (42.0, 56.0),
            liver_level: 0.5,
            background_level: 0.12,
            texture_amplitude: 0.02,
            lesion_count: (1, 3),
            lesion_radius: (5.0, 11.0),
            lesion_margin: 3.0,
            lesion_mean_bins: vec![(8.0, 38.0), (62.0, 92.0)],
            lesion_width_bins: (2.0, 6.0),
            bimodal_probability: 0.2,
            spacing: (0.8, 0.8),
            max_attempts: 200,
        }
    }
}

/// Lobulation amplitude bound of the blob boundary.
const LOBE_AMPLITUDE: f64 = 0.15;
const LOBES: usize = 3;

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Generation(m.to_string()));
        if self.rows < 8 || self.cols < 8 {
            return bad("phantom must be at least 8x8");
        }
        let (a0, a1) = self.liver_semi_axis;
        if !(a0 > 0.0 && a0 <= a1) {
            return bad("liver semi-axis range is empty");
        }
        if 2.0 * a1 + 2.0 > self.rows.min(self.cols) as f64 {
            return bad("liver does not fit the slice");
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return bad("lesion count range is empty");
        }
        let (r0, r1) = self.lesion_radius;
        if self.lesion_count.1 > 0 {
            if !(r0 > 0.0 && r0 <= r1) {
                return bad("lesion radius range is empty");
            }
            let reach = r1 * (1.0 + LOBES as f64 * LOBE_AMPLITUDE) + self.lesion_margin;
            if reach >= a0 {
                return Err(Error::Generation(format!(
                    "lesions up to {reach:.1} px do not fit a liver of semi-axis {a0:.1} px"
                )));
            }
            if self.lesion_mean_bins.is_empty()
                || self.lesion_mean_bins.iter().any(|&(lo, hi)| !(0.0 <= lo && lo <= hi && hi <= (HIST_BINS - 1) as f64))
            {
                return bad("lesion mean bin ranges must lie in [0, 99]");
            }
            if !(0.0 <= self.lesion_width_bins.0 && self.lesion_width_bins.0 <= self.lesion_width_bins.1) {
                return bad("lesion width range is empty");
            }
        }
        Ok(())
    }
}

/// One generated phantom slice with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub slice: Slice,
    pub liver: Mask,
    pub lesions: Vec<Mask>,
    pub target_histograms: Vec<DensityHistogram>,
}

/// Sum of random low-frequency plane waves, roughly in [-1, 1].
struct SmoothField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, count: usize, max_freq: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let angle = rng.random_range(0.0..TAU);
                let freq = rng.random_range(0.3 * max_freq..max_freq);
                let phase = rng.random_range(0.0..TAU);
                let amp = rng.random_range(0.5..1.0);
                (freq * angle.cos(), freq * angle.sin(), phase, amp)
            })
            .collect::<Vec<_>>();
        Self { waves }
    }

    fn at(&self, r: f64, c: f64) -> f64 {
        let norm: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves.iter().map(|&(fr, fc, ph, a)| a * (fr * r + fc * c + ph).sin()).sum::<f64>() / norm
    }
}

struct Blob {
    centre: (f64, f64),
    radius: f64,
    lobes: [(f64, f64); LOBES],
}

impl Blob {
    fn draw(rng: &mut ChaCha8Rng, centre: (f64, f64), radius: f64) -> Self {
        let mut lobes = [(0.0, 0.0); LOBES];
        for l in &mut lobes {
            *l = (rng.random_range(-LOBE_AMPLITUDE..LOBE_AMPLITUDE), rng.random_range(0.0..TAU));
        }
        Self { centre, radius, lobes }
    }

    fn max_reach(&self) -> f64 {
        self.radius * (1.0 + self.lobes.iter().map(|l| l.0.abs()).sum::<f64>())
    }

    fn contains(&self, r: f64, c: f64) -> bool {
        let (dr, dc) = (r - self.centre.0, c - self.centre.1);
        let theta = dr.atan2(dc);
        let boundary = self.radius
            * (1.0
                + self
                    .lobes
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, ph))| a * ((k as f64 + 2.0) * theta + ph).cos())
                    .sum::<f64>());
        (dr * dr + dc * dc).sqrt() <= boundary
    }
}

fn draw_target_histogram(rng: &mut ChaCha8Rng, config: &PhantomConfig) -> Result<DensityHistogram> {
    let modes = if rng.random_bool(config.bimodal_probability.clamp(0.0, 1.0)) { 2 } else { 1 };
    let (w0, w1) = config.lesion_width_bins;
    let components = (0..modes)
        .map(|_| {
            let range = config.lesion_mean_bins[rng.random_range(0..config.lesion_mean_bins.len())];
            let mean_bin = if range.0 < range.1 { rng.random_range(range.0..=range.1) } else { range.0 };
            let width_bins = if w0 < w1 { rng.random_range(w0..=w1) } else { w0 };
            MixtureComponent { mean_bin, width_bins, weight: rng.random_range(0.5..1.0) }
        })
        .collect::<Vec<_>>();
    gaussian_mixture(HIST_BINS, &components)
}

/// Deterministic phantom for `seed`.
pub fn generate_phantom(seed: u64, config: &PhantomConfig) -> Result<Phantom> {
    config.validate()?;
    let mut rng = rng::stream(seed, "phantom", 0);
    let (rows, cols) = (config.rows, config.cols);
    let (a0, a1) = config.liver_semi_axis;
    let semi = (rng.random_range(a0..=a1), rng.random_range(a0..=a1));
    let slack = |n: usize, a: f64| ((n as f64 / 2.0 - a - 1.0) * 0.5).max(0.0);
    let centre = (
        rows as f64 / 2.0 + rng.random_range(-1.0..=1.0) * slack(rows, semi.0),
        cols as f64 / 2.0 + rng.random_range(-1.0..=1.0) * slack(cols, semi.1),
    );
    let tilt = rng.random_range(-0.4..0.4);
    let (st, ct) = f64::sin_cos(tilt);
    // Signed ellipse coordinate: < 1 inside.
    let ellipse = |r: f64, c: f64| {
        let (dr, dc) = (r - centre.0, c - centre.1);
        let u = ct * dr + st * dc;
        let v = -st * dr + ct * dc;
        (u / semi.0).powi(2) + (v / semi.1).powi(2)
    };
    let liver = Mask::from_fn(rows, cols, |r, c| ellipse(r as f64, c as f64) <= 1.0);
    let texture = SmoothField::new(&mut rng, 6, 0.25);
    let mut pixels = Grid::filled(rows, cols, config.background_level as f32);
    for r in 0..rows {
        for c in 0..cols {
            if liver.get(r, c) {
                let t = texture.at(r as f64, c as f64);
                pixels.set(r, c, (config.liver_level + config.texture_amplitude * t).clamp(0.0, 1.0) as f32);
            }
        }
    }

    let n_lesions = rng.random_range(config.lesion_count.0..=config.lesion_count.1);
    let mut lesions: Vec<Mask> = Vec::with_capacity(n_lesions);
    let mut targets = Vec::with_capacity(n_lesions);
    let min_axis = semi.0.min(semi.1);
    for _ in 0..n_lesions {
        let radius = rng.random_range(config.lesion_radius.0..=config.lesion_radius.1);
        let mut placed = None;
        for _ in 0..config.max_attempts {
            let blob = Blob::draw(&mut rng, (0.0, 0.0), radius);
            let reach = blob.max_reach() + config.lesion_margin;
            // Sample the centre inside the ellipse shrunk by the reach.
            let shrink = 1.0 - reach / min_axis;
            if shrink <= 0.0 {
                break;
            }
            let rad = rng.random_range(0.0f64..1.0).sqrt() * shrink;
            let ang = rng.random_range(0.0..TAU);
            let (u, v) = (rad * semi.0 * ang.cos(), rad * semi.1 * ang.sin());
            let c_r = centre.0 + ct * u - st * v;
            let c_c = centre.1 + st * u + ct * v;
            let blob = Blob { centre: (c_r, c_c), ..blob };
            let mask = Mask::from_fn(rows, cols, |r, c| blob.contains(r as f64, c as f64));
            let overlaps = lesions.iter().any(|other| dilate_overlaps(other, &mask));
            if mask.count() > 0 && mask.is_subset_of(&liver) && !overlaps {
                placed = Some(mask);
                break;
            }
        }
        let mask = placed.ok_or_else(|| {
            Error::Generation(format!("could not place a lesion of radius {radius:.1} px"))
        })?;
        let target = draw_target_histogram(&mut rng, config)?;
        fill_lesion(&mut pixels, &mask, &target, &mut rng);
        lesions.push(mask);
        targets.push(target);
    }
    let slice = Slice::new(pixels, config.spacing, Provenance::Phantom)?;
    Ok(Phantom { slice, liver, lesions, target_histograms: targets })
}

/// Assigns target-histogram quantiles to lesion pixels ranked by a smooth
/// random field, so the texture is spatially coherent.
fn fill_lesion(pixels: &mut Grid, mask: &Mask, target: &DensityHistogram, rng: &mut ChaCha8Rng) {
    let field = SmoothField::new(rng, 5, 0.6);
    let mut coords: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if mask.get(r, c) {
                coords.push((field.at(r as f64, c as f64), r, c));
            }
        }
    }
    coords.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let n = coords.len() as f64;
    for (rank, &(_, r, c)) in coords.iter().enumerate() {
        let q = (rank as f64 + 0.5) / n;
        pixels.set(r, c, target.quantile(q).clamp(0.0, 1.0) as f32);
    }
}

fn dilate_overlaps(a: &Mask, b: &Mask) -> bool {
    for r in 0..b.rows() {
        for c in 0..b.cols() {
            if b.get(r, c) {
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        if a.get_or_zero(r as isize + dr, c as isize + dc) {
                            return true;
                        }
                    }
                }
            }
        }
    }
    false
}

/// Copy of `phantom` with lesion `index` refilled to follow `target`.
/// Geometry, liver and the other lesions are unchanged.
pub fn retexture_lesion(phantom: &Phantom, index: usize, target: DensityHistogram, seed: u64) -> Result<Phantom> {
    let mask = phantom
        .lesions
        .get(index)
        .ok_or_else(|| Error::invalid(format!("phantom has no lesion {index}")))?;
    if target.len() != HIST_BINS {
        return Err(Error::invalid(format!("target histogram has {} bins, expected {HIST_BINS}", target.len())));
    }
    let mut out = phantom.clone();
    let mut rng = rng::stream(seed, "retexture", index as u64);
    fill_lesion(&mut out.slice.pixels, mask, &target, &mut rng);
    out.target_histograms[index] = target;
    Ok(out)
}

/// A healthy slice: the same phantom model with no lesions.
pub fn generate_healthy(seed: u64, config: &PhantomConfig) -> Result<Phantom> {
    let healthy = PhantomConfig { lesion_count: (0, 0), ..config.clone() };
    generate_phantom(seed, &healthy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{compute_histogram, histogram_l1};

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(7, &cfg).unwrap();
        let b = generate_phantom(7, &cfg).unwrap();
        assert_eq!(a, b);
        let bits = |p: &Phantom| p.slice.pixels.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = generate_phantom(8, &cfg).unwrap();
        assert_ne!(a.slice, c.slice);
    }

    #[test]
    fn lesions_are_inside_liver() {
        let cfg = PhantomConfig { lesion_count: (2, 4), ..PhantomConfig::default() };
        for seed in 0..20 {
            let p = generate_phantom(seed, &cfg).unwrap();
            assert!(p.lesions.len() >= 2);
            for l in &p.lesions {
                assert!(l.count() > 0);
                assert!(l.is_subset_of(&p.liver));
            }
        }
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = PhantomConfig { lesion_radius: (40.0, 60.0), ..PhantomConfig::default() };
        assert!(matches!(generate_phantom(0, &cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn healthy_has_no_lesions() {
        let p = generate_healthy(3, &PhantomConfig::default()).unwrap();
        assert!(p.lesions.is_empty());
        assert!(p.liver.count() > 1000);
    }

    #[test]
    fn lesion_histograms_follow_targets() {
        // Sampling-noise bound for lesions of at least 500 pixels, over 100 seeds.
        let cfg = PhantomConfig { lesion_radius: (13.0, 16.0), lesion_count: (1, 1), ..PhantomConfig::default() };
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let p = generate_phantom(seed, &cfg).unwrap();
            for (mask, target) in p.lesions.iter().zip(&p.target_histograms) {
                if mask.count() < 500 {
                    continue;
                }
                let h = compute_histogram(&p.slice.pixels, mask, HIST_BINS).unwrap();
                worst = worst.max(histogram_l1(&h, target).unwrap());
                checked += 1;
            }
        }
        assert!(checked > 50, "only {checked} large lesions");
        assert!(worst <= 0.2, "worst histogram L1 {worst}");
    }
}
