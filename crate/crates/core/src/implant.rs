//! Implanting synthesized lesions into healthy slices: random rotation and
//! scale, placement strictly inside the liver, feathered alpha blending.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::imaging::{DensityHistogram, Grid, Mask, Provenance, Slice};
use crate::nn::Conditioning;
use crate::rng::{derive_seed, stream};
use crate::synthesis::Synthesizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplantSpec {
    /// Fixed rotation in degrees; drawn from [0, 360) when absent.
    pub rotation_deg: Option<f64>,
    /// Fixed scale; drawn from `scale_range` when absent.
    pub scale: Option<f64>,
    pub scale_range: (f64, f64),
    pub seed: u64,
    pub feather_sigma: f64,
    pub max_retries: u32,
}

impl Default for ImplantSpec {
    fn default() -> Self {
        Self { rotation_deg: None, scale: None, scale_range: (0.7, 1.3), seed: 0, feather_sigma: 2.0, max_retries: 50 }
    }
}

impl ImplantSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("scale range ({lo}, {hi}) must be positive and ordered")));
        }
        if self.scale.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("scale must be positive"));
        }
        if self.rotation_deg.is_some_and(|r| !r.is_finite()) {
            return Err(Error::invalid("rotation must be finite"));
        }
        if !(self.feather_sigma >= 0.0 && self.feather_sigma.is_finite()) {
            return Err(Error::invalid("feather sigma must be non-negative"));
        }
        Ok(())
    }
}

/// The concrete transform and position an implant used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedImplant {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Slice pixel the lesion pivot was placed on.
    pub centre: (usize, usize),
    /// Candidate centres tried, including the accepted one.
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplantResult {
    pub slice: Slice,
    pub lesion_mask: Mask,
    pub applied: AppliedImplant,
}

/// Rounded mask centroid; rotation and scaling keep this pixel fixed.
fn pivot(mask: &Mask) -> Result<(isize, isize)> {
    let (r, c) = mask.centroid().ok_or(Error::EmptyMask)?;
    Ok((r.round() as isize, c.round() as isize))
}

/// Rotates and scales a lesion about its mask centroid on the same canvas.
/// Intensities are bilinear, the mask nearest-neighbour.
pub fn transform_lesion(patch: &Grid, mask: &Mask, rotation_deg: f64, scale: f64) -> Result<(Grid, Mask)> {
    if patch.shape() != mask.shape() {
        return Err(Error::invalid("patch and mask shapes differ"));
    }
    if !(scale > 0.0 && scale.is_finite() && rotation_deg.is_finite()) {
        return Err(Error::invalid(format!("invalid transform: rotation {rotation_deg}, scale {scale}")));
    }
    let (pr, pc) = pivot(mask)?;
    let (rows, cols) = mask.shape();
    let (sin, cos) = rotation_deg.rem_euclid(360.0).to_radians().sin_cos();

    // Every source lesion pixel must land on the canvas.
    for r in 0..rows {
        for c in 0..cols {
            if !mask.get(r, c) {
                continue;
            }
            let (dr, dc) = ((r as isize - pr) as f64, (c as isize - pc) as f64);
            let tr = pr as f64 + scale * (cos * dr - sin * dc);
            let tc = pc as f64 + scale * (sin * dr + cos * dc);
            if tr < -0.5 || tc < -0.5 || tr > rows as f64 - 0.5 || tc > cols as f64 - 0.5 {
                return Err(Error::Transform(format!(
                    "lesion rotated by {rotation_deg} and scaled by {scale} leaves the {rows}x{cols} canvas"
                )));
            }
        }
    }

    let mut out_patch = Grid::filled(rows, cols, 0.0);
    let mut out_mask = Mask::empty(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let (dr, dc) = ((r as isize - pr) as f64, (c as isize - pc) as f64);
            let sr = pr as f64 + (cos * dr + sin * dc) / scale;
            let sc = pc as f64 + (-sin * dr + cos * dc) / scale;
            out_patch.set(r, c, patch.sample_bilinear(sr, sc));
            if mask.get_or_zero(sr.round() as isize, sc.round() as isize) {
                out_mask.set(r, c, true);
            }
        }
    }
    if out_mask.is_empty() {
        return Err(Error::Transform(format!("lesion vanishes at scale {scale}")));
    }
    Ok((out_patch, out_mask))
}

/// Gaussian-feathered alpha of `mask`: a radial kernel truncated at 4σ
/// and normalized over its support, so alpha is exactly zero farther than
/// 4σ from the mask. σ = 0 gives the mask itself.
pub fn feather_alpha(mask: &Mask, sigma: f64) -> Vec<f64> {
    let (rows, cols) = mask.shape();
    if sigma == 0.0 {
        return mask.data().iter().map(|&v| v as f64).collect();
    }
    let reach = 4.0 * sigma;
    let radius = reach.floor() as isize;
    let mut kernel = Vec::new();
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            let d2 = (dr * dr + dc * dc) as f64;
            if d2 <= reach * reach {
                kernel.push((dr, dc, (-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    let total: f64 = kernel.iter().map(|k| k.2).sum();
    let mut alpha = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if !mask.get(r, c) {
                continue;
            }
            for &(dr, dc, w) in &kernel {
                let (y, x) = (r as isize + dr, c as isize + dc);
                if y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols {
                    alpha[y as usize * cols + x as usize] += w / total;
                }
            }
        }
    }
    for a in &mut alpha {
        *a = a.clamp(0.0, 1.0);
    }
    alpha
}

/// `alpha * lesion + (1 - alpha) * base` with feathered alpha; pixels with
/// zero alpha keep their base value bit for bit.
pub fn blend(base: &Grid, lesion: &Grid, mask: &Mask, feather_sigma: f64) -> Result<Grid> {
    if base.shape() != lesion.shape() || base.shape() != mask.shape() {
        return Err(Error::invalid("blend operands must share a shape"));
    }
    if !(feather_sigma >= 0.0 && feather_sigma.is_finite()) {
        return Err(Error::invalid("feather sigma must be non-negative"));
    }
    let alpha = feather_alpha(mask, feather_sigma);
    let mut out = base.clone();
    for ((o, &l), &a) in out.data_mut().iter_mut().zip(lesion.data()).zip(&alpha) {
        if a == 0.0 {
            continue;
        }
        *o = if a == 1.0 { l } else { (a * l as f64 + (1.0 - a) * *o as f64) as f32 };
    }
    Ok(out)
}

/// Transforms the lesion, picks a liver pixel for its pivot such that the
/// whole lesion lies inside the liver, and blends it in. `patch` must be in
/// the slice's intensity units.
pub fn place_lesion(slice: &Slice, liver: &Mask, patch: &Grid, mask: &Mask, spec: &ImplantSpec) -> Result<ImplantResult> {
    spec.validate()?;
    let (rows, cols) = slice.pixels.shape();
    if liver.shape() != (rows, cols) {
        return Err(Error::invalid("liver mask does not match the slice"));
    }
    if liver.is_empty() {
        return Err(Error::invalid("liver mask is empty"));
    }
    let mut rng = stream(spec.seed, "implant", 0);
    let rotation = spec.rotation_deg.unwrap_or_else(|| rng.random_range(0.0..360.0));
    let scale = spec.scale.unwrap_or_else(|| {
        let (lo, hi) = spec.scale_range;
        if lo == hi { lo } else { rng.random_range(lo..=hi) }
    });
    let (tpatch, tmask) = transform_lesion(patch, mask, rotation, scale)?;
    let (pr, pc) = pivot(mask)?;
    let lesion_pixels: Vec<(isize, isize)> = (0..tmask.rows())
        .flat_map(|r| (0..tmask.cols()).map(move |c| (r, c)))
        .filter(|&(r, c)| tmask.get(r, c))
        .map(|(r, c)| (r as isize - pr, c as isize - pc))
        .collect();
    let liver_pixels: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| liver.get(r, c))
        .collect();

    for attempt in 1..=spec.max_retries {
        let (cr, cc) = liver_pixels[rng.random_range(0..liver_pixels.len())];
        let fits = lesion_pixels.iter().all(|&(dr, dc)| liver.get_or_zero(cr as isize + dr, cc as isize + dc));
        if !fits {
            continue;
        }
        let (off_r, off_c) = (cr as isize - pr, cc as isize - pc);
        let mut lesion_mask = Mask::empty(rows, cols);
        for &(dr, dc) in &lesion_pixels {
            lesion_mask.set((cr as isize + dr) as usize, (cc as isize + dc) as usize, true);
        }
        // Lesion intensities over the slice; outside the canvas the slice
        // itself, so feathering there is a no-op.
        let mut lesion = slice.pixels.clone();
        for r in 0..tpatch.rows() {
            for c in 0..tpatch.cols() {
                let (y, x) = (r as isize + off_r, c as isize + off_c);
                if y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols {
                    lesion.set(y as usize, x as usize, tpatch.get(r, c));
                }
            }
        }
        let pixels = blend(&slice.pixels, &lesion, &lesion_mask, spec.feather_sigma)?;
        let out = Slice { pixels, spacing: slice.spacing, provenance: Provenance::Synthetic };
        let applied = AppliedImplant { rotation_deg: rotation, scale, centre: (cr, cc), attempts: attempt };
        return Ok(ImplantResult { slice: out, lesion_mask, applied });
    }
    Err(Error::Placement {
        attempts: spec.max_retries,
        reason: format!("no liver position holds a {}-pixel lesion", lesion_pixels.len()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisMode {
    MaskOnly,
    MaskPlusDensity,
}

impl SynthesisMode {
    pub fn conditioning(self) -> Conditioning {
        match self {
            SynthesisMode::MaskOnly => Conditioning::MaskOnly,
            SynthesisMode::MaskPlusDensity => Conditioning::MaskAndDensity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub n_samples: usize,
    pub mode: SynthesisMode,
    pub seed: u64,
    /// Transform and blending settings; the seed is replaced per sample.
    pub implant: ImplantSpec,
    /// Redraws allowed per sample after a failed transform or placement.
    pub max_redraws: u32,
}

impl BuildOptions {
    pub fn new(n_samples: usize, mode: SynthesisMode, seed: u64) -> Self {
        Self { n_samples, mode, seed, implant: ImplantSpec::default(), max_redraws: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub seed: u64,
    pub healthy_index: usize,
    pub shape_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram_index: Option<usize>,
    pub redraws: u32,
    pub applied: AppliedImplant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub seed: u64,
    pub mode: SynthesisMode,
    pub n_samples: usize,
    pub checkpoint_digest: String,
    pub placement_failures: u64,
    pub transform_failures: u64,
    pub samples: Vec<SampleProvenance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub records: Vec<SampleRecord>,
    pub manifest: BuildManifest,
}

pub const BUILD_MANIFEST: &str = "build_manifest";

/// Builds `n_samples` slices, each a healthy slice with one synthesized
/// lesion drawn from the shape (and, with density, histogram) pools.
pub fn build_synthetic_dataset(
    healthy: &[SampleRecord],
    shapes: &[Mask],
    histograms: &[DensityHistogram],
    synth: &Synthesizer,
    options: &BuildOptions,
) -> Result<SyntheticDataset> {
    let fail = |m: String| Err(Error::DatasetBuild(m));
    if options.n_samples == 0 {
        return fail("n_samples must be positive".into());
    }
    if healthy.is_empty() || shapes.is_empty() {
        return fail("healthy-slice and shape pools must be non-empty".into());
    }
    if options.mode == SynthesisMode::MaskPlusDensity && histograms.is_empty() {
        return fail("histogram pool must be non-empty with density conditioning".into());
    }
    if synth.conditioning() != options.mode.conditioning() {
        return Err(Error::Configuration(format!(
            "{:?} build needs a {:?} generator, checkpoint is {:?}",
            options.mode,
            options.mode.conditioning(),
            synth.conditioning()
        )));
    }
    if let Some(i) = healthy.iter().position(|h| !h.lesions.is_empty()) {
        return fail(format!("healthy slice {i} already carries lesions"));
    }
    options.implant.validate()?;
    let uniform = DensityHistogram::uniform(synth.hist_bins());

    let mut records = Vec::with_capacity(options.n_samples);
    let mut samples = Vec::with_capacity(options.n_samples);
    let (mut placement_failures, mut transform_failures) = (0u64, 0u64);
    for i in 0..options.n_samples {
        let sample_seed = derive_seed(options.seed, "sample", i as u64);
        let mut last_error = None;
        let mut built = None;
        for redraw in 0..=options.max_redraws {
            let mut rng = stream(sample_seed, "draw", redraw as u64);
            let healthy_index = rng.random_range(0..healthy.len());
            let shape_index = rng.random_range(0..shapes.len());
            let histogram_index = match options.mode {
                SynthesisMode::MaskPlusDensity => Some(rng.random_range(0..histograms.len())),
                SynthesisMode::MaskOnly => None,
            };
            let hist = histogram_index.map_or(&uniform, |k| &histograms[k]);
            let base = &healthy[healthy_index];
            let mask = &shapes[shape_index];
            let patch = synth
                .synthesize_normalized(mask, hist)?
                .map(|v| base.window.denormalize(v as f64) as f32);
            let spec = ImplantSpec { seed: derive_seed(sample_seed, "implant", redraw as u64), ..options.implant.clone() };
            match place_lesion(&base.slice, &base.liver, &patch, mask, &spec) {
                Ok(result) => {
                    built = Some((result, healthy_index, shape_index, histogram_index, redraw));
                    break;
                }
                Err(e @ Error::Placement { .. }) => {
                    placement_failures += 1;
                    last_error = Some(e);
                }
                Err(e @ Error::Transform(_)) => {
                    transform_failures += 1;
                    last_error = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        let Some((result, healthy_index, shape_index, histogram_index, redraws)) = built else {
            return fail(format!(
                "sample {i}: no feasible implant after {} draws (last error: {})",
                options.max_redraws + 1,
                last_error.map_or_else(String::new, |e| e.to_string())
            ));
        };
        let base = &healthy[healthy_index];
        records.push(SampleRecord::new(result.slice, base.liver.clone(), vec![result.lesion_mask], base.window)?);
        samples.push(SampleProvenance {
            seed: sample_seed,
            healthy_index,
            shape_index,
            histogram_index,
            redraws,
            applied: result.applied,
        });
    }
    let manifest = BuildManifest {
        seed: options.seed,
        mode: options.mode,
        n_samples: options.n_samples,
        checkpoint_digest: synth.digest().to_string(),
        placement_failures,
        transform_failures,
        samples,
    };
    Ok(SyntheticDataset { records, manifest })
}

/// Writes the records in the dataset layout plus the build manifest.
pub fn write_synthetic_dataset(root: &std::path::Path, dataset: &SyntheticDataset) -> Result<()> {
    crate::dataset::write_dataset(root, &dataset.records)?;
    let text = toml::to_string(&dataset.manifest).map_err(|e| Error::Configuration(e.to_string()))?;
    std::fs::write(root.join(BUILD_MANIFEST), text)?;
    Ok(())
}

#[cfg(test)]
mod tests;
