//! Slices, masks, lesion samples and density histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bins of a density histogram.
pub const HIST_BINS: usize = 100;

/// Row-major 2D grid of intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("grid must be non-empty"));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        assert!(rows > 0 && cols > 0, "grid must be non-empty");
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Value at integer coordinates, replicating the border outside the grid.
    pub fn get_clamped(&self, r: isize, c: isize) -> f32 {
        let r = r.clamp(0, self.rows as isize - 1) as usize;
        let c = c.clamp(0, self.cols as isize - 1) as usize;
        self.get(r, c)
    }

    /// Bilinear interpolation at fractional (row, col), border replicated.
    pub fn sample_bilinear(&self, r: f64, c: f64) -> f32 {
        let r0 = r.floor();
        let c0 = c.floor();
        let fr = r - r0;
        let fc = c - c0;
        let (r0, c0) = (r0 as isize, c0 as isize);
        let v00 = self.get_clamped(r0, c0) as f64;
        if fr == 0.0 && fc == 0.0 {
            return v00 as f32;
        }
        let v01 = self.get_clamped(r0, c0 + 1) as f64;
        let v10 = self.get_clamped(r0 + 1, c0) as f64;
        let v11 = self.get_clamped(r0 + 1, c0 + 1) as f64;
        let top = v00 * (1.0 - fc) + v01 * fc;
        let bottom = v10 * (1.0 - fc) + v11 * fc;
        (top * (1.0 - fr) + bottom * fr) as f32
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Binary 2D mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("mask must be non-empty"));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "mask {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "mask must be non-empty");
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    /// Builds a mask from float values, which must each be exactly 0 or 1.
    pub fn from_f32(rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                v => Err(Error::invalid(format!("mask value {v} is not binary"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(rows, cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if f(r, c) {
                    m.data[r * cols + c] = 1;
                }
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] == 1
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.data[r * self.cols + c] = on as u8;
    }

    /// Out-of-range coordinates read as background.
    pub fn get_or_zero(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.rows
            && (c as usize) < self.cols
            && self.get(r as usize, c as usize)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Inclusive bounding box `(r_min, r_max, c_min, c_max)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, r, c, c),
                        Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                    });
                }
            }
        }
        bb
    }

    /// Mean (row, col) of foreground pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape() == other.shape()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("mask shapes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a | b).collect();
        Mask::new(self.rows, self.cols, data)
    }
}

/// Where the pixels of a slice came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Phantom,
    Synthetic,
}

/// One 2D CT-style image.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub pixels: Grid,
    /// (row_mm, col_mm)
    pub spacing: (f64, f64),
    pub provenance: Provenance,
}

impl Slice {
    pub fn new(pixels: Grid, spacing: (f64, f64), provenance: Provenance) -> Result<Self> {
        if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self { pixels, spacing, provenance })
    }
}

/// Linear intensity window mapping `[lo, hi]` onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl HuWindow {
    /// Liver soft-tissue window.
    pub const LIVER: HuWindow = HuWindow { lo: -100.0, hi: 400.0 };
    /// Identity window for data already in normalized units.
    pub const UNIT: HuWindow = HuWindow { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let w = Self { lo, hi };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo < self.hi && self.lo.is_finite() && self.hi.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate window ({}, {})", self.lo, self.hi)))
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.lo + v * (self.hi - self.lo)
    }
}

impl Default for HuWindow {
    fn default() -> Self {
        Self::LIVER
    }
}

pub fn normalize_hu(slice: &Slice, window: HuWindow) -> Result<Grid> {
    window.validate()?;
    Ok(slice.pixels.map(|v| window.normalize(v as f64) as f32))
}

/// A lesion decomposed into its normalized intensity patch and binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionSample {
    pub patch: Grid,
    pub mask: Mask,
    /// Set when the lesion had to be downscaled to fit the patch.
    pub rescaled: bool,
}

impl LesionSample {
    pub fn new(patch: Grid, mask: Mask, rescaled: bool) -> Result<Self> {
        if patch.shape() != mask.shape() {
            return Err(Error::invalid("patch and mask shapes differ"));
        }
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        if patch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("patch values must lie in [0, 1]"));
        }
        Ok(Self { patch, mask, rescaled })
    }

    pub fn histogram(&self) -> Result<DensityHistogram> {
        compute_histogram(&self.patch, &self.mask, HIST_BINS)
    }
}

/// Fraction of the patch a rescaled lesion bounding box may occupy.
const RESCALE_FILL: f64 = 0.9;

/// Crops a `patch_size` square centered on the lesion bounding box.
///
/// Lesions whose bounding box does not fit are isotropically downscaled
/// to 90% of the patch and flagged as `rescaled`.
pub fn extract_lesion_sample(
    slice: &Slice,
    lesion_mask: &Mask,
    patch_size: usize,
    window: HuWindow,
) -> Result<LesionSample> {
    if patch_size < 2 {
        return Err(Error::invalid("patch size must be at least 2"));
    }
    if slice.pixels.shape() != lesion_mask.shape() {
        return Err(Error::invalid("slice and mask shapes differ"));
    }
    let (r0, r1, c0, c1) = lesion_mask.bbox().ok_or(Error::EmptyMask)?;
    let norm = normalize_hu(slice, window)?;
    let half = patch_size / 2;
    let centre = |lo: usize, hi: usize| (lo + hi).div_ceil(2);
    let (cr, cc) = (centre(r0, r1), centre(c0, c1));
    let fits = |lo: usize, hi: usize| centre(lo, hi) - lo <= half && hi - centre(lo, hi) < patch_size - half;
    let mut patch = Grid::filled(patch_size, patch_size, 0.0);
    let mut mask = Mask::empty(patch_size, patch_size);
    if fits(r0, r1) && fits(c0, c1) {
        for i in 0..patch_size {
            for j in 0..patch_size {
                let sr = cr as isize + i as isize - half as isize;
                let sc = cc as isize + j as isize - half as isize;
                patch.set(i, j, norm.get_clamped(sr, sc));
                mask.set(i, j, lesion_mask.get_or_zero(sr, sc));
            }
        }
        return LesionSample::new(patch, mask, false);
    }
    let extent = (r1 - r0 + 1).max(c1 - c0 + 1) as f64;
    let scale = RESCALE_FILL * patch_size as f64 / extent;
    let (mr, mc) = ((r0 + r1) as f64 / 2.0, (c0 + c1) as f64 / 2.0);
    for i in 0..patch_size {
        for j in 0..patch_size {
            let sr = mr + (i as f64 - half as f64 + 0.5) / scale - 0.5;
            let sc = mc + (j as f64 - half as f64 + 0.5) / scale - 0.5;
            patch.set(i, j, norm.sample_bilinear(sr, sc));
            mask.set(i, j, lesion_mask.get_or_zero(sr.round() as isize, sc.round() as isize));
        }
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    LesionSample::new(patch, mask, true)
}

/// Probability mass over uniform intensity bins of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    bins: Vec<f64>,
}

/// Tolerance on the total mass of a histogram.
pub const MASS_TOLERANCE: f64 = 1e-6;

impl DensityHistogram {
    pub fn new(bins: Vec<f64>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if bins.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::invalid("histogram bins must be finite and non-negative"));
        }
        let total: f64 = bins.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::invalid(format!("histogram mass {total} is not 1")));
        }
        Ok(Self { bins })
    }

    /// Normalizes non-negative weights to unit mass.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("histogram weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("histogram weights sum to zero"));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n_bins: usize) -> Self {
        Self { bins: vec![1.0 / n_bins as f64; n_bins] }
    }

    pub fn delta(n_bins: usize, bin: usize) -> Result<Self> {
        if bin >= n_bins {
            return Err(Error::invalid(format!("bin {bin} out of range 0..{n_bins}")));
        }
        let mut bins = vec![0.0; n_bins];
        bins[bin] = 1.0;
        Ok(Self { bins })
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Mean intensity in `[0, 1]` using bin centres.
    pub fn mean_intensity(&self) -> f64 {
        let n = self.bins.len() as f64;
        self.bins.iter().enumerate().map(|(i, p)| p * (i as f64 + 0.5) / n).sum()
    }

    /// Intensity at cumulative probability `q`, linear within bins.
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.bins.len() as f64;
        let q = q.clamp(0.0, 1.0);
        let mut acc = 0.0;
        for (i, &p) in self.bins.iter().enumerate() {
            if p > 0.0 && acc + p >= q {
                let frac = ((q - acc) / p).clamp(0.0, 1.0);
                return (i as f64 + frac) / n;
            }
            acc += p;
        }
        let last = self.bins.iter().rposition(|&p| p > 0.0).unwrap_or(self.bins.len() - 1);
        (last as f64 + 1.0) / n
    }
}

/// Bin index for an intensity: half-open bins, last bin closed at 1.0.
pub fn bin_index(value: f64, n_bins: usize) -> usize {
    let b = (value * n_bins as f64).floor();
    if b < 0.0 {
        0
    } else {
        (b as usize).min(n_bins - 1)
    }
}

pub fn compute_histogram(patch: &Grid, mask: &Mask, n_bins: usize) -> Result<DensityHistogram> {
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be positive"));
    }
    if patch.shape() != mask.shape() {
        return Err(Error::invalid(format!(
            "patch {:?} and mask {:?} shapes differ",
            patch.shape(),
            mask.shape()
        )));
    }
    let mut counts = vec![0u64; n_bins];
    let mut total = 0u64;
    for (&v, &m) in patch.data().iter().zip(mask.data()) {
        if m == 1 {
            counts[bin_index(v as f64, n_bins)] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let bins = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(DensityHistogram { bins })
}

/// Sum of absolute bin differences, in `[0, 2]`.
pub fn histogram_l1(a: &DensityHistogram, b: &DensityHistogram) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("histograms have different bin counts"));
    }
    Ok(a.bins.iter().zip(&b.bins).map(|(x, y)| (x - y).abs()).sum())
}

/// One Gaussian bump of a histogram mixture, in bin units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean_bin: f64,
    pub width_bins: f64,
    pub weight: f64,
}

/// Discretized Gaussian mixture over `n_bins` bins, normalized to unit mass.
/// A zero width puts the component's whole weight on its nearest bin.
pub fn gaussian_mixture(n_bins: usize, components: &[MixtureComponent]) -> Result<DensityHistogram> {
    if components.is_empty() {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    let top = (n_bins - 1) as f64;
    let mut weights = vec![0.0; n_bins];
    for comp in components {
        if !(0.0..=top).contains(&comp.mean_bin) {
            return Err(Error::invalid(format!("mean bin {} outside [0, {top}]", comp.mean_bin)));
        }
        if !(comp.weight > 0.0 && comp.weight.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        if !(comp.width_bins >= 0.0 && comp.width_bins.is_finite()) {
            return Err(Error::invalid("mixture widths must be non-negative"));
        }
        if comp.width_bins == 0.0 {
            weights[comp.mean_bin.round() as usize] += comp.weight;
            continue;
        }
        let bumps: Vec<f64> = (0..n_bins)
            .map(|i| {
                let z = (i as f64 - comp.mean_bin) / comp.width_bins;
                (-0.5 * z * z).exp()
            })
            .collect();
        let mass: f64 = bumps.iter().sum();
        for (w, b) in weights.iter_mut().zip(bumps) {
            *w += comp.weight * b / mass;
        }
    }
    DensityHistogram::from_weights(&weights)
}
