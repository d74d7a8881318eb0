//! Inference-time control: lesions from arbitrary (mask, histogram) pairs,
//! histogram presets and the shape-by-density grid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_mixture, DensityHistogram, Grid, HuWindow, Mask, MixtureComponent, HIST_BINS};
use crate::nn::{Conditioning, Generator, GeneratorInput, Mode};
use crate::train::checkpoint::{CheckpointManifest, MANIFEST};
use crate::train::{checkpoint_digest, load_generator};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputEncoding {
    /// [0, 1].
    #[default]
    Normalized,
    /// Mapped through the request's window back to HU.
    WindowedHu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub mask: Mask,
    pub histogram: DensityHistogram,
    pub encoding: OutputEncoding,
    pub window: HuWindow,
}

impl SynthesisRequest {
    pub fn normalized(mask: Mask, histogram: DensityHistogram) -> Self {
        Self { mask, histogram, encoding: OutputEncoding::Normalized, window: HuWindow::LIVER }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput {
    pub patch: Grid,
    pub mask: Mask,
}

/// A loaded generator snapshot. Eval-mode inference only reads it, so one
/// instance can serve concurrent requests.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    generator: Generator<f32>,
    manifest: Option<CheckpointManifest>,
    digest: String,
}

impl Synthesizer {
    pub fn load(dir: &Path) -> Result<Self> {
        let (generator, manifest) = load_generator(dir)?;
        let digest = checkpoint_digest(dir)?;
        Ok(Self { generator, manifest: Some(manifest), digest })
    }

    /// Wraps an in-memory generator; `digest` identifies it in manifests.
    pub fn from_generator(generator: Generator<f32>, digest: impl Into<String>) -> Self {
        Self { generator, manifest: None, digest: digest.into() }
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn manifest(&self) -> Option<&CheckpointManifest> {
        self.manifest.as_ref()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn patch_size(&self) -> usize {
        self.generator.config().patch_size
    }

    pub fn hist_bins(&self) -> usize {
        self.generator.config().hist_bins
    }

    pub fn conditioning(&self) -> Conditioning {
        self.generator.config().conditioning
    }

    /// Eval-mode patch in [0, 1].
    pub fn synthesize_normalized(&self, mask: &Mask, histogram: &DensityHistogram) -> Result<Grid> {
        let p = self.patch_size();
        if mask.shape() != (p, p) {
            return Err(Error::invalid(format!("mask is {:?}, generator expects {p}x{p}", mask.shape())));
        }
        if histogram.len() != self.hist_bins() {
            return Err(Error::invalid(format!(
                "histogram has {} bins, generator expects {}",
                histogram.len(),
                self.hist_bins()
            )));
        }
        let input = GeneratorInput { mask: mask.clone(), histogram: histogram.clone() };
        let out = self.generator.generate(&input, Mode::Eval, 0)?;
        Ok(out.map(|v| (0.5 * (v + 1.0)).clamp(0.0, 1.0)))
    }

    pub fn synthesize(&self, request: &SynthesisRequest) -> Result<SynthesisOutput> {
        let patch = self.synthesize_normalized(&request.mask, &request.histogram)?;
        let patch = match request.encoding {
            OutputEncoding::Normalized => patch,
            OutputEncoding::WindowedHu => {
                request.window.validate()?;
                patch.map(|v| request.window.denormalize(v as f64) as f32)
            }
        };
        Ok(SynthesisOutput { patch, mask: request.mask.clone() })
    }
}

/// Value of the separator lines between grid tiles.
pub const GRID_SEPARATOR: f32 = 1.0;

/// Tiles normalized syntheses with rows = histograms and columns = masks,
/// separated by one-pixel lines.
pub fn render_grid(synth: &Synthesizer, masks: &[Mask], histograms: &[DensityHistogram]) -> Result<Grid> {
    if masks.is_empty() || histograms.is_empty() {
        return Err(Error::invalid("grid needs at least one mask and one histogram"));
    }
    let p = synth.patch_size();
    let (rows, cols) = (histograms.len(), masks.len());
    let mut grid = Grid::filled(rows * p + rows - 1, cols * p + cols - 1, GRID_SEPARATOR);
    for (i, h) in histograms.iter().enumerate() {
        for (j, m) in masks.iter().enumerate() {
            let tile = synth.synthesize_normalized(m, h)?;
            for r in 0..p {
                for c in 0..p {
                    grid.set(i * (p + 1) + r, j * (p + 1) + c, tile.get(r, c));
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistogramPreset {
    Unimodal { mean_bin: f64, width_bins: f64 },
    Bimodal { mean_bins: (f64, f64), width_bins: f64, weights: (f64, f64) },
    Delta { bin: usize },
}

pub fn make_preset(preset: &HistogramPreset) -> Result<DensityHistogram> {
    match *preset {
        HistogramPreset::Unimodal { mean_bin, width_bins } => {
            gaussian_mixture(HIST_BINS, &[MixtureComponent { mean_bin, width_bins, weight: 1.0 }])
        }
        HistogramPreset::Bimodal { mean_bins, width_bins, weights } => gaussian_mixture(
            HIST_BINS,
            &[
                MixtureComponent { mean_bin: mean_bins.0, width_bins, weight: weights.0 },
                MixtureComponent { mean_bin: mean_bins.1, width_bins, weight: weights.1 },
            ],
        ),
        HistogramPreset::Delta { bin } => DensityHistogram::delta(HIST_BINS, bin),
    }
}

/// Summary of a stored checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub step: u64,
    pub digest: String,
    pub patch_size: usize,
    pub conditioning: Conditioning,
    pub base_channels: usize,
}

/// A directory whose subdirectories are checkpoints, addressed by name.
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, id: &str) -> Result<PathBuf> {
        let dir = self.root.join(id);
        if !valid_id(id) || !dir.join(MANIFEST).is_file() {
            return Err(Error::NotFound(format!("checkpoint {id:?}")));
        }
        Ok(dir)
    }

    pub fn open(&self, id: &str) -> Result<Synthesizer> {
        Synthesizer::load(&self.path_of(id)?)
    }

    /// Every readable checkpoint, sorted by id.
    pub fn list(&self) -> Result<Vec<CheckpointInfo>> {
        let mut out = Vec::new();
        if !self.root.is_dir() {
            return Ok(out);
        }
        let mut ids: Vec<String> = fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().map(str::to_owned))
            .filter(|id| valid_id(id) && self.root.join(id).join(MANIFEST).is_file())
            .collect();
        ids.sort();
        for id in ids {
            let dir = self.root.join(&id);
            let Ok(manifest) = CheckpointManifest::read(&dir) else { continue };
            out.push(CheckpointInfo {
                step: manifest.step,
                digest: checkpoint_digest(&dir)?,
                patch_size: manifest.generator.patch_size,
                conditioning: manifest.generator.conditioning,
                base_channels: manifest.generator.base_channels,
                id,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DiscriminatorConfig, GeneratorConfig};
    use crate::train::{save_checkpoint, TrainState};

    fn tiny_synth() -> Synthesizer {
        let cfg = GeneratorConfig { hist_bins: HIST_BINS, ..GeneratorConfig::tiny() };
        Synthesizer::from_generator(Generator::init(cfg, 3).unwrap(), "test")
    }

    fn disk(p: usize, r: f64) -> Mask {
        let c = (p as f64 - 1.0) / 2.0;
        Mask::from_fn(p, p, |y, x| (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= r * r)
    }

    #[test]
    fn presets() {
        let d = make_preset(&HistogramPreset::Delta { bin: 50 }).unwrap();
        assert_eq!(d.bins()[50], 1.0);
        let b = make_preset(&HistogramPreset::Bimodal { mean_bins: (20.0, 80.0), width_bins: 0.0, weights: (1.0, 1.0) }).unwrap();
        assert_eq!((b.bins()[20], b.bins()[80]), (0.5, 0.5));
        let u = make_preset(&HistogramPreset::Unimodal { mean_bin: 50.0, width_bins: 5.0 }).unwrap();
        assert!((u.bins().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(make_preset(&HistogramPreset::Unimodal { mean_bin: 120.0, width_bins: 5.0 }).is_err());
        assert!(make_preset(&HistogramPreset::Delta { bin: 100 }).is_err());
        assert!(make_preset(&HistogramPreset::Bimodal { mean_bins: (20.0, 80.0), width_bins: 1.0, weights: (1.0, 0.0) }).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_and_encodes() {
        let s = tiny_synth();
        let req = SynthesisRequest::normalized(disk(8, 2.5), make_preset(&HistogramPreset::Delta { bin: 30 }).unwrap());
        let a = s.synthesize(&req).unwrap();
        assert_eq!(a, s.synthesize(&req).unwrap());
        assert!(a.patch.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let hu = s.synthesize(&SynthesisRequest { encoding: OutputEncoding::WindowedHu, ..req.clone() }).unwrap();
        for (n, h) in a.patch.data().iter().zip(hu.patch.data()) {
            assert!((HuWindow::LIVER.denormalize(*n as f64) - *h as f64).abs() < 1e-3);
        }
        // An empty mask is not synthesis's concern.
        assert!(s.synthesize(&SynthesisRequest { mask: Mask::empty(8, 8), ..req.clone() }).is_ok());
        assert!(s.synthesize(&SynthesisRequest { mask: Mask::empty(9, 8), ..req }).is_err());
    }

    #[test]
    fn grid_layout() {
        let s = tiny_synth();
        let masks = [disk(8, 1.5), disk(8, 2.5), disk(8, 3.5)];
        let hists: Vec<_> = [10, 40, 60, 90].iter().map(|&b| DensityHistogram::delta(HIST_BINS, b).unwrap()).collect();
        let g = render_grid(&s, &masks, &hists).unwrap();
        assert_eq!(g.shape(), (4 * 8 + 3, 3 * 8 + 2));
        let tile = s.synthesize_normalized(&masks[1], &hists[2]).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(g.get(2 * 9 + r, 9 + c), tile.get(r, c));
            }
        }
        assert_eq!(g.get(8, 0), GRID_SEPARATOR);
        let single = render_grid(&s, &masks[..1], &hists[..1]).unwrap();
        assert_eq!(single, s.synthesize_normalized(&masks[0], &hists[0]).unwrap());
        assert!(render_grid(&s, &[], &hists).is_err());
    }

    #[test]
    fn store_lists_and_opens() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig { hist_bins: HIST_BINS, ..GeneratorConfig::tiny() };
        let state = TrainState::new(cfg, DiscriminatorConfig::tiny(), 1).unwrap();
        save_checkpoint(&dir.path().join("run-a"), &state, None).unwrap();
        fs::create_dir_all(dir.path().join("not-a-checkpoint")).unwrap();
        let store = CheckpointStore::new(dir.path());
        let list = store.list().unwrap();
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].id, "run-a");
        assert_eq!(list[0].digest, store.open("run-a").unwrap().digest());
        assert!(matches!(store.open("missing"), Err(Error::NotFound(_))));
        assert!(matches!(store.open("../run-a"), Err(Error::NotFound(_))));
    }
}
