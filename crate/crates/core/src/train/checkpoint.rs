//! Checkpoint directories: a TOML `manifest` plus one LSF1 file per tensor
//! under `gen/`, `disc/` and `opt/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, TrainState};
use crate::dataset;
use crate::error::{Error, Result};
use crate::lsf;
use crate::nn::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest";
const NAMESPACES: [&str; 3] = ["gen", "disc", "opt"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub seed: u64,
    pub step: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint manifest {}", path.display())),
            _ => Error::Io(e),
        })?;
        let manifest: Self = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        Ok(manifest)
    }
}

fn save_moments(dir: &Path, store: &ParamStore<f32>, opt: &Adam<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ((p, m), v) in store.iter().zip(&opt.m).zip(&opt.v) {
        lsf::write_tensor(&dir.join(format!("{}.m.lsf", p.name)), m)?;
        lsf::write_tensor(&dir.join(format!("{}.v.lsf", p.name)), v)?;
    }
    Ok(())
}

fn load_moments(dir: &Path, store: &ParamStore<f32>, steps: u64) -> Result<Adam<f32>> {
    let mut opt = Adam::new(store);
    opt.steps = steps;
    for (i, p) in store.iter().enumerate() {
        for (suffix, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let path = dir.join(format!("{}.{suffix}.lsf", p.name));
            let t: Tensor<f32> = lsf::read_tensor(&path)?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(&path, format!("moment shape {:?} != {:?}", t.shape(), p.value.shape())));
            }
            *slot = t;
        }
    }
    Ok(opt)
}

/// Writes `state` into `dir`, replacing any checkpoint files already there.
pub fn save_checkpoint(dir: &Path, state: &TrainState, train: Option<&TrainConfig>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ns in NAMESPACES {
        let sub = dir.join(ns);
        if sub.exists() {
            fs::remove_dir_all(&sub)?;
        }
    }
    state.generator.params.save(&dir.join("gen"))?;
    state.discriminator.params.save(&dir.join("disc"))?;
    save_moments(&dir.join("opt").join("gen"), &state.generator.params, &state.gen_opt)?;
    save_moments(&dir.join("opt").join("disc"), &state.discriminator.params, &state.disc_opt)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        seed: state.seed,
        step: state.step,
        generator: state.generator.config().clone(),
        discriminator: state.discriminator.config().clone(),
        train: train.cloned(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Configuration(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// Restores the full training state, validating every tensor shape.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointManifest)> {
    let manifest = CheckpointManifest::read(dir)?;
    let generator = load_generator_with(dir, &manifest)?;
    let mut discriminator = Discriminator::<f32>::init(manifest.discriminator.clone(), 0)?;
    discriminator.params.load_into(&dir.join("disc"))?;
    let gen_opt = load_moments(&dir.join("opt").join("gen"), &generator.params, manifest.step)?;
    let disc_opt = load_moments(&dir.join("opt").join("disc"), &discriminator.params, manifest.step)?;
    let state = TrainState { generator, discriminator, gen_opt, disc_opt, step: manifest.step, seed: manifest.seed };
    Ok((state, manifest))
}

fn load_generator_with(dir: &Path, manifest: &CheckpointManifest) -> Result<Generator<f32>> {
    let mut generator = Generator::<f32>::init(manifest.generator.clone(), 0)?;
    generator.params.load_into(&dir.join("gen"))?;
    Ok(generator)
}

/// Loads only the generator of a checkpoint.
pub fn load_generator(dir: &Path) -> Result<(Generator<f32>, CheckpointManifest)> {
    let manifest = CheckpointManifest::read(dir)?;
    Ok((load_generator_with(dir, &manifest)?, manifest))
}

/// SHA-256 over the manifest and tensor files (relative path, length and
/// contents, in sorted path order). Logs and snapshots are not covered.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    if !dir.join(MANIFEST).is_file() {
        return Err(Error::NotFound(format!("checkpoint manifest in {}", dir.display())));
    }
    let mut files = vec![PathBuf::from(MANIFEST)];
    for ns in NAMESPACES {
        let sub = dir.join(ns);
        if sub.is_dir() {
            dataset::list_files(dir, &sub, &mut files)?;
        }
    }
    dataset::digest_files(dir, files)
}
