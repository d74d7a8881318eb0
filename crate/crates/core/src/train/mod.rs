//! Adversarial training of the generator against the patch discriminator.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{checkpoint_digest, load_checkpoint, load_generator, save_checkpoint, CheckpointManifest};
pub use gradcheck::{finite_difference_audit, AuditModel, GradientAudit};
pub use loss::{bce_logits, d_loss, g_loss, l1_loss, GeneratorLoss};

use crate::error::{Error, Result};
use crate::imaging::{compute_histogram, LesionSample};
use crate::nn::{Conditions, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub gan_weight: f64,
    pub l1_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between snapshots; 0 disables them.
    pub checkpoint_every: u64,
    /// Stops early after this many steps in total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 0.0002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            gan_weight: 1.0,
            l1_weight: 100.0,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.gan_weight >= 0.0 && self.gan_weight.is_finite()) {
            return bad("gan weight must be non-negative");
        }
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite()) {
            return bad("l1 weight must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: 1e-8 }
    }
}

/// Conditions plus the real patches they describe, mapped to [-1, 1].
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub conditions: Conditions<f32>,
    pub targets: Tensor<f32>,
}

impl TrainingBatch {
    pub fn new(conditions: Conditions<f32>, targets: Tensor<f32>) -> Result<Self> {
        let n = conditions.len();
        let mask_shape = conditions.masks.shape();
        if n == 0 || targets.shape() != mask_shape || conditions.histograms.shape()[0] != n {
            return Err(Error::invalid(format!(
                "batch parts disagree: masks {:?}, histograms {:?}, targets {:?}",
                mask_shape,
                conditions.histograms.shape(),
                targets.shape()
            )));
        }
        Ok(Self { conditions, targets })
    }

    /// Builds a batch with `bins`-bin histograms measured from each sample.
    pub fn from_samples(samples: &[&LesionSample], bins: usize) -> Result<Self> {
        let hists = samples
            .iter()
            .map(|s| compute_histogram(&s.patch, &s.mask, bins))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = samples.iter().zip(&hists).map(|(s, h)| (&s.mask, h)).collect();
        let conditions = Conditions::from_pairs(&pairs)?;
        let mut targets = Vec::with_capacity(conditions.masks.len());
        for s in samples {
            targets.extend(s.patch.data().iter().map(|&v| 2.0 * v - 1.0));
        }
        let targets = Tensor::from_vec(conditions.masks.shape(), targets)?;
        Self::new(conditions, targets)
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<f32>| {
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            let data = indices.iter().flat_map(|&i| t.batch_item(i).iter().copied()).collect();
            Tensor::from_vec(&shape, data)
        };
        Ok(Self {
            conditions: Conditions { masks: pick(&self.conditions.masks)?, histograms: pick(&self.conditions.histograms)? },
            targets: pick(&self.targets)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the completed step.
    pub step: u64,
    pub d_loss: f64,
    pub g_gan: f64,
    pub g_l1: f64,
    pub g_total: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!("{}, {}, {}, {}", self.step, self.d_loss, self.g_gan, self.g_l1)
    }

    pub fn parse_log_line(line: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed metric record: {line:?}"));
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: parts[0].parse().map_err(|_| bad())?,
            d_loss: f(parts[1])?,
            g_gan: f(parts[2])?,
            g_l1: f(parts[3])?,
            g_total: f64::NAN,
        })
    }
}

/// Everything that evolves during training. Random streams are derived
/// from `seed` and `step`, so this is the whole resumable state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub gen_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(gen_config: GeneratorConfig, disc_config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if gen_config.patch_size != disc_config.patch_size {
            return Err(Error::Configuration(format!(
                "generator patch {} differs from discriminator patch {}",
                gen_config.patch_size, disc_config.patch_size
            )));
        }
        let generator = Generator::init(gen_config, derive_seed(seed, "generator", 0))?;
        let discriminator = Discriminator::init(disc_config, derive_seed(seed, "discriminator", 0))?;
        let gen_opt = Adam::new(&generator.params);
        let disc_opt = Adam::new(&discriminator.params);
        Ok(Self { generator, discriminator, gen_opt, disc_opt, step: 0, seed })
    }

    /// One discriminator update on the real batch and freshly generated
    /// (detached) fakes, then one generator update through the updated
    /// discriminator.
    pub fn train_step(&mut self, batch: &TrainingBatch, config: &TrainConfig) -> Result<StepMetrics> {
        let step = self.step + 1;
        let diverged = |what| Error::Divergence { step, what };
        let adam = config.adam();
        let cond = &batch.conditions;
        let hists = self.discriminator.config().condition_on_histogram.then_some(&cond.histograms);

        let (fake, g_tape) = self.generator.forward_train(cond, derive_seed(self.seed, "dropout", step))?;

        let (real_logits, real_tape) = self.discriminator.forward_train(&cond.masks, &batch.targets, hists)?;
        let (fake_logits, fake_tape) = self.discriminator.forward_train(&cond.masks, &fake, hists)?;
        let d = d_loss(&real_logits, &fake_logits);
        if !d.is_finite() {
            return Err(diverged("discriminator loss"));
        }
        let mut d_grads = self.discriminator.params.zero_grads();
        self.discriminator.backward(&real_tape, &loss::bce_logits_grad(&real_logits, true, 1.0), &mut d_grads);
        self.discriminator.backward(&fake_tape, &loss::bce_logits_grad(&fake_logits, false, 1.0), &mut d_grads);
        if !d_grads.all_finite() {
            return Err(diverged("discriminator gradients"));
        }
        self.disc_opt.step(&mut self.discriminator.params, &d_grads, &adam);
        self.discriminator.update_running_stats(&real_tape);
        self.discriminator.update_running_stats(&fake_tape);

        let (adv_logits, adv_tape) = self.discriminator.forward_train(&cond.masks, &fake, hists)?;
        let g = g_loss(&adv_logits, &fake, &batch.targets, config.gan_weight, config.l1_weight);
        if !g.total.is_finite() {
            return Err(diverged("generator loss"));
        }
        // Discriminator gradients from this pass are discarded.
        let mut scratch = self.discriminator.params.zero_grads();
        let mut d_fake = self.discriminator.backward(
            &adv_tape,
            &loss::bce_logits_grad(&adv_logits, true, config.gan_weight),
            &mut scratch,
        );
        d_fake.add_assign(&loss::l1_loss_grad(&fake, &batch.targets, config.l1_weight));
        let mut g_grads = self.generator.params.zero_grads();
        self.generator.backward(&g_tape, &d_fake, &mut g_grads);
        if !g_grads.all_finite() {
            return Err(diverged("generator gradients"));
        }
        self.gen_opt.step(&mut self.generator.params, &g_grads, &adam);
        self.generator.update_running_stats(&g_tape);

        self.step = step;
        Ok(StepMetrics { step, d_loss: d, g_gan: g.gan, g_l1: g.l1, g_total: g.total })
    }
}

/// Example order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "shuffle", epoch));
    order
}

/// Number of optimizer steps a full run takes.
pub fn total_steps(n_samples: usize, config: &TrainConfig) -> u64 {
    let per_epoch = n_samples.div_ceil(config.batch_size.max(1)) as u64;
    let full = per_epoch * config.epochs as u64;
    config.max_steps.map_or(full, |m| m.min(full))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Metrics of the steps run by this call.
    pub metrics: Vec<StepMetrics>,
    pub snapshots: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.log";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Trains from scratch. With `out_dir`, writes the metric log, periodic
/// snapshots and the final checkpoint there.
pub fn train(
    dataset: &TrainingBatch,
    gen_config: &GeneratorConfig,
    disc_config: &DiscriminatorConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let state = TrainState::new(gen_config.clone(), disc_config.clone(), config.seed)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), "")?;
    }
    run(state, dataset, config, out_dir, &mut |_| {})
}

/// Continues from a restored state. Metric records past the state's step
/// are dropped from an existing log before new ones are appended.
pub fn resume(
    state: TrainState,
    dataset: &TrainingBatch,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(METRICS_FILE);
        let kept: String = match fs::read_to_string(&path) {
            Ok(text) => text
                .lines()
                .filter(|l| StepMetrics::parse_log_line(l).is_ok_and(|m| m.step <= state.step))
                .map(|l| format!("{l}\n"))
                .collect(),
            Err(_) => String::new(),
        };
        fs::write(&path, kept)?;
    }
    run(state, dataset, config, out_dir, &mut |_| {})
}

/// The shared epoch loop; `observe` sees every completed step.
pub fn run(
    mut state: TrainState,
    dataset: &TrainingBatch,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    observe: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    let n = dataset.len();
    let per_epoch = n.div_ceil(config.batch_size) as u64;
    let total = total_steps(n, config);
    let mut log = match out_dir {
        Some(dir) => Some(OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?),
        None => None,
    };
    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    while state.step < total {
        let epoch = state.step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(config.seed, epoch, n);
            order_epoch = epoch;
        }
        let slot = (state.step % per_epoch) as usize * config.batch_size;
        let batch = dataset.select(&order[slot..(slot + config.batch_size).min(n)])?;
        let m = state.train_step(&batch, config)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", m.log_line())?;
        }
        observe(&m);
        metrics.push(m);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) && state.step < total {
                let snap = dir.join(SNAPSHOT_DIR).join(format!("step_{:08}", state.step));
                save_checkpoint(&snap, &state, Some(config))?;
                snapshots.push(snap);
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(dir, &state, Some(config))?;
    }
    Ok(TrainOutcome { state, metrics, snapshots })
}

/// Eval-mode reconstructions of a batch, mapped back to [0, 1].
pub fn reconstruct(generator: &Generator<f32>, conditions: &Conditions<f32>) -> Result<Tensor<f32>> {
    let out = generator.forward(conditions, Mode::Eval, 0)?;
    Ok(out.map(|v| 0.5 * (v + 1.0)))
}
