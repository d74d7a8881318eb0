//! Central finite-difference checks of the hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::layers::Dense;
use crate::nn::params::{Initializer, ParamId};
use crate::nn::{Conditions, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Grads, ParamKind, ParamStore};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so tensors with vanishing gradients are judged on
/// absolute error.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditModel {
    /// A single dense layer; finite differences are exact up to rounding.
    Linear,
    Generator,
    Discriminator,
    /// Gradient of the discriminator output with respect to its image
    /// input, which carries the adversarial signal into the generator.
    DiscriminatorInput,
}

#[derive(Clone, Debug)]
pub struct GradientAudit {
    /// (tensor name, relative error) for every trainable tensor.
    pub tensors: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

trait Case {
    fn store(&mut self) -> &mut ParamStore<f64>;
    fn loss(&self) -> f64;
    fn analytic(&self) -> Grads<f64>;
}

fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// Moves every trainable tensor to a generic random point. At
/// initialization many pre-activations sit within a step of a leaky-ReLU
/// kink (zero biases, tiny inputs), which would make central differences
/// straddle the kink.
pub(crate) fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        let (centre, spread) = match p.kind {
            ParamKind::Weight | ParamKind::Bias | ParamKind::NormShift => (0.0, 0.5),
            ParamKind::NormScale => (1.0, 0.2),
            ParamKind::Buffer => continue,
        };
        for v in p.value.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = centre + spread * z;
        }
    }
}

fn weighted_sum(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn conditions(n: usize, p: usize, bins: usize, rng: &mut impl Rng) -> Conditions<f64> {
    let masks = (0..n * p * p).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mut hists = Vec::with_capacity(n * bins);
    for _ in 0..n {
        let w: Vec<f64> = (0..bins).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        hists.extend(w.iter().map(|v| v / s));
    }
    Conditions {
        masks: Tensor::from_vec(&[n, 1, p, p], masks).expect("shape"),
        histograms: Tensor::from_vec(&[n, bins], hists).expect("shape"),
    }
}

struct LinearCase {
    layer: Dense,
    store: ParamStore<f64>,
    x: Tensor<f64>,
    w: Tensor<f64>,
}

impl Case for LinearCase {
    fn store(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
    fn loss(&self) -> f64 {
        weighted_sum(&self.layer.forward(&self.store, &self.x), &self.w)
    }
    fn analytic(&self) -> Grads<f64> {
        let mut g = self.store.zero_grads();
        self.layer.backward(&self.store, &mut g, &self.x, &self.w, false);
        g
    }
}

struct GeneratorCase {
    gen: Generator<f64>,
    cond: Conditions<f64>,
    w: Tensor<f64>,
    dropout: u64,
}

impl Case for GeneratorCase {
    fn store(&mut self) -> &mut ParamStore<f64> {
        &mut self.gen.params
    }
    fn loss(&self) -> f64 {
        let (out, _) = self.gen.forward_train(&self.cond, self.dropout).expect("valid input");
        weighted_sum(&out, &self.w)
    }
    fn analytic(&self) -> Grads<f64> {
        let (_, tape) = self.gen.forward_train(&self.cond, self.dropout).expect("valid input");
        let mut g = self.gen.params.zero_grads();
        self.gen.backward(&tape, &self.w, &mut g);
        g
    }
}

struct DiscriminatorCase {
    disc: Discriminator<f64>,
    masks: Tensor<f64>,
    images: Tensor<f64>,
    hists: Tensor<f64>,
    w: Tensor<f64>,
}

impl Case for DiscriminatorCase {
    fn store(&mut self) -> &mut ParamStore<f64> {
        &mut self.disc.params
    }
    fn loss(&self) -> f64 {
        let (out, _) = self.disc.forward_train(&self.masks, &self.images, Some(&self.hists)).expect("valid input");
        weighted_sum(&out, &self.w)
    }
    fn analytic(&self) -> Grads<f64> {
        let (_, tape) = self.disc.forward_train(&self.masks, &self.images, Some(&self.hists)).expect("valid input");
        let mut g = self.disc.params.zero_grads();
        self.disc.backward(&tape, &self.w, &mut g);
        g
    }
}

/// The image input of the discriminator, held as a one-tensor store.
struct DiscriminatorInputCase {
    disc: Discriminator<f64>,
    masks: Tensor<f64>,
    image: ParamStore<f64>,
    w: Tensor<f64>,
}

impl DiscriminatorInputCase {
    fn image(&self) -> &Tensor<f64> {
        &self.image.iter().next().expect("one tensor").value
    }
}

impl Case for DiscriminatorInputCase {
    fn store(&mut self) -> &mut ParamStore<f64> {
        &mut self.image
    }
    fn loss(&self) -> f64 {
        let (out, _) = self.disc.forward_train(&self.masks, self.image(), None).expect("valid input");
        weighted_sum(&out, &self.w)
    }
    fn analytic(&self) -> Grads<f64> {
        let (_, tape) = self.disc.forward_train(&self.masks, self.image(), None).expect("valid input");
        let mut scratch = self.disc.params.zero_grads();
        let d_image = self.disc.backward(&tape, &self.w, &mut scratch);
        let mut g = self.image.zero_grads();
        *g.get_mut(ParamId(0)) = d_image;
        g
    }
}

fn compare(case: &mut dyn Case) -> GradientAudit {
    let analytic = case.analytic();
    let names: Vec<(String, bool)> = case.store().iter().map(|p| (p.name.clone(), p.kind.trainable())).collect();
    let mut tensors = Vec::new();
    for (i, (name, trainable)) in names.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let a = analytic.tensors()[i].data().to_vec();
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let original = case.store().iter().nth(i).expect("index").value.data()[j];
            let set = |case: &mut dyn Case, v: f64| {
                case.store().iter_mut().nth(i).expect("index").value.data_mut()[j] = v;
            };
            set(case, original + FD_STEP);
            let hi = case.loss();
            set(case, original - FD_STEP);
            let lo = case.loss();
            set(case, original);
            numeric.push((hi - lo) / (2.0 * FD_STEP));
        }
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = numeric.iter().chain(&a).map(|v| v.abs()).fold(SCALE_FLOOR, f64::max);
        tensors.push((name, diff / scale));
    }
    let max_relative_error = tensors.iter().map(|t| t.1).fold(0.0, f64::max);
    GradientAudit { tensors, max_relative_error }
}

/// Audits the given generator config (or the discriminator of matching
/// patch size) against central differences in 64-bit arithmetic.
pub fn audit_with(model: AuditModel, gen_config: &GeneratorConfig, disc_config: &DiscriminatorConfig, seed: u64) -> Result<GradientAudit> {
    let mut rng = stream(seed, "gradient-audit", 0);
    let batch = 2;
    let p = gen_config.patch_size;
    let audit = match model {
        AuditModel::Linear => {
            let mut init = Initializer::<f64>::new(seed);
            let layer = Dense::new(&mut init, "linear", 7, 5);
            randomize(&mut init.store, &mut rng);
            let x = normal_tensor(&[3, 7], &mut rng);
            let w = normal_tensor(&[3, 5], &mut rng);
            compare(&mut LinearCase { layer, store: init.store, x, w })
        }
        AuditModel::Generator => {
            let mut gen = Generator::<f64>::init(gen_config.clone(), seed)?;
            randomize(&mut gen.params, &mut rng);
            let cond = conditions(batch, p, gen_config.hist_bins, &mut rng);
            let w = normal_tensor(&[batch, 1, p, p], &mut rng);
            compare(&mut GeneratorCase { gen, cond, w, dropout: seed })
        }
        AuditModel::Discriminator => {
            let mut disc = Discriminator::<f64>::init(disc_config.clone(), seed)?;
            randomize(&mut disc.params, &mut rng);
            let cond = conditions(batch, disc_config.patch_size, gen_config.hist_bins, &mut rng);
            let images = normal_tensor(cond.masks.shape(), &mut rng).map(f64::tanh);
            let s = disc_config.output_size();
            let w = normal_tensor(&[batch, 1, s, s], &mut rng);
            compare(&mut DiscriminatorCase { disc, masks: cond.masks, images, hists: cond.histograms, w })
        }
        AuditModel::DiscriminatorInput => {
            let mut disc = Discriminator::<f64>::init(disc_config.clone(), seed)?;
            randomize(&mut disc.params, &mut rng);
            let cond = conditions(batch, disc_config.patch_size, gen_config.hist_bins, &mut rng);
            let mut image = ParamStore::default();
            image.add("image", ParamKind::Weight, normal_tensor(cond.masks.shape(), &mut rng).map(f64::tanh));
            let s = disc_config.output_size();
            let w = normal_tensor(&[batch, 1, s, s], &mut rng);
            compare(&mut DiscriminatorInputCase { disc, masks: cond.masks, image, w })
        }
    };
    Ok(audit)
}

/// Audit at the tiny configurations.
pub fn finite_difference_audit(model: AuditModel, seed: u64) -> Result<GradientAudit> {
    audit_with(model, &GeneratorConfig::tiny(), &DiscriminatorConfig::tiny(), seed)
}
