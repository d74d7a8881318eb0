//! U-Net generator with a density-histogram branch.
//!
//! The mask runs through a U-Net (4×4 stride-2 encoder convolutions,
//! nearest-neighbour upsampling + 3×3 decoder convolutions, skip
//! concatenation). The last decoder feature map is flattened into a dense
//! bridge layer, concatenated with a dense embedding of the histogram and
//! projected by a patch_size² dense layer into an extra image channel that
//! feeds the final 3×3 output convolution.

use serde::{Deserialize, Serialize};

use super::layers::{
    concat, dropout_mask, leaky_relu, leaky_relu_backward, mul, split, tanh, tanh_backward, upsample2x,
    upsample2x_backward, BatchNorm, BnCache, Conv2d, Dense,
};
use super::params::{Grads, Initializer, ParamSink, ParamStore};
use crate::error::{Error, Result};
use crate::imaging::{DensityHistogram, Grid, Mask, HIST_BINS};
use crate::tensor::{Real, Tensor};

/// How the final decoder features reach the dense bridge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    /// A 1×1 convolution reduces the features to one channel first.
    Compressed,
    /// Every feature of every channel is flattened into the bridge.
    Literal,
}

/// Which conditioning signals the generator consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    MaskAndDensity,
    /// Baseline: the histogram input is a constant uniform histogram, so
    /// the histogram branch reduces to a learned bias.
    MaskOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub base_channels: usize,
    /// Output channels of each encoder block, `depth` entries.
    pub channel_schedule: Vec<usize>,
    pub hist_bins: usize,
    pub hist_dense_units: usize,
    pub bridge_mode: BridgeMode,
    pub bridge_units: usize,
    pub dropout_rate: f64,
    /// Number of leading decoder blocks with dropout in training mode.
    pub dropout_blocks: usize,
    pub leaky_slope: f64,
    pub conditioning: Conditioning,
}

/// Doubling channel schedule starting at `base`, capped at `8 * base`.
pub fn default_schedule(base: usize, depth: usize) -> Vec<usize> {
    (0..depth).map(|i| (base << i.min(3)).min(8 * base)).collect()
}

impl GeneratorConfig {
    /// Full-width configuration for a power-of-two patch.
    pub fn for_patch(patch_size: usize) -> Self {
        let depth = patch_size.max(1).trailing_zeros() as usize;
        Self {
            patch_size,
            depth,
            base_channels: 64,
            channel_schedule: default_schedule(64, depth),
            hist_bins: HIST_BINS,
            hist_dense_units: 100,
            bridge_mode: BridgeMode::Compressed,
            bridge_units: 256,
            dropout_rate: 0.5,
            dropout_blocks: 3,
            leaky_slope: 0.2,
            conditioning: Conditioning::MaskAndDensity,
        }
    }

    /// 128×128 patches with the bridge flattening every decoder feature.
    pub fn literal_full() -> Self {
        Self { bridge_mode: BridgeMode::Literal, ..Self::for_patch(128) }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self.channel_schedule = default_schedule(base, self.depth);
        self
    }

    /// Patch 8, depth 2, 8 histogram bins: small enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            patch_size: 8,
            depth: 2,
            base_channels: 3,
            channel_schedule: vec![3, 4],
            hist_bins: 8,
            hist_dense_units: 8,
            bridge_mode: BridgeMode::Compressed,
            bridge_units: 6,
            dropout_rate: 0.5,
            dropout_blocks: 3,
            leaky_slope: 0.2,
            conditioning: Conditioning::MaskAndDensity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(1 << self.depth) {
            return bad(format!("patch size {} is not divisible by 2^{}", self.patch_size, self.depth));
        }
        if self.channel_schedule.len() != self.depth {
            return bad(format!(
                "channel schedule has {} entries for depth {}",
                self.channel_schedule.len(),
                self.depth
            ));
        }
        if self.channel_schedule.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.hist_bins == 0 || self.hist_dense_units == 0 || self.bridge_units == 0 {
            return bad("histogram and bridge widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    fn decoder_channels(&self) -> Vec<usize> {
        let d = self.depth;
        (0..d).map(|j| if j + 1 < d { self.channel_schedule[d - j - 2] } else { self.channel_schedule[0] }).collect()
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    conv: Conv2d,
    bn: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    conv: Conv2d,
    bn: BatchNorm,
    dropout: bool,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    reduce: Option<Conv2d>,
    bridge: Dense,
    hist: Dense,
    fusion: Dense,
    output: Conv2d,
}

impl Layout {
    fn build(config: &GeneratorConfig, sink: &mut dyn ParamSink) -> Self {
        let schedule = &config.channel_schedule;
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = 1;
        for (i, &c) in schedule.iter().enumerate() {
            let name = format!("enc{}", i + 1);
            let conv = Conv2d::new(sink, &name, cin, c, 4, 2, 1, i == 0);
            let bn = (i > 0).then(|| BatchNorm::new(sink, &name, c));
            encoder.push(EncoderBlock { conv, bn });
            cin = c;
        }
        let dec_channels = config.decoder_channels();
        let mut decoder = Vec::with_capacity(config.depth);
        for (j, &c) in dec_channels.iter().enumerate() {
            let name = format!("dec{}", j + 1);
            let conv = Conv2d::new(sink, &name, cin, c, 3, 1, 1, false);
            let bn = BatchNorm::new(sink, &name, c);
            decoder.push(DecoderBlock { conv, bn, dropout: j < config.dropout_blocks });
            cin = if j + 1 < config.depth { c + schedule[config.depth - j - 2] } else { c };
        }
        let features = schedule[0];
        let pixels = config.patch_size * config.patch_size;
        let (reduce, flat) = match config.bridge_mode {
            BridgeMode::Compressed => (Some(Conv2d::new(sink, "reduce", features, 1, 1, 1, 0, true)), pixels),
            BridgeMode::Literal => (None, features * pixels),
        };
        let bridge = Dense::new(sink, "bridge", flat, config.bridge_units);
        let hist = Dense::new(sink, "hist", config.hist_bins, config.hist_dense_units);
        let fusion = Dense::new(sink, "fusion", config.bridge_units + config.hist_dense_units, pixels);
        let output = Conv2d::new(sink, "output", features + 1, 1, 3, 1, 1, true);
        Self { encoder, decoder, reduce, bridge, hist, fusion, output }
    }
}

/// Generator weights together with their architecture.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    layout: Layout,
    pub params: ParamStore<T>,
}

/// A batch of generator conditions: masks (N,1,P,P) and histograms (N,bins).
#[derive(Clone, Debug)]
pub struct Conditions<T> {
    pub masks: Tensor<T>,
    pub histograms: Tensor<T>,
}

impl<T: Real> Conditions<T> {
    pub fn from_pairs(pairs: &[(&Mask, &DensityHistogram)]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::invalid("empty condition batch"))?;
        let (p, bins) = (first.0.rows(), first.1.len());
        let mut masks = Vec::with_capacity(pairs.len() * p * p);
        let mut hists = Vec::with_capacity(pairs.len() * bins);
        for (m, h) in pairs {
            if m.shape() != (p, p) || h.len() != bins {
                return Err(Error::invalid("condition batch has mixed shapes"));
            }
            masks.extend(m.data().iter().map(|&v| T::of(v as f64)));
            hists.extend(h.bins().iter().map(|&v| T::of(v)));
        }
        Ok(Self {
            masks: Tensor::from_vec(&[pairs.len(), 1, p, p], masks)?,
            histograms: Tensor::from_vec(&[pairs.len(), bins], hists)?,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Single-sample generator input.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInput {
    pub mask: Mask,
    pub histogram: DensityHistogram,
}

#[derive(Clone, Debug)]
struct BlockTape<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    activation: Tensor<T>,
    dropout: Option<Tensor<T>>,
}

/// Intermediate values of a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorTape<T> {
    encoder: Vec<BlockTape<T>>,
    decoder: Vec<BlockTape<T>>,
    features: Tensor<T>,
    flat: Tensor<T>,
    bridge: Tensor<T>,
    hist_in: Tensor<T>,
    hist: Tensor<T>,
    fused_in: Tensor<T>,
    fusion: Tensor<T>,
    output_in: Tensor<T>,
    output: Tensor<T>,
}

const HIST_MASS_TOLERANCE: f64 = 1e-3;

impl<T: Real> Generator<T> {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let layout = Layout::build(&config, &mut init);
        Ok(Self { config, layout, params: init.store })
    }

    pub fn from_params(config: GeneratorConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut recorder = super::params::ShapeRecorder::default();
        let layout = Layout::build(&config, &mut recorder);
        let matches = recorder.entries.len() == params.len()
            && recorder.entries.iter().zip(params.iter()).all(|(e, p)| e.name == p.name && e.shape == p.value.shape());
        if !matches {
            return Err(Error::Configuration("parameter set does not match generator config".into()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    fn validate(&self, cond: &Conditions<T>) -> Result<()> {
        let p = self.config.patch_size;
        let n = cond.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if cond.masks.shape() != [n, 1, p, p] {
            return Err(Error::invalid(format!("masks {:?} do not match patch {p}", cond.masks.shape())));
        }
        if cond.histograms.shape() != [n, self.config.hist_bins] {
            return Err(Error::invalid(format!(
                "histograms {:?} do not have {} bins",
                cond.histograms.shape(),
                self.config.hist_bins
            )));
        }
        for b in 0..n {
            let row = cond.histograms.batch_item(b);
            let mass: f64 = row.iter().map(|v| v.f64()).sum();
            if row.iter().any(|v| !(v.f64() >= 0.0)) || (mass - 1.0).abs() > HIST_MASS_TOLERANCE {
                return Err(Error::invalid(format!("histogram {b} is not normalized (mass {mass})")));
            }
        }
        Ok(())
    }

    /// Histograms enter as bin densities (mass times bin count), so a
    /// uniform histogram reads as all ones.
    fn histogram_input(&self, cond: &Conditions<T>) -> Tensor<T> {
        let scale = T::of(self.config.hist_bins as f64);
        match self.config.conditioning {
            Conditioning::MaskAndDensity => cond.histograms.map(|v| v * scale),
            Conditioning::MaskOnly => Tensor::full(cond.histograms.shape(), T::one()),
        }
    }

    /// Batch forward pass; output (N,1,P,P) in [-1, 1].
    pub fn forward(&self, cond: &Conditions<T>, mode: Mode, dropout_seed: u64) -> Result<Tensor<T>> {
        self.validate(cond)?;
        Ok(self.run(cond, mode, dropout_seed).0)
    }

    /// Training-mode forward pass that keeps what backward needs.
    pub fn forward_train(&self, cond: &Conditions<T>, dropout_seed: u64) -> Result<(Tensor<T>, GeneratorTape<T>)> {
        self.validate(cond)?;
        let (out, tape) = self.run(cond, Mode::Train, dropout_seed);
        Ok((out, tape.expect("train mode records a tape")))
    }

    /// Single-sample forward pass returning a patch in [-1, 1].
    pub fn generate(&self, input: &GeneratorInput, mode: Mode, dropout_seed: u64) -> Result<Grid> {
        let cond = Conditions::from_pairs(&[(&input.mask, &input.histogram)])?;
        let out = self.forward(&cond, mode, dropout_seed)?;
        let p = self.config.patch_size;
        Grid::new(p, p, out.data().iter().map(|v| v.f64() as f32).collect())
    }

    fn run(&self, cond: &Conditions<T>, mode: Mode, seed: u64) -> (Tensor<T>, Option<GeneratorTape<T>>) {
        let train = mode == Mode::Train;
        let slope = self.config.leaky_slope;
        let store = &self.params;
        let n = cond.len();
        let p = self.config.patch_size;
        let depth = self.config.depth;

        let mut enc_tapes = Vec::new();
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut x = cond.masks.clone();
        for block in &self.layout.encoder {
            let z = block.conv.forward(store, &x);
            let (z, cache) = match (&block.bn, train) {
                (Some(bn), true) => {
                    let (y, c) = bn.forward_train(store, &z);
                    (y, Some(c))
                }
                (Some(bn), false) => (bn.forward_eval(store, &z), None),
                (None, _) => (z, None),
            };
            let a = leaky_relu(&z, slope);
            if train {
                enc_tapes.push(BlockTape { input: x, bn: cache, activation: a.clone(), dropout: None });
            }
            skips.push(a.clone());
            x = a;
        }

        let mut dec_tapes = Vec::new();
        for (j, block) in self.layout.decoder.iter().enumerate() {
            let up = upsample2x(&x);
            let z = block.conv.forward(store, &up);
            let (z, cache) = if train {
                let (y, c) = block.bn.forward_train(store, &z);
                (y, Some(c))
            } else {
                (block.bn.forward_eval(store, &z), None)
            };
            let a = leaky_relu(&z, slope);
            let drop = (train && block.dropout && self.config.dropout_rate > 0.0)
                .then(|| dropout_mask::<T>(a.shape(), self.config.dropout_rate, seed, j as u64));
            let out = match &drop {
                Some(m) => mul(&a, m),
                None => a.clone(),
            };
            if train {
                dec_tapes.push(BlockTape { input: up, bn: cache, activation: a, dropout: drop });
            }
            x = if j + 1 < depth { concat(&out, &skips[depth - j - 2]) } else { out };
        }
        let features = x;

        let flat = match &self.layout.reduce {
            Some(conv) => conv.forward(store, &features),
            None => features.clone(),
        };
        let flat_len = flat.len() / n;
        let flat = flat.reshape(&[n, flat_len]).expect("flatten");
        let bridge = leaky_relu(&self.layout.bridge.forward(store, &flat), slope);
        let hist_in = self.histogram_input(cond);
        let hist = leaky_relu(&self.layout.hist.forward(store, &hist_in), slope);
        let fused_in = concat(&bridge, &hist);
        let fusion = leaky_relu(&self.layout.fusion.forward(store, &fused_in), slope);
        let plane = fusion.clone().reshape(&[n, 1, p, p]).expect("reshape fusion");
        let output_in = concat(&features, &plane);
        let output = tanh(&self.layout.output.forward(store, &output_in));

        let tape = train.then(|| GeneratorTape {
            encoder: enc_tapes,
            decoder: dec_tapes,
            features,
            flat,
            bridge,
            hist_in,
            hist,
            fused_in,
            fusion,
            output_in,
            output: output.clone(),
        });
        (output, tape)
    }

    /// Back-propagates `d_output` through a recorded pass into `grads`.
    pub fn backward(&self, tape: &GeneratorTape<T>, d_output: &Tensor<T>, grads: &mut Grads<T>) {
        let slope = self.config.leaky_slope;
        let store = &self.params;
        let layout = &self.layout;
        let n = d_output.shape()[0];
        let p = self.config.patch_size;
        let depth = self.config.depth;
        let features_c = self.config.channel_schedule[0];

        let d = tanh_backward(&tape.output, d_output);
        let d_in = layout.output.backward(store, grads, &tape.output_in, &d);
        let (mut d_features, d_plane) = split(&d_in, features_c);
        let d_fusion = d_plane.reshape(&[n, p * p]).expect("reshape");
        let d_fusion = leaky_relu_backward(&tape.fusion, &d_fusion, slope);
        let d_fused = layout.fusion.backward(store, grads, &tape.fused_in, &d_fusion, true).expect("input grad");
        let (d_bridge, d_hist) = split(&d_fused, self.config.bridge_units);
        // In mask-only mode the branch sees a constant input and acts as a
        // learned bias.
        let d_hist = leaky_relu_backward(&tape.hist, &d_hist, slope);
        layout.hist.backward(store, grads, &tape.hist_in, &d_hist, false);
        let d_bridge = leaky_relu_backward(&tape.bridge, &d_bridge, slope);
        let d_flat = layout.bridge.backward(store, grads, &tape.flat, &d_bridge, true).expect("input grad");
        let d_from_bridge = match &layout.reduce {
            Some(conv) => {
                let d_reduced = d_flat.reshape(&[n, 1, p, p]).expect("reshape");
                conv.backward(store, grads, &tape.features, &d_reduced)
            }
            None => d_flat.reshape(tape.features.shape()).expect("reshape"),
        };
        d_features.add_assign(&d_from_bridge);

        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; depth];
        let mut d_x = d_features;
        for j in (0..depth).rev() {
            let block = &layout.decoder[j];
            let bt = &tape.decoder[j];
            let mut d_out = if j + 1 < depth {
                let own = bt.activation.shape()[1];
                let (d_own, d_skip) = split(&d_x, own);
                accumulate(&mut d_skips[depth - j - 2], d_skip);
                d_own
            } else {
                d_x
            };
            if let Some(mask) = &bt.dropout {
                d_out = mul(&d_out, mask);
            }
            let d_z = leaky_relu_backward(&bt.activation, &d_out, slope);
            let d_z = block.bn.backward(store, grads, bt.bn.as_ref().expect("train cache"), &d_z);
            let d_up = block.conv.backward(store, grads, &bt.input, &d_z);
            d_x = upsample2x_backward(&d_up);
        }
        accumulate(&mut d_skips[depth - 1], d_x);

        let mut d_next: Option<Tensor<T>> = None;
        for i in (0..depth).rev() {
            let block = &layout.encoder[i];
            let bt = &tape.encoder[i];
            let mut d_a = d_skips[i].take().unwrap_or_else(|| Tensor::zeros(bt.activation.shape()));
            if let Some(d) = d_next.take() {
                d_a.add_assign(&d);
            }
            let d_z = leaky_relu_backward(&bt.activation, &d_a, slope);
            let d_z = match (&block.bn, &bt.bn) {
                (Some(bn), Some(cache)) => bn.backward(store, grads, cache, &d_z),
                _ => d_z,
            };
            let d_input = block.conv.backward(store, grads, &bt.input, &d_z);
            if i > 0 {
                d_next = Some(d_input);
            }
        }
    }

    /// Folds a training pass's batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, tape: &GeneratorTape<T>) {
        let n = tape.output.shape()[0];
        for (block, bt) in self.layout.encoder.iter().zip(&tape.encoder) {
            if let (Some(bn), Some(cache)) = (&block.bn, &bt.bn) {
                let (_, _, h, w) = bt.activation.dims4();
                bn.update_running(&mut self.params, cache, n * h * w);
            }
        }
        for (block, bt) in self.layout.decoder.iter().zip(&tape.decoder) {
            if let Some(cache) = &bt.bn {
                let (_, _, h, w) = bt.activation.dims4();
                block.bn.update_running(&mut self.params, cache, n * h * w);
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, value: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&value),
        None => *slot = Some(value),
    }
}

/// Declared tensor shapes of a generator, without allocating it.
pub(crate) fn generator_shapes(config: &GeneratorConfig) -> Vec<super::params::ParamShape> {
    let mut recorder = super::params::ShapeRecorder::default();
    Layout::build(config, &mut recorder);
    recorder.entries
}
