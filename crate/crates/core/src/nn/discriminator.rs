//! Conditional patch discriminator over the (mask, image) pair.

use serde::{Deserialize, Serialize};

use super::layers::{concat, leaky_relu, leaky_relu_backward, split, BatchNorm, BnCache, Conv2d};
use super::params::{Grads, Initializer, ParamShape, ParamSink, ParamStore, ShapeRecorder};
use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscLayer {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub patch_size: usize,
    /// 4×4 convolution blocks before the 1-channel logits convolution.
    pub layers: Vec<DiscLayer>,
    pub leaky_slope: f64,
    /// Adds the histogram's mean intensity as a constant input plane.
    /// Off by default: the histogram conditions the generator only.
    #[serde(default)]
    pub condition_on_histogram: bool,
}

impl DiscriminatorConfig {
    pub fn with_base(patch_size: usize, base: usize) -> Self {
        let l = |m: usize, stride| DiscLayer { channels: base * m, stride };
        Self {
            patch_size,
            layers: vec![l(1, 2), l(2, 2), l(4, 2), l(8, 1)],
            leaky_slope: 0.2,
            condition_on_histogram: false,
        }
    }

    /// 64-128-256 stride 2, 512 stride 1, then the logits convolution.
    pub fn for_patch(patch_size: usize) -> Self {
        Self::with_base(patch_size, 64)
    }

    pub fn tiny() -> Self {
        Self {
            patch_size: 8,
            layers: vec![DiscLayer { channels: 3, stride: 2 }, DiscLayer { channels: 4, stride: 1 }],
            leaky_slope: 0.2,
            condition_on_histogram: false,
        }
    }

    /// Side length of the logits map.
    pub fn output_size(&self) -> usize {
        let mut s = self.patch_size as isize;
        for layer in &self.layers {
            s = (s + 2 - 4) / layer.stride as isize + 1;
        }
        (s + 2 - 4 + 1).max(0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Configuration("discriminator needs at least one block".into()));
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.stride == 0) {
            return Err(Error::Configuration("discriminator blocks need positive channels and stride".into()));
        }
        let mut s = self.patch_size as isize;
        for layer in &self.layers {
            if s + 2 < 4 {
                return Err(Error::Configuration(format!("patch {} is too small for the schedule", self.patch_size)));
            }
            s = (s + 2 - 4) / layer.stride as isize + 1;
        }
        if s + 2 < 4 {
            return Err(Error::Configuration(format!("patch {} is too small for the schedule", self.patch_size)));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        if self.condition_on_histogram {
            3
        } else {
            2
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    bn: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<Block>,
    output: Conv2d,
}

impl Layout {
    fn build(config: &DiscriminatorConfig, sink: &mut dyn ParamSink) -> Self {
        let mut cin = config.input_channels();
        let mut blocks = Vec::new();
        for (i, layer) in config.layers.iter().enumerate() {
            let name = format!("disc{}", i + 1);
            let conv = Conv2d::new(sink, &name, cin, layer.channels, 4, layer.stride, 1, i == 0);
            let bn = (i > 0).then(|| BatchNorm::new(sink, &name, layer.channels));
            blocks.push(Block { conv, bn });
            cin = layer.channels;
        }
        let output = Conv2d::new(sink, "logits", cin, 1, 4, 1, 1, true);
        Self { blocks, output }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    layout: Layout,
    pub params: ParamStore<T>,
}

#[derive(Clone, Debug)]
struct BlockTape<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    activation: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorTape<T> {
    blocks: Vec<BlockTape<T>>,
    output_in: Tensor<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let layout = Layout::build(&config, &mut init);
        Ok(Self { config, layout, params: init.store })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut recorder = ShapeRecorder::default();
        let layout = Layout::build(&config, &mut recorder);
        let matches = recorder.entries.len() == params.len()
            && recorder.entries.iter().zip(params.iter()).all(|(e, p)| e.name == p.name && e.shape == p.value.shape());
        if !matches {
            return Err(Error::Configuration("parameter set does not match discriminator config".into()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    fn input(&self, masks: &Tensor<T>, images: &Tensor<T>, histograms: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let p = self.config.patch_size;
        let n = masks.shape()[0];
        if n == 0 || masks.shape() != [n, 1, p, p] || images.shape() != [n, 1, p, p] {
            return Err(Error::invalid(format!(
                "discriminator expects (N,1,{p},{p}) masks and images, got {:?} and {:?}",
                masks.shape(),
                images.shape()
            )));
        }
        let x = concat(masks, images);
        if !self.config.condition_on_histogram {
            return Ok(x);
        }
        let hist = histograms.ok_or_else(|| Error::invalid("discriminator is histogram-conditioned"))?;
        let bins = hist.len() / n;
        let mut plane = Tensor::zeros(&[n, 1, p, p]);
        for b in 0..n {
            let mean: f64 = hist.batch_item(b).iter().enumerate().map(|(i, v)| v.f64() * (i as f64 + 0.5) / bins as f64).sum();
            plane.batch_item_mut(b).fill(T::of(2.0 * mean - 1.0));
        }
        Ok(concat(&x, &plane))
    }

    pub fn forward(
        &self,
        masks: &Tensor<T>,
        images: &Tensor<T>,
        histograms: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let x = self.input(masks, images, histograms)?;
        Ok(self.run(x, mode).0)
    }

    pub fn forward_train(
        &self,
        masks: &Tensor<T>,
        images: &Tensor<T>,
        histograms: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, DiscriminatorTape<T>)> {
        let x = self.input(masks, images, histograms)?;
        let (out, tape) = self.run(x, Mode::Train);
        Ok((out, tape.expect("train mode records a tape")))
    }

    fn run(&self, mut x: Tensor<T>, mode: Mode) -> (Tensor<T>, Option<DiscriminatorTape<T>>) {
        let train = mode == Mode::Train;
        let slope = self.config.leaky_slope;
        let store = &self.params;
        let mut tapes = Vec::new();
        for block in &self.layout.blocks {
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
                tapes.push(BlockTape { input: x, bn: cache, activation: a.clone() });
            }
            x = a;
        }
        let logits = self.layout.output.forward(store, &x);
        let tape = train.then_some(DiscriminatorTape { blocks: tapes, output_in: x });
        (logits, tape)
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to the image channel.
    pub fn backward(&self, tape: &DiscriminatorTape<T>, d_logits: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let slope = self.config.leaky_slope;
        let store = &self.params;
        let mut d = self.layout.output.backward(store, grads, &tape.output_in, d_logits);
        for (block, bt) in self.layout.blocks.iter().zip(&tape.blocks).rev() {
            let d_z = leaky_relu_backward(&bt.activation, &d, slope);
            let d_z = match (&block.bn, &bt.bn) {
                (Some(bn), Some(cache)) => bn.backward(store, grads, cache, &d_z),
                _ => d_z,
            };
            d = block.conv.backward(store, grads, &bt.input, &d_z);
        }
        let (_, rest) = split(&d, 1);
        let (d_image, _) = split(&rest, 1);
        d_image
    }

    pub fn update_running_stats(&mut self, tape: &DiscriminatorTape<T>) {
        for (block, bt) in self.layout.blocks.iter().zip(&tape.blocks) {
            if let (Some(bn), Some(cache)) = (&block.bn, &bt.bn) {
                let (n, _, h, w) = bt.activation.dims4();
                bn.update_running(&mut self.params, cache, n * h * w);
            }
        }
    }
}

pub(crate) fn discriminator_shapes(config: &DiscriminatorConfig) -> Vec<ParamShape> {
    let mut recorder = ShapeRecorder::default();
    Layout::build(config, &mut recorder);
    recorder.entries
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(n: usize, p: usize) -> (Tensor<f32>, Tensor<f32>) {
        let masks = Tensor::from_vec(&[n, 1, p, p], (0..n * p * p).map(|i| ((i / 7) % 2) as f32).collect()).unwrap();
        let images = Tensor::from_vec(&[n, 1, p, p], (0..n * p * p).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
        (masks, images)
    }

    #[test]
    fn logits_map_shape() {
        let cfg = DiscriminatorConfig::with_base(64, 4);
        assert_eq!(cfg.output_size(), 6);
        let d = Discriminator::<f32>::init(cfg, 1).unwrap();
        let (m, x) = inputs(2, 64);
        let out = d.forward(&m, &x, None, Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[2, 1, 6, 6]);
        assert_eq!(DiscriminatorConfig::tiny().output_size(), 2);
    }

    #[test]
    fn deterministic_and_zero_params_give_zero_logits() {
        let cfg = DiscriminatorConfig::with_base(32, 2);
        let mut d = Discriminator::<f32>::init(cfg.clone(), 4).unwrap();
        assert_eq!(d.params, Discriminator::<f32>::init(cfg, 4).unwrap().params);
        let (m, x) = inputs(1, 32);
        let a = d.forward(&m, &x, None, Mode::Eval).unwrap();
        assert_eq!(a, d.forward(&m, &x, None, Mode::Eval).unwrap());
        for p in d.params.iter_mut() {
            if p.kind.trainable() {
                p.value.fill(0.0);
            }
        }
        for mode in [Mode::Eval, Mode::Train] {
            assert!(d.forward(&m, &x, None, mode).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn structure_and_init() {
        let d = Discriminator::<f32>::init(DiscriminatorConfig::for_patch(64), 0).unwrap();
        assert_eq!(d.params.by_name("logits.weight").unwrap().value.shape()[0], 1);
        assert!(d.params.by_name("disc1.bn.scale").is_none());
        for p in d.params.iter().filter(|p| p.name.ends_with("bn.shift")) {
            assert!(p.value.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_mismatched_shapes_and_tiny_patches() {
        let d = Discriminator::<f32>::init(DiscriminatorConfig::with_base(32, 2), 0).unwrap();
        let (m, _) = inputs(1, 32);
        let (_, x) = inputs(1, 16);
        assert!(matches!(d.forward(&m, &x, None, Mode::Eval), Err(Error::InvalidArgument(_))));
        assert!(Discriminator::<f32>::init(DiscriminatorConfig::for_patch(8), 0).is_err());
    }

    #[test]
    fn histogram_conditioning_flag() {
        let cfg = DiscriminatorConfig { condition_on_histogram: true, ..DiscriminatorConfig::with_base(32, 2) };
        let d = Discriminator::<f32>::init(cfg, 0).unwrap();
        let (m, x) = inputs(1, 32);
        assert!(d.forward(&m, &x, None, Mode::Eval).is_err());
        let h = Tensor::full(&[1, 100], 0.01);
        assert_eq!(d.forward(&m, &x, Some(&h), Mode::Eval).unwrap().shape(), &[1, 1, 2, 2]);
    }
}
