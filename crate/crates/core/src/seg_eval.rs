//! Segmentation benchmark: a compact encoder-decoder trained on real or
//! synthetic slices, scored by pixel F1 on a fixed test set.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::nn::layers::{concat, leaky_relu, leaky_relu_backward, split, upsample2x, upsample2x_backward, BatchNorm, BnCache, Conv2d};
use crate::nn::params::{ParamSink, ShapeRecorder};
use crate::nn::{Grads, Initializer, Mode, ParamStore};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Real, Tensor};
use crate::train::loss::{bce_term, sigmoid};
use crate::train::{Adam, AdamConfig};

/// Pooled pixel confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &Mask, truth: &Mask) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::invalid(format!("prediction {:?} and truth {:?} differ in shape", pred.shape(), truth.shape())));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// 2·TP / (2·TP + FP + FN); 1 when nothing is positive anywhere.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn f1_score(pred: &Mask, truth: &Mask) -> Result<f64> {
    Ok(Confusion::of(pred, truth)?.f1())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    /// Channels of the first encoder level; deeper levels use 2x and 4x.
    pub base_channels: usize,
    pub epochs: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability above which a pixel is predicted as lesion.
    pub threshold: f64,
    pub leaky_slope: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { base_channels: 32, epochs: 30, learning_rate: 1e-3, batch_size: 8, seed: 0, threshold: 0.5, leaky_slope: 0.2 }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.into()));
        if self.base_channels == 0 {
            return bad("segmenter needs at least one base channel");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    fn new(sink: &mut dyn ParamSink, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        // Padding 1 keeps 3x3 stride-1 sizes and halves with 4x4 stride 2.
        Self { conv: Conv2d::new(sink, name, cin, cout, kernel, stride, 1, false), bn: BatchNorm::new(sink, name, cout) }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    enc: [ConvBlock; 3],
    dec: [ConvBlock; 2],
    output: Conv2d,
}

impl Layout {
    fn build(base: usize, sink: &mut dyn ParamSink) -> Self {
        let b = base;
        Self {
            enc: [
                ConvBlock::new(sink, "seg_enc0", 2, b, 3, 1),
                ConvBlock::new(sink, "seg_enc1", b, 2 * b, 4, 2),
                ConvBlock::new(sink, "seg_enc2", 2 * b, 4 * b, 4, 2),
            ],
            dec: [ConvBlock::new(sink, "seg_dec1", 6 * b, 2 * b, 3, 1), ConvBlock::new(sink, "seg_dec0", 3 * b, b, 3, 1)],
            output: Conv2d::new(sink, "seg_out", b, 1, 1, 1, 0, true),
        }
    }
}

struct BlockTape<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    activation: Tensor<T>,
}

struct Tape<T> {
    blocks: Vec<BlockTape<T>>,
    out_in: Tensor<T>,
}

/// Three-level encoder-decoder with skip connections. Input channels are
/// the normalized slice and the liver mask; output is lesion logits.
#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    config: SegConfig,
    layout: Layout,
    pub params: ParamStore<T>,
}

impl<T: Real> Segmenter<T> {
    pub fn init(config: SegConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(derive_seed(config.seed, "segmenter", 0));
        let layout = Layout::build(config.base_channels, &mut init);
        Ok(Self { config, layout, params: init.store })
    }

    pub fn from_params(config: SegConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut recorder = ShapeRecorder::default();
        let layout = Layout::build(config.base_channels, &mut recorder);
        let matches = recorder.entries.len() == params.len()
            && recorder.entries.iter().zip(params.iter()).all(|(e, p)| e.name == p.name && e.shape == p.value.shape());
        if !matches {
            return Err(Error::Configuration("parameter set does not match segmenter config".into()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Segmenter<U> {
        Segmenter { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    fn block(&self, block: &ConvBlock, x: Tensor<T>, train: bool, tapes: &mut Vec<BlockTape<T>>) -> Tensor<T> {
        let z = block.conv.forward(&self.params, &x);
        let (z, cache) = if train {
            let (y, c) = block.bn.forward_train(&self.params, &z);
            (y, Some(c))
        } else {
            (block.bn.forward_eval(&self.params, &z), None)
        };
        let a = leaky_relu(&z, self.config.leaky_slope);
        if train {
            tapes.push(BlockTape { input: x, bn: cache, activation: a.clone() });
        }
        a
    }

    fn run(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        let (n, c, h, w) = x.dims4();
        if n == 0 || c != 2 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("segmenter expects (N,2,H,W) with H, W multiples of 4, got {:?}", x.shape())));
        }
        let train = mode == Mode::Train;
        let mut tapes = Vec::new();
        let e0 = self.block(&self.layout.enc[0], x.clone(), train, &mut tapes);
        let e1 = self.block(&self.layout.enc[1], e0.clone(), train, &mut tapes);
        let e2 = self.block(&self.layout.enc[2], e1.clone(), train, &mut tapes);
        let d1 = self.block(&self.layout.dec[0], concat(&upsample2x(&e2), &e1), train, &mut tapes);
        let d0 = self.block(&self.layout.dec[1], concat(&upsample2x(&d1), &e0), train, &mut tapes);
        let logits = self.layout.output.forward(&self.params, &d0);
        Ok((logits, train.then_some(Tape { blocks: tapes, out_in: d0 })))
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.run(x, mode)?.0)
    }

    fn block_backward(&self, block: &ConvBlock, tape: &BlockTape<T>, d: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let dz = leaky_relu_backward(&tape.activation, d, self.config.leaky_slope);
        let dz = block.bn.backward(&self.params, grads, tape.bn.as_ref().expect("train tape"), &dz);
        block.conv.backward(&self.params, grads, &tape.input, &dz)
    }

    fn backward(&self, tape: &Tape<T>, d_logits: &Tensor<T>, grads: &mut Grads<T>) {
        let b = self.config.base_channels;
        let t = &tape.blocks;
        let d_d0 = self.layout.output.backward(&self.params, grads, &tape.out_in, d_logits);
        let d = self.block_backward(&self.layout.dec[1], &t[4], &d_d0, grads);
        let (d_up1, mut d_e0) = split(&d, 2 * b);
        let d_d1 = upsample2x_backward(&d_up1);
        let d = self.block_backward(&self.layout.dec[0], &t[3], &d_d1, grads);
        let (d_up2, mut d_e1) = split(&d, 4 * b);
        let d_e2 = upsample2x_backward(&d_up2);
        d_e1.add_assign(&self.block_backward(&self.layout.enc[2], &t[2], &d_e2, grads));
        d_e0.add_assign(&self.block_backward(&self.layout.enc[1], &t[1], &d_e1, grads));
        self.block_backward(&self.layout.enc[0], &t[0], &d_e0, grads);
    }

    fn update_running_stats(&mut self, tape: &Tape<T>) {
        let blocks: Vec<BatchNorm> = self.layout.enc.iter().chain(&self.layout.dec).map(|b| b.bn.clone()).collect();
        for (bn, bt) in blocks.iter().zip(&tape.blocks) {
            let (n, _, h, w) = bt.activation.dims4();
            bn.update_running(&mut self.params, bt.bn.as_ref().expect("train tape"), n * h * w);
        }
    }

    /// Mean pixel BCE and its parameter gradients for one batch.
    fn loss_and_grads(&self, x: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Grads<T>, Tape<T>)> {
        let (logits, tape) = self.run(x, Mode::Train)?;
        let tape = tape.expect("train mode records a tape");
        let (loss, d_logits) = pixel_bce(&logits, targets);
        let mut grads = self.params.zero_grads();
        self.backward(&tape, &d_logits, &mut grads);
        Ok((loss, grads, tape))
    }
}

/// Mean BCE of sigmoid(logits) against 0/1 targets, with its gradient.
fn pixel_bce<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> (f64, Tensor<T>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, &l), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets.data()) {
        let (l, t) = (l.f64(), t.f64());
        loss += bce_term(l, t);
        *g = T::of((sigmoid(l) - t) / n);
    }
    (loss / n, grad)
}

/// Stacks (normalized slice, liver mask) inputs and lesion targets.
fn stack(records: &[&SampleRecord]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (rows, cols) = records[0].slice.pixels.shape();
    let mut x = Vec::with_capacity(records.len() * 2 * rows * cols);
    let mut y = Vec::with_capacity(records.len() * rows * cols);
    for r in records {
        if r.slice.pixels.shape() != (rows, cols) {
            return Err(Error::invalid("all slices must share one resolution"));
        }
        x.extend_from_slice(r.normalized()?.data());
        x.extend(r.liver.to_f32());
        y.extend(r.lesion_union().to_f32());
    }
    Ok((Tensor::from_vec(&[records.len(), 2, rows, cols], x)?, Tensor::from_vec(&[records.len(), 1, rows, cols], y)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegEpoch {
    pub epoch: u64,
    pub loss: f64,
}

/// Trains a fresh segmenter; one metric line per epoch goes to `log`.
pub fn train_segmenter(dataset: &[SampleRecord], config: &SegConfig, log: Option<&mut dyn Write>) -> Result<(Segmenter<f32>, Vec<SegEpoch>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("segmentation training set is empty"));
    }
    let mut seg = Segmenter::<f32>::init(config.clone())?;
    let mut opt = Adam::new(&seg.params);
    let adam = config.adam();
    let mut history = Vec::new();
    let mut log = log;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stream(config.seed, "seg_shuffle", epoch));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let records: Vec<&SampleRecord> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (x, y) = stack(&records)?;
            let (loss, grads, tape) = seg.loss_and_grads(&x, &y)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { step, what: "segmentation loss" });
            }
            opt.step(&mut seg.params, &grads, &adam);
            seg.update_running_stats(&tape);
            total += loss;
            batches += 1;
        }
        let record = SegEpoch { epoch: epoch + 1, loss: total / batches as f64 };
        log::debug!("segmenter epoch {} loss {:.6}", record.epoch, record.loss);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}, {:.8}", record.epoch, record.loss)?;
        }
        history.push(record);
    }
    Ok((seg, history))
}

/// Lesion prediction restricted to the given liver.
pub fn predict(seg: &Segmenter<f32>, record: &SampleRecord) -> Result<Mask> {
    let (x, _) = stack(&[record])?;
    let logits = seg.forward(&x, Mode::Eval)?;
    let (rows, cols) = record.slice.pixels.shape();
    let t = seg.config.threshold;
    Ok(Mask::from_fn(rows, cols, |r, c| record.liver.get(r, c) && sigmoid(logits.data()[r * cols + c] as f64) > t))
}

/// Pooled confusion counts over the whole evaluation set.
pub fn evaluate(seg: &Segmenter<f32>, test: &[SampleRecord]) -> Result<Confusion> {
    let mut total = Confusion::default();
    for record in test {
        total.add(Confusion::of(&predict(seg, record)?, &record.lesion_union())?);
    }
    Ok(total)
}

const SEG_MANIFEST: &str = "manifest";
const SEG_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SegManifest {
    format_version: u32,
    config: SegConfig,
}

pub fn save_segmenter(dir: &Path, seg: &Segmenter<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = SegManifest { format_version: SEG_FORMAT, config: seg.config.clone() };
    let text = toml::to_string(&manifest).map_err(|e| Error::Configuration(e.to_string()))?;
    fs::write(dir.join(SEG_MANIFEST), text)?;
    seg.params.save(&dir.join("params"))
}

pub fn load_segmenter(dir: &Path) -> Result<Segmenter<f32>> {
    let path = dir.join(SEG_MANIFEST);
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let manifest: SegManifest = toml::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != SEG_FORMAT {
        return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
    }
    let mut seg = Segmenter::<f32>::init(manifest.config)?;
    seg.params.load_into(&dir.join("params"))?;
    Ok(seg)
}

/// Reference F1 scores reported for the full-scale CT benchmark.
pub const REFERENCE_F1: [(&str, f64); 3] =
    [("original", 0.5996), ("mask_synthesis", 0.3409), ("mask_density_synthesis", 0.4013)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// Mean over seeds.
    pub f1: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub reference_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>10}  per-seed", "training set", "F1", "reference");
        for row in &self.rows {
            let seeds: Vec<String> = row.seeds.iter().zip(&row.per_seed).map(|(s, f)| format!("{s}:{f:.4}")).collect();
            let _ = writeln!(s, "{:<24} {:>8.4} {:>10.4}  {}", row.label, row.f1, row.reference_f1, seeds.join(" "));
        }
        s
    }

    /// Machine-readable form with scores rounded to 4 decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "label": r.label,
                    "f1": round4(r.f1),
                    "seeds": r.seeds,
                    "per_seed": r.per_seed.iter().map(|&v| round4(v)).collect::<Vec<_>>(),
                    "reference_f1": r.reference_f1,
                })
            })
            .collect();
        serde_json::json!({ "rows": rows })
    }
}

/// Trains one segmenter per (training set, seed) and scores each on
/// `test`. Rows follow the order original, mask-only, mask+density.
pub fn run_experiment(
    real: &[SampleRecord],
    synth_mask: &[SampleRecord],
    synth_density: &[SampleRecord],
    test: &[SampleRecord],
    config: &SegConfig,
    seeds: &[u64],
    log_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let shape = test[0].slice.pixels.shape();
    let sets = [real, synth_mask, synth_density];
    if sets.iter().flat_map(|s| s.iter()).chain(test).any(|r| r.slice.pixels.shape() != shape) {
        return Err(Error::invalid("all datasets must share one resolution"));
    }
    let mut rows = Vec::new();
    for (&(label, reference_f1), set) in REFERENCE_F1.iter().zip(sets) {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = SegConfig { seed, ..config.clone() };
            let seg = match log_dir {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    let mut w = BufWriter::new(File::create(dir.join(format!("{label}_seed{seed}.log")))?);
                    let seg = train_segmenter(set, &cfg, Some(&mut w))?.0;
                    w.flush()?;
                    seg
                }
                None => train_segmenter(set, &cfg, None)?.0,
            };
            let f1 = evaluate(&seg, test)?.f1();
            log::info!("{label} seed {seed}: F1 {f1:.4}");
            per_seed.push(f1);
        }
        let f1 = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(ReportRow { label: label.to_string(), f1, seeds: seeds.to_vec(), per_seed, reference_f1 });
    }
    Ok(ExperimentReport { rows })
}

#[cfg(test)]
mod tests;
