//! Named parameter storage shared by every network.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lsf;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running statistics; saved but never optimized.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Receives parameter declarations while a network layout is built.
pub trait ParamSink {
    fn declare(&mut self, name: String, kind: ParamKind, shape: &[usize], init: Init) -> ParamId;
}

/// Allocates and initializes parameters from one seeded stream, in
/// declaration order.
pub struct Initializer<T> {
    pub store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Initializer<T> {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::default(), rng: crate::rng::stream(seed, "init", 0) }
    }
}

impl<T: Real> ParamSink for Initializer<T> {
    fn declare(&mut self, name: String, kind: ParamKind, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect()
            }
        };
        self.store.add(name, kind, Tensor::from_vec(shape, data).expect("shape matches"))
    }
}

/// One declared tensor of a layout, without storage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl ParamShape {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Records a layout's tensor shapes without allocating them.
#[derive(Default, Debug)]
pub struct ShapeRecorder {
    pub entries: Vec<ParamShape>,
}

impl ParamSink for ShapeRecorder {
    fn declare(&mut self, name: String, kind: ParamKind, shape: &[usize], _init: Init) -> ParamId {
        self.entries.push(ParamShape { name, kind, shape: shape.to_vec() });
        ParamId(self.entries.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind.trainable()).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads { tensors: self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
        }
    }

    /// Writes one LSF1 file per tensor into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for p in &self.params {
            lsf::write_tensor(&dir.join(format!("{}.lsf", p.name)), &p.value)?;
        }
        Ok(())
    }

    /// Loads every tensor from `dir`, checking shapes against `self`.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        for p in &mut self.params {
            let path = dir.join(format!("{}.lsf", p.name));
            if !path.exists() {
                return Err(Error::NotFound(path.display().to_string()));
            }
            let value: Tensor<T> = lsf::read_tensor(&path)?;
            if value.shape() != p.value.shape() {
                return Err(Error::format(
                    &path,
                    format!("shape {:?} does not match expected {:?}", value.shape(), p.value.shape()),
                ));
            }
            p.value = value;
        }
        Ok(())
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}
