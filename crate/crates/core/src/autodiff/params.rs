use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Label distinguishing independently optimized parameter sets
/// (detector vs. discriminator).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Group(pub u32);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`; layers feeding a ReLU.
    HeUniform { fan_in: usize },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`; output layers.
    XavierUniform { fan_in: usize, fan_out: usize },
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Layer name: everything before the last `.`.
    pub fn layer(&self) -> &str {
        self.name.rsplit_once('.').map_or(self.name.as_str(), |(l, _)| l)
    }
}

/// Structural description of a network's trainable parameters and
/// non-trainable buffers (batchnorm running statistics).
///
/// Declaration order fixes the `ParamId`s, so a layout can be counted
/// without allocating anything.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> ParamId {
        self.params.push(ParamSpec { name: name.into(), shape: shape.into(), init });
        ParamId(self.params.len() - 1)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, value: f64) -> BufferId {
        self.buffers.push(ParamSpec { name: name.into(), shape: shape.into(), init: Init::Const(value) });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn buffers(&self) -> &[ParamSpec] {
        &self.buffers
    }

    /// Trainable parameter count per layer, walking the declared tensors.
    pub fn count(&self) -> ParamCount {
        let mut per_layer: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            match per_layer.last_mut() {
                Some((name, n)) if name == p.layer() => *n += p.numel(),
                _ => per_layer.push((p.layer().to_string(), p.numel())),
            }
        }
        let total = per_layer.iter().map(|(_, n)| n).sum();
        ParamCount { per_layer, total }
    }
}

/// Parameter count of a network, per layer and in total.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub per_layer: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn layer(&self, name: &str) -> Option<usize> {
        self.per_layer.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }
}

/// Materialized parameters and buffers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    group: Group,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    /// Allocates and initializes every tensor of `layout` from `seed`.
    pub fn init(layout: &Layout, group: Group, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = layout
            .params
            .iter()
            .map(|p| {
                let n = p.numel();
                let data = match p.init {
                    Init::Const(c) => vec![T::from_f64(c); n],
                    Init::HeUniform { fan_in } => {
                        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
                    }
                    Init::XavierUniform { fan_in, fan_out } => {
                        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                        (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
                    }
                };
                Tensor::new(p.shape.clone(), data).expect("layout shape")
            })
            .collect();
        let buffers = layout
            .buffers
            .iter()
            .map(|b| match b.init {
                Init::Const(c) => Tensor::full(b.shape.clone(), T::from_f64(c)),
                _ => Tensor::zeros(b.shape.clone()),
            })
            .collect();
        ParamStore {
            group,
            names: layout.params.iter().map(|p| p.name.clone()).collect(),
            values,
            buffer_names: layout.buffers.iter().map(|b| b.name.clone()).collect(),
            buffers,
        }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn total_params(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Named tensors for checkpointing: `param/<name>` then `buffer/<name>`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (n, t) in self.names.iter().zip(&self.values) {
            out.push((format!("param/{n}"), t));
        }
        for (n, t) in self.buffer_names.iter().zip(&self.buffers) {
            out.push((format!("buffer/{n}"), t));
        }
        out
    }

    /// Restores values from named tensors; every parameter and buffer must
    /// be present with a matching shape.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor<T>>, prefix: &str) -> crate::Result<()> {
        let slots = self
            .names
            .iter()
            .zip(self.values.iter_mut())
            .map(|(n, v)| (format!("{prefix}param/{n}"), v))
            .chain(
                self.buffer_names
                    .iter()
                    .zip(self.buffers.iter_mut())
                    .map(|(n, v)| (format!("{prefix}buffer/{n}"), v)),
            );
        for (key, slot) in slots {
            let t = tensors
                .get(&key)
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "tensor {key}: shape {:?} does not match model {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}
