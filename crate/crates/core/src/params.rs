use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::format;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph variables for every parameter of a store, created once per graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches");
        self.add(name, t, trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id)
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Put every parameter on `g` as a leaf; trainable ones require gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), p.trainable))
            .collect();
        Bound { vars }
    }

    /// Per-parameter gradients after a backward sweep (`None` for frozen or
    /// disconnected parameters).
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| if p.trainable { grads.take(v) } else { None })
            .collect()
    }

    /// Byte image of selected parameters (name, shape, little-endian payload).
    pub fn serialize_where(&self, keep: impl Fn(&Param) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&p.value.to_le_bytes());
        }
        out
    }

    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.serialize_where(|p| !p.trainable)
    }

    pub fn trainable_bytes(&self) -> Vec<u8> {
        self.serialize_where(|p| p.trainable)
    }

    pub fn all_bytes(&self) -> Vec<u8> {
        self.serialize_where(|_| true)
    }

    /// Overwrite the value of a named parameter, checking shape and finiteness.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("parameter `{name}` has non-finite values")));
        }
        slot.value = value;
        Ok(())
    }

    /// `(name, value)` pairs, in store order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.to_string()).collect()
    }
}
