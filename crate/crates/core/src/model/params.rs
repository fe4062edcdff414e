//! Named parameter collections and their binding onto autodiff tapes.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Ordered name -> tensor map. Insertion order is the structural order of the
/// model, which makes seeded initialization and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    map: IndexMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {}", name);
        self.map.insert(name, t);
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {}", name))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<f32> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {}", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn same_names(&self, other: &ModelParams) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(other.map.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Zero-filled clone, used for gradient and momentum buffers.
    pub fn zeros_like(&self) -> ModelParams {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        ModelParams { map }
    }

    /// `self += alpha * other`, parameter-wise.
    pub fn axpy(&mut self, alpha: f32, other: &ModelParams) -> Result<()> {
        if !self.same_names(other) {
            return Err(Error::Contract("mismatched parameter sets".into()));
        }
        for ((_, a), (_, b)) in self.map.iter_mut().zip(other.map.iter()) {
            a.axpy(alpha, b);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f32) {
        for t in self.map.values_mut() {
            t.scale_in_place(alpha);
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f32 {
        self.map
            .values()
            .zip(other.map.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f32::max)
    }
}

/// Parameter leaves registered on a tape, keyed by name.
pub struct Bound {
    ids: IndexMap<String, VarId>,
}

impl Bound {
    /// Register every parameter as a differentiation target on `tape`.
    pub fn bind<T: Real>(params: &ModelParams, tape: &mut Tape<T>) -> Bound {
        let ids = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.cast::<T>(), true)))
            .collect();
        Bound { ids }
    }

    pub fn var(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {}", name))
    }

    /// Collect accumulated gradients back into a name -> tensor map. Missing
    /// gradients (parameters unused by this forward) come back as zeros.
    pub fn grads<T: Real>(&self, tape: &Tape<T>, like: &ModelParams) -> ModelParams {
        let mut out = ModelParams::new();
        for (name, id) in &self.ids {
            let g = tape
                .grad(*id)
                .map(|t| {
                    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.as_f64() as f32).collect())
                        .expect("grad shape")
                })
                .unwrap_or_else(|| Tensor::zeros(like.get(name).shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}
