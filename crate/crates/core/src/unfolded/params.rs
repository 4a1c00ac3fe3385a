//! Unconstrained coordinates for the trainable network.
//!
//! Mixture weights are a softmax of logits and variances are `exp` of a
//! log-variance clamped below at `ln VARIANCE_FLOOR`, so any real parameter
//! vector decodes to a valid mixture.

use ndarray::Array2;

use super::network::NetworkGrads;
use super::LampModel;
use crate::error::Result;
use crate::gm_prior::GaussianMixture;
use crate::scalar::Scalar;

pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub weight_logits: Vec<T>,
    pub means: Vec<T>,
    pub log_vars: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn from_mixture(gm: &GaussianMixture<T>) -> Self {
        let floor = T::of(VARIANCE_FLOOR);
        Self {
            weight_logits: gm.weights().iter().map(|w| w.ln()).collect(),
            means: gm.means().to_vec(),
            log_vars: gm.variances().iter().map(|&v| v.max(floor).ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    fn weights(&self) -> Vec<T> {
        let max = self.weight_logits.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = self.weight_logits.iter().map(|&a| (a - max).exp()).collect();
        let s: T = e.iter().copied().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn log_var_floor() -> T {
        T::of(VARIANCE_FLOOR.ln())
    }

    pub fn decode(&self) -> Result<GaussianMixture<T>> {
        let floor = Self::log_var_floor();
        GaussianMixture::new(self.weights(), self.means.clone(), self.log_vars.iter().map(|&s| s.max(floor).exp()).collect())
    }

    /// Maps adjoints `[log ω; μ; σ²]` of the decoded mixture to these coordinates.
    pub fn chain(&self, raw: &[T]) -> LayerParams<T> {
        let l = self.len();
        let w = self.weights();
        let lw_bar = &raw[..l];
        let total: T = lw_bar.iter().copied().sum();
        let floor = Self::log_var_floor();
        LayerParams {
            weight_logits: (0..l).map(|j| lw_bar[j] - w[j] * total).collect(),
            means: raw[l..2 * l].to_vec(),
            log_vars: (0..l)
                .map(|j| {
                    let s = self.log_vars[j];
                    if s > floor {
                        raw[2 * l + j] * s.exp()
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        }
    }

    fn zeros(l: usize) -> Self {
        Self { weight_logits: vec![T::zero(); l], means: vec![T::zero(); l], log_vars: vec![T::zero(); l] }
    }
}

/// Filter matrix plus per-layer mixture coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T: Scalar> {
    pub b: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
}

/// Which parameter groups an optimizer step may touch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMask {
    pub filter: bool,
    pub layers: Vec<bool>,
}

impl TrainMask {
    pub fn lowest_layer(&self) -> usize {
        self.layers.iter().position(|&t| t).map(|i| i + 1).unwrap_or(self.layers.len() + 1)
    }
}

impl<T: Scalar> ParamVector<T> {
    pub fn from_model(model: &LampModel<T>) -> Self {
        Self { b: model.b.as_standard_layout().to_owned(), layers: model.layers.iter().map(LayerParams::from_mixture).collect() }
    }

    pub fn decode_layers(&self) -> Result<Vec<GaussianMixture<T>>> {
        self.layers.iter().map(LayerParams::decode).collect()
    }

    pub fn to_model(&self) -> Result<LampModel<T>> {
        LampModel::new(self.b.clone(), self.decode_layers()?)
    }

    pub fn zeros_like(&self) -> Self {
        Self { b: Array2::zeros(self.b.dim()), layers: self.layers.iter().map(|l| LayerParams::zeros(l.len())).collect() }
    }

    /// Gradients in these coordinates from network adjoints; groups excluded by
    /// `mask` are exactly zero.
    pub fn chain(&self, grads: &NetworkGrads<T>, mask: &TrainMask) -> Self {
        let mut out = self.zeros_like();
        if mask.filter {
            if let Some(gb) = &grads.b {
                out.b.assign(gb);
            }
        }
        for (i, raw) in grads.layers.iter().enumerate() {
            if mask.layers.get(i).copied().unwrap_or(false) {
                out.layers[i] = self.layers[i].chain(raw);
            }
        }
        out
    }

    /// Parameter groups in a fixed order: `B`, then each layer's logits, means
    /// and log-variances.
    pub fn groups(&self) -> Vec<&[T]> {
        let mut g: Vec<&[T]> = vec![self.b.as_slice().expect("B is kept in standard layout")];
        for l in &self.layers {
            g.extend([l.weight_logits.as_slice(), l.means.as_slice(), l.log_vars.as_slice()]);
        }
        g
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut g: Vec<&mut [T]> = vec![self.b.as_slice_mut().expect("B is kept in standard layout")];
        for l in &mut self.layers {
            g.push(l.weight_logits.as_mut_slice());
            g.push(l.means.as_mut_slice());
            g.push(l.log_vars.as_mut_slice());
        }
        g
    }

    /// Per-group trainability matching [`Self::groups`].
    pub fn group_mask(&self, mask: &TrainMask) -> Vec<bool> {
        let mut g = vec![mask.filter];
        for i in 0..self.layers.len() {
            let on = mask.layers.get(i).copied().unwrap_or(false);
            g.extend([on; 3]);
        }
        g
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }
}
