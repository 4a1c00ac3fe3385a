//! The unfolded learned-AMP network with Gaussian-mixture denoisers: model,
//! differentiable forward/backward passes, Adam, and layer-wise training.

pub mod adam;
pub mod network;
pub mod params;
pub mod train;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gm_prior::{GaussianMixture, GmRecord};
use crate::scalar::Scalar;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use network::{backward, forward, layer_inputs, nmse_loss, BackwardScope, LayerDenoiser, Loss, NetworkGrads, Tape};
pub use params::{LayerParams, ParamVector, TrainMask, VARIANCE_FLOOR};
pub use train::{
    db, init_theta, init_theta_scaled, train, write_training_log, Batch, LogRow, SampleSource, Stage, StageMetrics, TrainConfig, TrainError, TrainOutcome,
    TrainStageConfig,
};

/// Tied filter `B` (`N × m`) shared by every layer, plus one mixture per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LampModel<T: Scalar> {
    pub b: Array2<T>,
    pub layers: Vec<GaussianMixture<T>>,
}

impl<T: Scalar> LampModel<T> {
    pub fn new(b: Array2<T>, layers: Vec<GaussianMixture<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty);
        }
        Ok(Self { b, layers })
    }

    /// `B = Aᵀ` with the same mixture at every layer: classical BAMP.
    pub fn untrained(a: &Array2<T>, gm: &GaussianMixture<T>, t_max: usize) -> Self {
        Self { b: a.t().to_owned(), layers: vec![gm.clone(); t_max] }
    }

    pub fn t_max(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, a: &Array2<T>, y: ArrayView2<'_, T>, depth: usize) -> Result<Tape<T>> {
        network::forward(&self.b, &self.layers, a, y, depth)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let (n, m) = self.b.dim();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            n,
            m,
            t_max: self.t_max(),
            config_hash: config_hash.to_string(),
            b: self.b.iter().map(|v| v.as_f64()).collect(),
            layers: self.layers.iter().map(GaussianMixture::to_record).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config { field: "format".into(), reason: format!("unknown checkpoint format `{}`", ck.format) });
        }
        if ck.b.len() != ck.n * ck.m || ck.layers.len() != ck.t_max {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint declares {}×{} filter and {} layers but holds {} entries and {} layers",
                ck.n,
                ck.m,
                ck.t_max,
                ck.b.len(),
                ck.layers.len()
            )));
        }
        let b = Array2::from_shape_vec((ck.n, ck.m), ck.b.iter().map(|&v| T::of(v)).collect()).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let layers = ck.layers.iter().map(GaussianMixture::from_record).collect::<Result<Vec<_>>>()?;
        Self::new(b, layers)
    }
}

pub const CHECKPOINT_FORMAT: &str = "lgmamp-checkpoint-v1";

/// Serialized model: filter in row-major order and one mixture record per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub m: usize,
    pub t_max: usize,
    pub config_hash: String,
    pub b: Vec<f64>,
    pub layers: Vec<GmRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config { field: "checkpoint".into(), reason: e.to_string() })
    }
}
