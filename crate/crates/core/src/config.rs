//! Experiment configuration (TOML), validation and a stable digest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gm_prior::{gm_from_discrete, GaussianMixture};
use crate::unfolded::{init_theta_scaled, TrainConfig};

/// Signal prior used to generate data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// Zero with probability `1 − epsilon`, otherwise `N(0, sigma_x_sq)`.
    BernoulliGaussian {
        epsilon: f64,
        sigma_x_sq: f64,
    },
    Discrete {
        alphabet: Vec<f64>,
        probs: Vec<f64>,
    },
    Gm {
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
    },
}

impl PriorSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PriorSpec::BernoulliGaussian { .. } => "bernoulli_gaussian",
            PriorSpec::Discrete { .. } => "discrete",
            PriorSpec::Gm { .. } => "gm",
        }
    }

    /// The prior as a mixture; discrete symbols become point masses.
    pub fn mixture(&self) -> Result<GaussianMixture<f64>> {
        match self {
            PriorSpec::BernoulliGaussian { epsilon, sigma_x_sq } => {
                if !(*epsilon > 0.0 && *epsilon <= 1.0) {
                    return Err(Error::Config { field: "prior.epsilon".into(), reason: format!("{epsilon} not in (0, 1]") });
                }
                if !(*sigma_x_sq > 0.0) || !sigma_x_sq.is_finite() {
                    return Err(Error::Config { field: "prior.sigma_x_sq".into(), reason: format!("{sigma_x_sq} must be positive") });
                }
                if *epsilon == 1.0 {
                    GaussianMixture::gaussian(0.0, *sigma_x_sq)
                } else {
                    GaussianMixture::bernoulli_gaussian(*epsilon, *sigma_x_sq)
                }
            }
            PriorSpec::Discrete { alphabet, probs } => gm_from_discrete(alphabet, probs, 0.0),
            PriorSpec::Gm { weights, means, variances } => GaussianMixture::new(weights.clone(), means.clone(), variances.clone()),
        }
        .map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::Config { field: "prior".into(), reason: other.to_string() },
        })
    }

    /// Probability that an entry is nonzero.
    pub fn epsilon(&self) -> Result<f64> {
        let gm = self.mixture()?;
        let zero: f64 = (0..gm.len()).filter(|&l| gm.means()[l] == 0.0 && gm.variances()[l] == 0.0).map(|l| gm.weights()[l]).sum();
        Ok(1.0 - zero)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub matrix: u64,
    pub train: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { matrix: 1, train: 2, eval: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub val_size: usize,
    pub pool_size: usize,
    pub learn_rate: f64,
    pub refine_rates: Vec<f64>,
    pub learn_b_steps: usize,
    pub learn_layer_steps: usize,
    pub refine_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub min_improvement_db: f64,
    /// False keeps every layer's mixture at the true prior and learns only `B`.
    pub learn_denoiser: bool,
    /// Initial mixture: means evenly spaced on `[−init_span, init_span]`,
    /// all variances `init_variance`.
    pub init_span: f64,
    pub init_variance: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            val_size: d.val_size,
            pool_size: d.pool_size,
            learn_rate: d.learn_rate,
            refine_rates: d.refine_rates,
            learn_b_steps: d.learn_b_steps,
            learn_layer_steps: d.learn_layer_steps,
            refine_steps: d.refine_steps,
            eval_every: d.eval_every,
            patience: d.patience,
            min_improvement_db: d.min_improvement_db,
            learn_denoiser: d.learn_denoiser,
            init_span: 2.0,
            init_variance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
    /// Soft-threshold multiplier for the ℓ1 baseline; tuned on held-out data when absent.
    pub l1_lambda: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { trials: 10_000, l1_lambda: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub delta: f64,
    pub snr_db: f64,
    pub prior: PriorSpec,
    /// Mixture components of the learned denoiser.
    #[serde(rename = "L")]
    pub components: usize,
    #[serde(rename = "T_max")]
    pub t_max: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn bad<T>(field: &str, reason: String) -> Result<T> {
    Err(Error::Config { field: field.into(), reason })
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config { field: "config".into(), reason: e.message().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn m(&self) -> usize {
        (self.delta * self.n as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return bad("N", format!("{} is below 2", self.n));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta", format!("{} not in (0, 1]", self.delta));
        }
        let m = self.m();
        if m < 1 || m >= self.n {
            return bad("delta", format!("gives m = {m} measurements for N = {}; need 1 ≤ m < N", self.n));
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db", "must be finite".into());
        }
        if self.components < 1 {
            return bad("L", "must be at least 1".into());
        }
        if self.t_max < 1 {
            return bad("T_max", "must be at least 1".into());
        }
        let gm = self.prior.mixture()?;
        if !(gm.second_moment() > 0.0) {
            return bad("prior", "signal power must be positive".into());
        }
        if self.eval.trials < 1 {
            return bad("eval.trials", "must be at least 1".into());
        }
        if let Some(l) = self.eval.l1_lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return bad("eval.l1_lambda", format!("{l} must be non-negative"));
            }
        }
        init_theta_scaled::<f64>(self.components, self.training.init_span, self.training.init_variance)?;
        self.train_config().validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config { field: format!("training.{field}"), reason },
            other => other,
        })
    }

    /// Noise variance that sets the configured SNR for this prior and `δ`.
    pub fn noise_var(&self) -> Result<f64> {
        let gm = self.prior.mixture()?;
        let snr = 10f64.powf(self.snr_db / 10.0);
        Ok(gm.second_moment() / (self.delta * snr))
    }

    pub fn initial_mixture(&self) -> Result<GaussianMixture<f64>> {
        init_theta_scaled(self.components, self.training.init_span, self.training.init_variance)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            t_max: self.t_max,
            batch_size: t.batch_size,
            val_size: t.val_size,
            pool_size: t.pool_size,
            learn_rate: t.learn_rate,
            refine_rates: t.refine_rates.clone(),
            learn_b_steps: t.learn_b_steps,
            learn_layer_steps: t.learn_layer_steps,
            refine_steps: t.refine_steps,
            eval_every: t.eval_every,
            patience: t.patience,
            min_improvement_db: t.min_improvement_db,
            learn_denoiser: t.learn_denoiser,
            seed: self.seeds.train,
        }
    }

    /// Sorted-key TOML rendering with every default filled in.
    pub fn canonical(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        toml::to_string(&value).expect("toml value serializes")
    }

    /// Hex SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
N = 64
delta = 0.5
snr_db = 20.0
L = 2
T_max = 2

[prior]
kind = "bernoulli_gaussian"
epsilon = 0.1
sigma_x_sq = 1.0
"#;

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_toml(text).unwrap_err() {
            Error::Config { field, .. } => field,
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!((cfg.n, cfg.m(), cfg.components, cfg.t_max), (64, 32, 2, 2));
        assert_eq!(cfg.seeds, Seeds::default());
        assert_eq!(cfg.training.batch_size, 1000);
        assert!((cfg.noise_var().unwrap() - 0.002).abs() < 1e-15);
        assert!((cfg.prior.epsilon().unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn invalid_fields_are_named() {
        assert_eq!(field_of(&BASE.replace("delta = 0.5", "delta = 1.5")), "delta");
        assert_eq!(field_of(&BASE.replace("N = 64", "N = 1")), "N");
        assert_eq!(field_of(&BASE.replace("T_max = 2", "T_max = 0")), "T_max");
        assert_eq!(field_of(&BASE.replace("epsilon = 0.1", "epsilon = 0.0")), "prior.epsilon");
        assert_eq!(field_of(&format!("{BASE}\n[training]\nbatch_size = 0\n")), "training.batch_size");
        let unknown = ExperimentConfig::from_toml(&BASE.replace("snr_db", "snr")).unwrap_err();
        assert!(unknown.to_string().contains("snr"));
    }

    #[test]
    fn discrete_priors() {
        let text = BASE.replace(
            "kind = \"bernoulli_gaussian\"\nepsilon = 0.1\nsigma_x_sq = 1.0",
            "kind = \"discrete\"\nalphabet = [-1.0, 0.0, 1.0]\nprobs = [0.05, 0.9, 0.05]",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert!((cfg.prior.epsilon().unwrap() - 0.1).abs() < 1e-12);
        // unit-amplitude symbols: E[x²] = ε
        assert!((cfg.noise_var().unwrap() - 0.002).abs() < 1e-12);
        let bad = text.replace("[0.05, 0.9, 0.05]", "[0.5, 0.9, 0.05]");
        assert_eq!(field_of(&bad), "prior");
    }

    #[test]
    fn hash_ignores_layout() {
        let a = ExperimentConfig::from_toml(BASE).unwrap();
        let shuffled =
            "T_max=2\nL=2\nsnr_db=20.0\ndelta=0.5\nN=64\n[seeds]\nmatrix=1\ntrain=2\neval=3\n[prior]\nsigma_x_sq=1.0\nepsilon=0.1\nkind='bernoulli_gaussian'\n";
        let b = ExperimentConfig::from_toml(shuffled).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = ExperimentConfig::from_toml(&BASE.replace("20.0", "15.0")).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(ExperimentConfig::from_toml(&a.canonical()).unwrap(), a);
    }
}
