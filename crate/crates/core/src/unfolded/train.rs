//! Layer-wise training schedule.
//!
//! 1. Learn `B` in a one-layer network whose mixture is held at its initial value.
//! 2. For each new layer `t`: copy the previous layer's mixture, train only
//!    that mixture with everything below it frozen, then refine `B` and all
//!    mixtures up to `t` at each of the smaller refinement rates.
//!
//! Every stage evaluates the validation NMSE of its deepest layer every
//! `eval_every` steps, keeps the best parameters seen, and stops after
//! `patience` evaluations without a `min_improvement_db` gain.
//!
//! While a new layer is trained alone, its inputs `(r_t, s_t)` do not depend on
//! the trainable parameters, so they are computed once per stage for a pool of
//! samples drawn from the source and minibatches are taken from that pool.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::{adam_update, AdamConfig, AdamState};
use super::network::{backward, forward, layer_inputs, nmse_loss, BackwardScope, LayerDenoiser};
use super::params::{LayerParams, ParamVector, TrainMask};
use super::LampModel;
use crate::error::{Error, Result};
use crate::gm_prior::{GaussianMixture, GmGrad, GmKernel};
use crate::scalar::Scalar;

/// Signal/observation pairs, one per row.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub x: Array2<T>,
    pub y: Array2<T>,
}

/// Endless supply of training samples for a fixed measurement matrix.
pub trait SampleSource<T: Scalar> {
    fn draw(&mut self, count: usize) -> Batch<T>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    LearnB,
    LearnNewLayer,
    RefineAll,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::LearnB => "learn_B",
            Stage::LearnNewLayer => "learn_new_layer",
            Stage::RefineAll => "refine_all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub t_max: usize,
    pub batch_size: usize,
    pub val_size: usize,
    /// Samples cached per new-layer stage.
    pub pool_size: usize,
    pub learn_rate: f64,
    pub refine_rates: Vec<f64>,
    pub learn_b_steps: usize,
    pub learn_layer_steps: usize,
    pub refine_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub min_improvement_db: f64,
    /// When false the mixtures stay at their initial value and only `B` is
    /// trained (learned AMP with a fixed, e.g. matched, denoiser).
    pub learn_denoiser: bool,
    /// Seed for minibatch selection from cached pools.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_max: 10,
            batch_size: 1000,
            val_size: 10_000,
            pool_size: 10_000,
            learn_rate: 1e-3,
            refine_rates: vec![1e-4, 1e-5],
            learn_b_steps: 10_000,
            learn_layer_steps: 10_000,
            refine_steps: 10_000,
            eval_every: 50,
            patience: 20,
            min_improvement_db: 0.01,
            learn_denoiser: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, stage: Stage, learning_rate: f64) -> TrainStageConfig {
        let max_steps = match stage {
            Stage::LearnB => self.learn_b_steps,
            Stage::LearnNewLayer => self.learn_layer_steps,
            Stage::RefineAll => self.refine_steps,
        };
        TrainStageConfig { stage, learning_rate, max_steps, patience: self.patience }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { field: field.into(), reason: reason.into() });
        if self.t_max == 0 {
            return bad("t_max", "must be at least 1");
        }
        if self.batch_size == 0 || self.val_size == 0 || self.pool_size == 0 {
            return bad("batch_size", "batch, validation and pool sizes must be positive");
        }
        if self.eval_every == 0 || self.patience == 0 {
            return bad("eval_every", "evaluation interval and patience must be positive");
        }
        if !(self.learn_rate > 0.0) || self.refine_rates.iter().any(|&r| !(r > 0.0)) {
            return bad("learn_rate", "learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub stage: Stage,
    pub layer: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub start_val_db: f64,
    pub best_val_db: f64,
}

/// One evaluation point of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    #[serde(serialize_with = "stage_name")]
    pub stage: Stage,
    pub layer: usize,
    pub step: usize,
    pub train_nmse_db: f64,
    pub val_nmse_db: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: LampModel<T>,
    pub stages: Vec<StageMetrics>,
    pub log: Vec<LogRow>,
    /// Validation NMSE (dB) of the final model at every layer.
    pub layer_val_db: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainError<T: Scalar> {
    pub source: Error,
    pub stage: Stage,
    pub layer: usize,
    /// Parameters at the end of the last completed stage.
    pub last_good: Option<LampModel<T>>,
    pub log: Vec<LogRow>,
}

impl<T: Scalar> std::fmt::Display for TrainError<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training failed in {} at layer {}: {}", self.stage.name(), self.layer, self.source)
    }
}

impl<T: Scalar> std::error::Error for TrainError<T> {}

fn stage_name<S: serde::Serializer>(stage: &Stage, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(stage.name())
}

/// CSV with columns `stage, layer, step, train_nmse_db, val_nmse_db, lr`.
pub fn write_training_log<W: std::io::Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

pub fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

/// Default starting mixture: uniform weights, means evenly spaced on
/// `[−2, 2]` (0 for a single component), unit variances.
pub fn init_theta<T: Scalar>(components: usize) -> Result<GaussianMixture<T>> {
    init_theta_scaled(components, 2.0, 1.0)
}

/// Uniform weights, means evenly spaced on `[−span, span]`, common `variance`.
pub fn init_theta_scaled<T: Scalar>(components: usize, span: f64, variance: f64) -> Result<GaussianMixture<T>> {
    if components == 0 {
        return Err(Error::Config { field: "L".into(), reason: "must be at least 1".into() });
    }
    if !(span >= 0.0 && span.is_finite()) || !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::Config { field: "training.init_variance".into(), reason: format!("span {span}, variance {variance}") });
    }
    let l = components;
    let means = (0..l).map(|i| if l == 1 { T::zero() } else { T::of(-span + 2.0 * span * i as f64 / (l - 1) as f64) }).collect();
    GaussianMixture::new(vec![T::of(1.0 / l as f64); l], means, vec![T::of(variance); l])
}

fn mean_db(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        db(values.iter().sum::<f64>() / values.len() as f64)
    }
}

struct Trainer<'a, T: Scalar, S: SampleSource<T>> {
    cfg: &'a TrainConfig,
    a: &'a Array2<T>,
    source: &'a mut S,
    val: Batch<T>,
    rng: ChaCha8Rng,
    log: Vec<LogRow>,
    stages: Vec<StageMetrics>,
}

/// Tracks the best validation value and the patience counter.
struct Progress<P> {
    best: f64,
    best_params: P,
    reference_db: f64,
    stall: usize,
    start: f64,
}

impl<P: Clone> Progress<P> {
    fn new(start: f64, params: &P) -> Self {
        Self { best: start, best_params: params.clone(), reference_db: db(start), stall: 0, start }
    }

    /// Returns true when the stage should stop.
    fn record(&mut self, value: f64, params: &P, min_improvement_db: f64, patience: usize) -> bool {
        if value < self.best {
            self.best = value;
            self.best_params = params.clone();
        }
        if db(value) < self.reference_db - min_improvement_db {
            self.reference_db = db(value);
            self.stall = 0;
        } else {
            self.stall += 1;
        }
        self.stall >= patience
    }
}

impl<'a, T: Scalar, S: SampleSource<T>> Trainer<'a, T, S> {
    fn val_loss(&self, b: &Array2<T>, layers: &[GaussianMixture<T>], depth: usize) -> Result<f64> {
        let tape = forward(b, layers, self.a, self.val.y.view(), depth)?;
        let v = nmse_loss(tape.output().view(), self.val.x.view())?.value.as_f64();
        if !v.is_finite() {
            return Err(Error::Divergence { iter: depth });
        }
        Ok(v)
    }

    fn finish_stage(&mut self, sc: &TrainStageConfig, layer: usize, steps: usize, start: f64, best: f64) {
        log::info!("{} layer {layer} lr {:e}: {steps} steps, val {:.3} dB -> {:.3} dB", sc.stage.name(), sc.learning_rate, db(start), db(best));
        self.stages.push(StageMetrics { stage: sc.stage, layer, learning_rate: sc.learning_rate, steps, start_val_db: db(start), best_val_db: db(best) });
    }

    /// Trains the groups in `mask` by backpropagating through `depth` layers.
    fn full_stage(&mut self, params: &mut ParamVector<T>, mask: &TrainMask, depth: usize, sc: TrainStageConfig) -> Result<()> {
        let scope = BackwardScope { filter: mask.filter, from_layer: mask.lowest_layer() };
        let mut adam = AdamState::new(params, AdamConfig::default());
        let start = self.val_loss(&params.b, &params.decode_layers()?, depth)?;
        let mut progress = Progress::new(start, params);
        let mut recent = Vec::new();
        let mut steps = 0;
        for step in 1..=sc.max_steps {
            steps = step;
            let batch = self.source.draw(self.cfg.batch_size);
            let layers = params.decode_layers()?;
            let tape = forward(&params.b, &layers, self.a, batch.y.view(), depth)?;
            let loss = nmse_loss(tape.output().view(), batch.x.view())?;
            recent.push(loss.value.as_f64());
            let grads = backward(&tape, &params.b, &layers, self.a, loss.seed.view(), scope)?;
            let g = params.chain(&grads, mask);
            adam_update(params, &g, &mut adam, sc.learning_rate, mask)?;
            if step % self.cfg.eval_every == 0 || step == sc.max_steps {
                let v = self.val_loss(&params.b, &params.decode_layers()?, depth)?;
                self.log.push(LogRow { stage: sc.stage, layer: depth, step, train_nmse_db: mean_db(&recent), val_nmse_db: db(v), lr: sc.learning_rate });
                recent.clear();
                if progress.record(v, params, self.cfg.min_improvement_db, sc.patience) {
                    break;
                }
            }
        }
        *params = progress.best_params;
        self.finish_stage(&sc, depth, steps, progress.start, progress.best);
        Ok(())
    }

    /// Trains only the mixture of layer `t` on cached inputs.
    fn new_layer_stage(&mut self, params: &mut ParamVector<T>, t: usize, sc: TrainStageConfig) -> Result<()> {
        let frozen = params.layers[..t - 1].iter().map(LayerParams::decode).collect::<Result<Vec<_>>>()?;
        let pool = self.source.draw(self.cfg.pool_size);
        let (pool_r, pool_s2) = layer_inputs(&params.b, &frozen, self.a, pool.y.view())?;
        let (val_r, val_s2) = layer_inputs(&params.b, &frozen, self.a, self.val.y.view())?;

        let eval = |layer: &LayerParams<T>, r: &Array2<T>, s2: &Array1<T>, x: ArrayView2<'_, T>| -> Result<f64> {
            let gm = layer.decode()?;
            let mut est = Array2::zeros(r.dim());
            let mut der = Array2::zeros(r.dim());
            for i in 0..r.nrows() {
                gm.forward_row(r.row(i), s2[i], est.row_mut(i), der.row_mut(i));
            }
            let v = nmse_loss(est.view(), x)?.value.as_f64();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Divergence { iter: t })
            }
        };

        // single-layer parameter vector so the optimizer state only covers Θ_t
        let mut sub = ParamVector { b: Array2::zeros((0, 0)), layers: vec![params.layers[t - 1].clone()] };
        let mask = TrainMask { filter: false, layers: vec![true] };
        let mut adam = AdamState::new(&sub, AdamConfig::default());
        let start = eval(&sub.layers[0], &val_r, &val_s2, self.val.x.view())?;
        let mut progress = Progress::new(start, &sub);
        let mut recent = Vec::new();
        let mut steps = 0;
        let pool_norm: Vec<T> = pool.x.rows().into_iter().map(|x| x.dot(&x)).collect();
        for step in 1..=sc.max_steps {
            steps = step;
            let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..pool_r.nrows())).collect();
            let kept = idx.iter().filter(|&&i| pool_norm[i] > T::zero()).count();
            if kept == 0 {
                continue;
            }
            let gm = sub.layers[0].decode()?;
            let mut grad = GmGrad::zeros(gm.len());
            let mut value = T::zero();
            let scale = T::one() / T::of(kept as f64);
            for &i in idx.iter().filter(|&&i| pool_norm[i] > T::zero()) {
                let coef = scale / pool_norm[i];
                let mut kernel = GmKernel::new(&gm, pool_s2[i]);
                let mut err = T::zero();
                for (&r, &x) in pool_r.row(i).iter().zip(pool.x.row(i)) {
                    err += kernel.fit_entry(r, x, coef, &mut grad);
                }
                value += err * coef;
            }
            recent.push(value.as_f64());
            let raw = [grad.log_weights, grad.means, grad.variances].concat();
            let mut g = sub.zeros_like();
            g.layers[0] = sub.layers[0].chain(&raw);
            adam_update(&mut sub, &g, &mut adam, sc.learning_rate, &mask)?;
            if step % self.cfg.eval_every == 0 || step == sc.max_steps {
                let v = eval(&sub.layers[0], &val_r, &val_s2, self.val.x.view())?;
                self.log.push(LogRow { stage: sc.stage, layer: t, step, train_nmse_db: mean_db(&recent), val_nmse_db: db(v), lr: sc.learning_rate });
                recent.clear();
                if progress.record(v, &sub, self.cfg.min_improvement_db, sc.patience) {
                    break;
                }
            }
        }
        params.layers[t - 1] = progress.best_params.layers.swap_remove(0);
        self.finish_stage(&sc, t, steps, progress.start, progress.best);
        Ok(())
    }
}

/// Trains a `cfg.t_max`-layer network for measurement matrix `a` starting from
/// `B = Aᵀ` and mixture `theta0`.
// The error carries the last good model by value; training fails at most once.
#[allow(clippy::result_large_err)]
pub fn train<T: Scalar, S: SampleSource<T>>(
    cfg: &TrainConfig,
    a: &Array2<T>,
    source: &mut S,
    theta0: &GaussianMixture<T>,
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    let fail =
        |source: Error, stage: Stage, layer: usize, last_good: Option<LampModel<T>>, log: Vec<LogRow>| TrainError { source, stage, layer, last_good, log };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, Stage::LearnB, 0, None, Vec::new()));
    }
    let val = source.draw(cfg.val_size);
    let mut tr = Trainer { cfg, a, source, val, rng: ChaCha8Rng::seed_from_u64(cfg.seed), log: Vec::new(), stages: Vec::new() };
    let mut params = ParamVector { b: a.t().as_standard_layout().to_owned(), layers: vec![LayerParams::from_mixture(theta0)] };
    let mut last_good: Option<LampModel<T>> = None;

    let sc = cfg.stage(Stage::LearnB, cfg.learn_rate);
    let mask = TrainMask { filter: true, layers: vec![false] };
    if let Err(e) = tr.full_stage(&mut params, &mask, 1, sc) {
        return Err(fail(e, Stage::LearnB, 1, None, tr.log));
    }

    for t in 1..=cfg.t_max {
        if t > 1 {
            let prev = params.layers[t - 2].clone();
            params.layers.push(prev);
        }
        if cfg.learn_denoiser {
            let sc = cfg.stage(Stage::LearnNewLayer, cfg.learn_rate);
            if let Err(e) = tr.new_layer_stage(&mut params, t, sc) {
                return Err(fail(e, Stage::LearnNewLayer, t, last_good, tr.log));
            }
        }
        let mask = TrainMask { filter: true, layers: vec![cfg.learn_denoiser; t] };
        for &lr in &cfg.refine_rates {
            let sc = cfg.stage(Stage::RefineAll, lr);
            if let Err(e) = tr.full_stage(&mut params, &mask, t, sc) {
                return Err(fail(e, Stage::RefineAll, t, last_good, tr.log));
            }
        }
        match params.to_model() {
            Ok(m) => last_good = Some(m),
            Err(e) => return Err(fail(e, Stage::RefineAll, t, last_good, tr.log)),
        }
    }

    let model = last_good.expect("t_max ≥ 1");
    let layer_val_db = match model.forward(a, tr.val.y.view(), cfg.t_max) {
        Ok(tape) => (1..=cfg.t_max).map(|t| nmse_loss(tape.estimate(t).view(), tr.val.x.view()).map(|l| db(l.value.as_f64())).unwrap_or(f64::NAN)).collect(),
        Err(e) => return Err(fail(e, Stage::RefineAll, cfg.t_max, Some(model), tr.log)),
    };
    Ok(TrainOutcome { model, stages: tr.stages, log: tr.log, layer_val_db })
}
