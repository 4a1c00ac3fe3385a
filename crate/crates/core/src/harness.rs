//! Problem generation, the NMSE metric and Monte-Carlo evaluation.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::amp::{run_amp_batch, state_evolution, Denoiser, SoftThreshold};
use crate::config::{ExperimentConfig, PriorSpec};
use crate::error::{Error, Result};
use crate::gm_prior::{gm_sample, GaussianMixture};
use crate::scalar::Scalar;
use crate::unfolded::{train, Batch, LampModel, SampleSource, TrainError, TrainOutcome};

/// dB value reported for an exactly zero error.
pub const NMSE_DB_FLOOR: f64 = -320.0;

/// Trials per independently seeded evaluation chunk. Fixed so results do not
/// depend on the worker count.
pub const TRIAL_CHUNK: usize = 250;

/// Candidate soft-threshold multipliers for the ℓ1 baseline.
pub fn l1_lambda_grid() -> Vec<f64> {
    (1..=30).map(|k| k as f64 / 10.0).collect()
}

pub fn to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (10.0 * ratio.log10()).max(NMSE_DB_FLOOR)
    } else {
        NMSE_DB_FLOOR
    }
}

/// `‖x̂ − x‖² / ‖x‖²` and its dB value.
pub fn nmse<T: Scalar>(x_hat: ArrayView1<'_, T>, x: ArrayView1<'_, T>) -> Result<(f64, f64)> {
    if x_hat.len() != x.len() {
        return Err(Error::DimensionMismatch(format!("{} estimates for {} entries", x_hat.len(), x.len())));
    }
    let norm: f64 = x.iter().map(|v| v.as_f64().powi(2)).sum();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let err: f64 = x_hat.iter().zip(x).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    let ratio = err / norm;
    Ok((ratio, to_db(ratio)))
}

/// `σ_w² = (ε/δ) σ_x² / SNR`.
pub fn noise_variance(snr_db: f64, epsilon: f64, delta: f64, sigma_x_sq: f64) -> f64 {
    epsilon / delta * sigma_x_sq / 10f64.powf(snr_db / 10.0)
}

/// `m × N` matrix with i.i.d. `N(0, 1/m)` entries.
pub fn gen_matrix<T: Scalar>(m: usize, n: usize, seed: u64) -> Result<Array2<T>> {
    if m == 0 || m >= n {
        return Err(Error::DimensionMismatch(format!("need 0 < m < N, got m = {m}, N = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (m as f64).sqrt();
    Ok(Array2::from_shape_simple_fn((m, n), || {
        let g: f64 = StandardNormal.sample(&mut rng);
        T::of(g * scale)
    }))
}

pub fn gen_signal<T: Scalar, R: Rng + ?Sized>(prior: &PriorSpec, n: usize, rng: &mut R) -> Result<Array1<T>> {
    Ok(gm_sample(&prior.mixture()?.cast(), n, rng))
}

/// Seeded stream of `(x, y = A x + w)` pairs for a fixed `A`.
#[derive(Debug, Clone)]
pub struct ProblemStream<T: Scalar> {
    a: Array2<T>,
    prior: GaussianMixture<T>,
    noise_std: f64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ProblemStream<T> {
    pub fn new(a: Array2<T>, prior: GaussianMixture<T>, noise_var: f64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { a, prior, noise_std: noise_var.sqrt(), rng }
    }

    /// Draws `count` samples, also returning the noise rows.
    pub fn draw_with_noise(&mut self, count: usize) -> (Batch<T>, Array2<T>) {
        let (m, n) = self.a.dim();
        let mut x = Array2::zeros((count, n));
        for mut row in x.rows_mut() {
            row.assign(&gm_sample(&self.prior, n, &mut self.rng));
        }
        let std = self.noise_std;
        let rng = &mut self.rng;
        let w = Array2::from_shape_simple_fn((count, m), || {
            let g: f64 = StandardNormal.sample(rng);
            T::of(g * std)
        });
        let y = x.dot(&self.a.t()) + &w;
        (Batch { x, y }, w)
    }
}

impl<T: Scalar> SampleSource<T> for ProblemStream<T> {
    fn draw(&mut self, count: usize) -> Batch<T> {
        self.draw_with_noise(count).0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Algorithm<'a, T: Scalar> {
    /// AMP with soft thresholding at `lambda · σ`.
    AmpL1 {
        lambda: T,
    },
    /// AMP with the true prior's MMSE denoiser.
    AmpMatched,
    LgmAmp(&'a LampModel<T>),
    /// Learned `B` with the true prior's denoiser in every layer.
    LampMatched(&'a LampModel<T>),
}

impl<T: Scalar> Algorithm<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::AmpL1 { .. } => "amp_l1",
            Algorithm::AmpMatched => "amp_matched",
            Algorithm::LgmAmp(_) => "lgm_amp",
            Algorithm::LampMatched(_) => "lamp_matched",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    /// Mean of the per-trial linear NMSE.
    pub nmse_mean: f64,
    pub nmse_db_mean: f64,
    /// Standard error of `nmse_db_mean` (delta method).
    pub nmse_db_stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub algorithm: String,
    pub layers: Vec<LayerStats>,
    pub trials: usize,
    pub diverged: usize,
    /// Trials whose true signal was exactly zero.
    pub zero_signal: usize,
}

impl McResult {
    pub fn db(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.nmse_db_mean).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub algorithm: String,
    pub prior: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub snr_db: f64,
    pub layer: usize,
    pub nmse_db_mean: f64,
    pub nmse_db_stderr: f64,
    pub diverged_count: usize,
    pub trials: usize,
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SePoint {
    pub layer: usize,
    pub tau_sq: f64,
    pub nmse_db_predicted: f64,
}

pub fn write_se_csv<W: Write>(points: &[SePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

/// Per-layer sums over one chunk of trials.
#[derive(Debug, Clone)]
struct Accum {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: usize,
    diverged: usize,
    zero_signal: usize,
}

impl Accum {
    fn new(depth: usize) -> Self {
        Self { sum: vec![0.0; depth], sum_sq: vec![0.0; depth], count: 0, diverged: 0, zero_signal: 0 }
    }

    fn merge(&mut self, o: &Accum) {
        for t in 0..self.sum.len() {
            self.sum[t] += o.sum[t];
            self.sum_sq[t] += o.sum_sq[t];
        }
        self.count += o.count;
        self.diverged += o.diverged;
        self.zero_signal += o.zero_signal;
    }
}

/// Filter matrix and per-layer denoisers of one algorithm.
type LayerStack<'m, T> = (Array2<T>, Vec<&'m dyn Denoiser<T>>);

/// One experiment: configuration, its fixed measurement matrix and prior.
#[derive(Debug, Clone)]
pub struct Experiment<T: Scalar> {
    pub config: ExperimentConfig,
    pub a: Array2<T>,
    pub prior: GaussianMixture<T>,
    pub noise_var: f64,
}

impl<T: Scalar> Experiment<T> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let a = gen_matrix(config.m(), config.n, config.seeds.matrix)?;
        let prior = config.prior.mixture()?.cast();
        let noise_var = config.noise_var()?;
        Ok(Self { config, a, prior, noise_var })
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    /// Training data stream (also used for held-out tuning data on stream 1).
    pub fn train_stream(&self, stream: u64) -> ProblemStream<T> {
        ProblemStream::new(self.a.clone(), self.prior.clone(), self.noise_var, self.config.seeds.train, stream)
    }

    /// Evaluation stream for trial chunk `chunk`.
    pub fn eval_stream(&self, chunk: u64) -> ProblemStream<T> {
        ProblemStream::new(self.a.clone(), self.prior.clone(), self.noise_var, self.config.seeds.eval, chunk)
    }

    /// Trains LGM-AMP from the default initial mixture, or, when the config
    /// disables denoiser learning, learned AMP with the true prior.
    #[allow(clippy::result_large_err)]
    pub fn train(&self) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
        let cfg = self.config.train_config();
        let theta0 = if cfg.learn_denoiser { self.config.initial_mixture().map(|g| g.cast()) } else { Ok(self.prior.clone()) };
        let theta0 = theta0.map_err(|e| TrainError { source: e, stage: crate::unfolded::Stage::LearnB, layer: 0, last_good: None, log: Vec::new() })?;
        let mut stream = self.train_stream(0);
        train(&cfg, &self.a, &mut stream, &theta0)
    }

    /// Effective SNR check: `(E‖y‖² / E‖w‖², E‖Ax‖² / E‖w‖²)` over `trials` draws.
    pub fn measured_snr(&self, trials: usize) -> (f64, f64) {
        let mut stream = self.eval_stream(u64::MAX);
        let (mut yy, mut ww, mut ax) = (0.0, 0.0, 0.0);
        let mut left = trials;
        while left > 0 {
            let c = left.min(TRIAL_CHUNK);
            let (batch, w) = stream.draw_with_noise(c);
            let sq = |a: &Array2<T>| a.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            yy += sq(&batch.y);
            ww += sq(&w);
            ax += sq(&(&batch.y - &w));
            left -= c;
        }
        (yy / ww, ax / ww)
    }

    fn layer_stack<'m>(&self, alg: &Algorithm<'m, T>, depth: usize, soft: &'m SoftThreshold<T>, prior: &'m GaussianMixture<T>) -> Result<LayerStack<'m, T>>
    where
        T: 'm,
    {
        let check = |model: &LampModel<T>| -> Result<()> {
            if model.b.dim() != (self.n(), self.m()) {
                return Err(Error::DimensionMismatch(format!("model filter is {:?} but the experiment has N = {}, m = {}", model.b.dim(), self.n(), self.m())));
            }
            if depth > model.t_max() {
                return Err(Error::DimensionMismatch(format!("depth {depth} exceeds the model's {} layers", model.t_max())));
            }
            Ok(())
        };
        Ok(match alg {
            Algorithm::AmpL1 { .. } => (self.a.t().to_owned(), vec![soft as &dyn Denoiser<T>; depth]),
            Algorithm::AmpMatched => (self.a.t().to_owned(), vec![prior as &dyn Denoiser<T>; depth]),
            Algorithm::LgmAmp(model) | Algorithm::LampMatched(model) => {
                check(model)?;
                (model.b.clone(), model.layers[..depth].iter().map(|g| g as &dyn Denoiser<T>).collect())
            }
        })
    }

    fn run_chunk(&self, b: &Array2<T>, layers: &[&dyn Denoiser<T>], batch: &Batch<T>) -> Result<Accum> {
        let run = run_amp_batch(&self.a, b, batch.y.view(), layers)?;
        let mut acc = Accum::new(layers.len());
        for i in 0..batch.x.nrows() {
            if run.diverged[i].is_some() {
                acc.diverged += 1;
                continue;
            }
            let x = batch.x.row(i);
            if x.iter().all(|v| *v == T::zero()) {
                acc.zero_signal += 1;
                continue;
            }
            for (t, est) in run.estimates.iter().enumerate() {
                let (ratio, _) = nmse(est.row(i), x)?;
                acc.sum[t] += ratio;
                acc.sum_sq[t] += ratio * ratio;
            }
            acc.count += 1;
        }
        Ok(acc)
    }

    /// Per-layer NMSE over `trials` fresh draws with the experiment's `A`.
    pub fn monte_carlo(&self, alg: &Algorithm<'_, T>, trials: usize, depth: usize) -> Result<McResult> {
        if trials == 0 || depth == 0 {
            return Err(Error::Empty);
        }
        let soft = SoftThreshold { lambda: if let Algorithm::AmpL1 { lambda } = alg { *lambda } else { T::zero() } };
        let prior = self.prior.clone();
        let (b, _) = self.layer_stack(alg, depth, &soft, &prior)?;
        let chunks = trials.div_ceil(TRIAL_CHUNK);
        let parts: Vec<Accum> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let (_, layers) = self.layer_stack(alg, depth, &soft, &prior)?;
                let count = TRIAL_CHUNK.min(trials - c * TRIAL_CHUNK);
                let batch = self.eval_stream(c as u64).draw(count);
                self.run_chunk(&b, &layers, &batch)
            })
            .collect::<Result<_>>()?;
        let mut total = Accum::new(depth);
        for p in &parts {
            total.merge(p);
        }
        let n = total.count as f64;
        let layers = (0..depth)
            .map(|t| {
                let mean = if total.count > 0 { total.sum[t] / n } else { f64::NAN };
                let var = if total.count > 1 { ((total.sum_sq[t] - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
                let stderr = if mean > 0.0 { 10.0 / std::f64::consts::LN_10 * (var / n).sqrt() / mean } else { 0.0 };
                LayerStats { layer: t + 1, nmse_mean: mean, nmse_db_mean: if mean.is_nan() { mean } else { to_db(mean) }, nmse_db_stderr: stderr }
            })
            .collect();
        if total.diverged > 0 {
            log::warn!("{}: {} of {trials} trials diverged and were excluded", alg.name(), total.diverged);
        }
        Ok(McResult { algorithm: alg.name().into(), layers, trials, diverged: total.diverged, zero_signal: total.zero_signal })
    }

    /// Picks the soft-threshold multiplier from `grid` minimizing the final
    /// layer NMSE on `samples` held-out training draws.
    pub fn tune_l1_lambda(&self, grid: &[f64], samples: usize) -> Result<f64> {
        if grid.is_empty() || samples == 0 {
            return Err(Error::Empty);
        }
        let batch = self.train_stream(1).draw(samples);
        let bt = self.a.t().to_owned();
        let depth = self.config.t_max;
        let scores: Vec<(f64, f64)> = grid
            .par_iter()
            .map(|&lambda| {
                let soft = SoftThreshold { lambda: T::of(lambda) };
                let layers = vec![&soft as &dyn Denoiser<T>; depth];
                let acc = self.run_chunk(&bt, &layers, &batch)?;
                // diverged trials count as total failure
                let score = (acc.sum[depth - 1] + acc.diverged as f64) / (acc.count + acc.diverged).max(1) as f64;
                Ok((lambda, score))
            })
            .collect::<Result<_>>()?;
        let best = scores.iter().fold((grid[0], f64::INFINITY), |best, &(l, s)| if s < best.1 { (l, s) } else { best });
        Ok(best.0)
    }

    /// The configured multiplier, or one tuned on held-out data.
    pub fn l1_lambda(&self) -> Result<f64> {
        match self.config.eval.l1_lambda {
            Some(l) => Ok(l),
            None => self.tune_l1_lambda(&l1_lambda_grid(), 1000),
        }
    }

    /// State-evolution prediction of matched AMP, one point per layer.
    pub fn state_evolution(&self, depth: usize) -> Result<Vec<SePoint>> {
        let prior = self.config.prior.mixture()?;
        let power = prior.second_moment();
        let taus = state_evolution(&prior, self.config.delta, self.noise_var, depth)?;
        taus.iter()
            .enumerate()
            .map(|(t, &tau_sq)| {
                let mse = crate::amp::mmse(&prior, tau_sq)?;
                Ok(SePoint { layer: t + 1, tau_sq, nmse_db_predicted: to_db(mse / power) })
            })
            .collect()
    }

    pub fn result_rows(&self, mc: &McResult) -> Result<Vec<ResultRow>> {
        let epsilon = self.config.prior.epsilon()?;
        Ok(mc
            .layers
            .iter()
            .map(|l| ResultRow {
                algorithm: mc.algorithm.clone(),
                prior: self.config.prior.kind().into(),
                n: self.config.n,
                delta: self.config.delta,
                epsilon,
                snr_db: self.config.snr_db,
                layer: l.layer,
                nmse_db_mean: l.nmse_db_mean,
                nmse_db_stderr: l.nmse_db_stderr,
                diverged_count: mc.diverged,
                trials: mc.trials,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amp::{run_amp, LinearModel};
    use ndarray::array;

    fn cfg(text_prior: &str, n: usize, delta: f64, snr: f64, t_max: usize) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!("N = {n}\ndelta = {delta}\nsnr_db = {snr}\nL = 2\nT_max = {t_max}\n[prior]\n{text_prior}\n")).unwrap()
    }

    const BG: &str = "kind = \"bernoulli_gaussian\"\nepsilon = 0.1\nsigma_x_sq = 1.0";

    #[test]
    fn nmse_cases() {
        let x = array![2.0, 0.0, 0.0];
        assert_eq!(nmse(x.view(), x.view()).unwrap(), (0.0, NMSE_DB_FLOOR));
        assert_eq!(nmse(Array1::zeros(3).view(), x.view()).unwrap(), (1.0, 0.0));
        let (r, d) = nmse(array![1.0, 0.0, 0.0].view(), x.view()).unwrap();
        assert_eq!(r, 0.25);
        assert!((d - -6.020599913279624).abs() < 1e-12);
        assert_eq!(nmse(x.view(), Array1::<f64>::zeros(3).view()).unwrap_err(), Error::ZeroNorm);
    }

    #[test]
    fn noise_variance_cases() {
        assert_eq!(noise_variance(0.0, 0.3, 0.3, 1.0), 1.0);
        assert!((noise_variance(20.0, 0.1, 0.5, 1.0) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn matrix_statistics() {
        let a = gen_matrix::<f64>(250, 500, 7).unwrap();
        assert_eq!(a, gen_matrix::<f64>(250, 500, 7).unwrap());
        let col_norm = a.columns().into_iter().map(|c| c.dot(&c)).sum::<f64>() / 500.0;
        assert!((col_norm - 1.0).abs() < 0.05, "{col_norm}");
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var * 250.0 - 1.0).abs() < 0.05, "{var}");
        assert!(gen_matrix::<f64>(5, 5, 0).is_err());
    }

    #[test]
    fn signal_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bg = PriorSpec::BernoulliGaussian { epsilon: 0.1, sigma_x_sq: 1.0 };
        let x: Array1<f64> = gen_signal(&bg, 1_000_000, &mut rng).unwrap();
        let frac = x.iter().filter(|v| **v != 0.0).count() as f64 / 1e6;
        assert!((frac - 0.1).abs() < 0.003, "{frac}");

        let binary = PriorSpec::Discrete { alphabet: vec![-1.0, 1.0], probs: vec![0.5, 0.5] };
        let x: Array1<f64> = gen_signal(&binary, 10_000, &mut rng).unwrap();
        assert!(x.iter().all(|v| *v == 1.0 || *v == -1.0));

        let ternary = PriorSpec::Discrete { alphabet: vec![-1.0, 0.0, 1.0], probs: vec![0.05, 0.9, 0.05] };
        let x: Array1<f64> = gen_signal(&ternary, 1_000_000, &mut rng).unwrap();
        let zeros = x.iter().filter(|v| **v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.9).abs() < 0.003, "{zeros}");
    }

    #[test]
    fn single_trial_is_a_seeded_run() {
        let exp = Experiment::<f64>::new(cfg(BG, 100, 0.5, 20.0, 5)).unwrap();
        let mc = exp.monte_carlo(&Algorithm::AmpMatched, 1, 5).unwrap();
        let batch = exp.eval_stream(0).draw(1);
        let model = LinearModel::new(exp.a.clone(), batch.y.row(0).to_owned(), exp.noise_var).unwrap();
        let traj = run_amp(&model, &exp.prior, 5, None).unwrap();
        for t in 0..5 {
            let (ratio, _) = nmse(traj.states[t].x_hat.view(), batch.x.row(0)).unwrap();
            assert!((mc.layers[t].nmse_mean - ratio).abs() <= 1e-12 * ratio.max(1e-300), "layer {t}");
        }
        assert_eq!(mc.layers[0].nmse_db_stderr, 0.0);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let exp = Experiment::<f64>::new(cfg(BG, 60, 0.5, 20.0, 3)).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| exp.monte_carlo(&Algorithm::AmpMatched, 700, 3).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn untrained_model_matches_classical_amp() {
        let exp = Experiment::<f64>::new(cfg(BG, 80, 0.5, 20.0, 4)).unwrap();
        let model = LampModel::untrained(&exp.a, &exp.prior, 4);
        let a = exp.monte_carlo(&Algorithm::LgmAmp(&model), 300, 4).unwrap();
        let b = exp.monte_carlo(&Algorithm::AmpMatched, 300, 4).unwrap();
        for (u, v) in a.layers.iter().zip(&b.layers) {
            assert!((u.nmse_mean - v.nmse_mean).abs() < 1e-12);
        }
        let wrong = LampModel::untrained(&gen_matrix::<f64>(30, 80, 1).unwrap(), &exp.prior, 4);
        assert!(matches!(exp.monte_carlo(&Algorithm::LgmAmp(&wrong), 10, 4), Err(Error::DimensionMismatch(_))));
        assert!(exp.monte_carlo(&Algorithm::LgmAmp(&model), 10, 5).is_err());
    }

    #[test]
    fn snr_calibration_small() {
        let exp = Experiment::<f64>::new(cfg(BG, 200, 0.5, 20.0, 1)).unwrap();
        let (yw, axw) = exp.measured_snr(2000);
        assert!((axw / 100.0 - 1.0).abs() < 0.05, "{axw}");
        assert!((yw - axw - 1.0).abs() < 0.05, "{yw}");
    }

    #[test]
    fn l1_tuning_picks_interior_value() {
        let exp = Experiment::<f64>::new(cfg(BG, 200, 0.5, 20.0, 6)).unwrap();
        let lambda = exp.tune_l1_lambda(&l1_lambda_grid(), 200).unwrap();
        assert!(lambda > 0.1 && lambda < 3.0, "{lambda}");
    }

    #[test]
    fn se_curve_is_monotone() {
        let exp = Experiment::<f64>::new(cfg(BG, 500, 0.5, 20.0, 10)).unwrap();
        let se = exp.state_evolution(10).unwrap();
        assert_eq!(se.len(), 10);
        for w in se.windows(2) {
            assert!(w[1].nmse_db_predicted <= w[0].nmse_db_predicted + 1e-12);
        }
    }

    #[test]
    fn csv_schema() {
        let exp = Experiment::<f64>::new(cfg(BG, 60, 0.5, 20.0, 2)).unwrap();
        let mc = exp.monte_carlo(&Algorithm::AmpL1 { lambda: 1.0 }, 5, 2).unwrap();
        let mut out = Vec::new();
        write_results_csv(&exp.result_rows(&mc).unwrap(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "algorithm,prior,N,delta,epsilon,snr_db,layer,nmse_db_mean,nmse_db_stderr,diverged_count,trials");
        assert_eq!(lines.count(), 2);
    }
}
