//! Classical AMP with pluggable scalar denoisers, and its state evolution.
//!
//! One iteration, starting from `(x̂, z, σ)`:
//!
//! ```text
//! r  = x̂ + B z                       (B = Aᵀ for classical AMP)
//! x̂⁺ = η(r; σ²),  b⁺ = Σ η'(r) / m
//! z⁺ = y − A x̂⁺ + b⁺ z
//! σ⁺ = ‖z⁺‖₂ / √m
//! ```
//!
//! The Onsager coefficient multiplying `z` is the one produced by the same
//! denoiser call that produced `x̂⁺`.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::gm_prior::{denoise, DenoiserOutput, GaussianMixture};
use crate::quadrature::{integrate_pieces, QuadOptions};
use crate::scalar::Scalar;

/// σ grows beyond this multiple of its initial value → divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// `y = A x + w` with `A` of shape `m × N`.
#[derive(Debug, Clone)]
pub struct LinearModel<T: Scalar> {
    a: Array2<T>,
    y: Array1<T>,
    noise_var: T,
}

impl<T: Scalar> LinearModel<T> {
    pub fn new(a: Array2<T>, y: Array1<T>, noise_var: T) -> Result<Self> {
        let (m, n) = a.dim();
        if m == 0 || m >= n {
            return Err(Error::DimensionMismatch(format!("need 0 < m < N, got m = {m}, N = {n}")));
        }
        if y.len() != m {
            return Err(Error::DimensionMismatch(format!("y has {} entries, A has {m} rows", y.len())));
        }
        if let Some(i) = a.iter().chain(y.iter()).position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
        if !(noise_var >= T::zero()) {
            return Err(Error::InvalidNoise(noise_var.as_f64()));
        }
        Ok(Self { a, y, noise_var })
    }

    pub fn a(&self) -> &Array2<T> {
        &self.a
    }

    pub fn y(&self) -> &Array1<T> {
        &self.y
    }

    pub fn noise_var(&self) -> T {
        self.noise_var
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmpState<T: Scalar> {
    pub x_hat: Array1<T>,
    pub z: Array1<T>,
    /// Onsager coefficient applied when `z` was formed.
    pub onsager: T,
    pub sigma: T,
    pub iter: usize,
}

impl<T: Scalar> AmpState<T> {
    /// `x̂ = 0`, `z = y`, `b = 0`.
    pub fn initial(model: &LinearModel<T>) -> Self {
        Self { x_hat: Array1::zeros(model.n()), z: model.y.clone(), onsager: T::zero(), sigma: effective_noise(model.y.view()).unwrap_or(T::zero()), iter: 0 }
    }
}

/// Component-wise denoiser `(r, σ²) ↦ (η(r), η'(r), Σ η' / m)`.
pub trait Denoiser<T: Scalar> {
    fn denoise(&self, r: ArrayView1<'_, T>, sigma_sq: T, m: usize) -> Result<DenoiserOutput<T>>;
}

impl<T: Scalar> Denoiser<T> for GaussianMixture<T> {
    fn denoise(&self, r: ArrayView1<'_, T>, sigma_sq: T, m: usize) -> Result<DenoiserOutput<T>> {
        denoise(r, sigma_sq, self, m)
    }
}

impl<T: Scalar, F> Denoiser<T> for F
where
    F: Fn(ArrayView1<'_, T>, T, usize) -> Result<DenoiserOutput<T>>,
{
    fn denoise(&self, r: ArrayView1<'_, T>, sigma_sq: T, m: usize) -> Result<DenoiserOutput<T>> {
        self(r, sigma_sq, m)
    }
}

/// Soft thresholding at `λ σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftThreshold<T> {
    pub lambda: T,
}

impl<T: Scalar> Denoiser<T> for SoftThreshold<T> {
    fn denoise(&self, r: ArrayView1<'_, T>, sigma_sq: T, m: usize) -> Result<DenoiserOutput<T>> {
        Ok(soft_threshold_denoiser(r, sigma_sq, self.lambda, m))
    }
}

pub fn soft_threshold_denoiser<T: Scalar>(r: ArrayView1<'_, T>, sigma_sq: T, lambda: T, m: usize) -> DenoiserOutput<T> {
    let thr = lambda * sigma_sq.max(T::zero()).sqrt();
    let est = r.mapv(|v| {
        if v > thr {
            v - thr
        } else if v < -thr {
            v + thr
        } else {
            T::zero()
        }
    });
    let der = r.mapv(|v| if v.abs() > thr { T::one() } else { T::zero() });
    DenoiserOutput::new(est, der, m)
}

/// `‖z‖₂ / √m`.
pub fn effective_noise<T: Scalar>(z: ArrayView1<'_, T>) -> Result<T> {
    if z.is_empty() {
        return Err(Error::Empty);
    }
    Ok((z.dot(&z) / T::of(z.len() as f64)).sqrt())
}

/// σ² handed to the denoiser. An exactly-zero residual is a fixed point; the
/// smallest positive value keeps the mixture denoiser's σ² > 0 contract.
#[inline]
pub(crate) fn denoiser_noise<T: Scalar>(sigma_sq: T) -> T {
    sigma_sq.max(T::min_positive_value())
}

/// One AMP iteration. `b` is the `N × m` filter; `None` means `Aᵀ`.
pub fn amp_step<T: Scalar, D: Denoiser<T> + ?Sized>(state: &AmpState<T>, model: &LinearModel<T>, denoiser: &D, b: Option<&Array2<T>>) -> Result<AmpState<T>> {
    let (m, n) = model.a.dim();
    if state.x_hat.len() != n || state.z.len() != m {
        return Err(Error::DimensionMismatch(format!("state has x̂ of length {} and z of length {}, model is {m}×{n}", state.x_hat.len(), state.z.len())));
    }
    let filtered = match b {
        Some(b) => {
            if b.dim() != (n, m) {
                return Err(Error::DimensionMismatch(format!("B is {:?}, expected ({n}, {m})", b.dim())));
            }
            b.dot(&state.z)
        }
        None => model.a.t().dot(&state.z),
    };
    let iter = state.iter + 1;
    let r = &state.x_hat + &filtered;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iter });
    }
    let out = denoiser.denoise(r.view(), denoiser_noise(state.sigma * state.sigma), m).map_err(|e| match e {
        Error::NonFiniteInput(_) | Error::InvalidNoise(_) => Error::Divergence { iter },
        e => e,
    })?;
    let mut z = &model.y - &model.a.dot(&out.estimate);
    z.scaled_add(out.onsager, &state.z);
    let sigma = effective_noise(z.view())?;
    if !sigma.is_finite() || !out.onsager.is_finite() || out.estimate.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iter });
    }
    Ok(AmpState { x_hat: out.estimate, z, onsager: out.onsager, sigma, iter })
}

#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    /// States after iterations `1..=T` (fewer if stopped early).
    pub states: Vec<AmpState<T>>,
    /// Iteration at which the divergence guard tripped.
    pub diverged_at: Option<usize>,
}

/// Runs `t` iterations from the standard initial state.
pub fn run_amp<T: Scalar, D: Denoiser<T> + ?Sized>(model: &LinearModel<T>, denoiser: &D, t: usize, b: Option<&Array2<T>>) -> Result<Trajectory<T>> {
    if t == 0 {
        return Err(Error::Empty);
    }
    let init = AmpState::initial(model);
    let limit = init.sigma * T::of(DIVERGENCE_FACTOR);
    let guard = init.sigma > T::zero();
    let mut states: Vec<AmpState<T>> = Vec::with_capacity(t);
    let mut diverged_at = None;
    for _ in 0..t {
        let next = amp_step(states.last().unwrap_or(&init), model, denoiser, b)?;
        let blown = guard && next.sigma > limit;
        let iter = next.iter;
        states.push(next);
        if blown {
            log::warn!("AMP diverged at iteration {iter}");
            diverged_at = Some(iter);
            break;
        }
    }
    Ok(Trajectory { states, diverged_at })
}

/// Writes `iter,sigma[,nmse]` rows.
pub fn write_trajectory_csv<T: Scalar, W: Write>(mut w: W, traj: &Trajectory<T>, truth: Option<ArrayView1<'_, T>>) -> std::io::Result<()> {
    match truth {
        Some(_) => writeln!(w, "iter,sigma,nmse")?,
        None => writeln!(w, "iter,sigma")?,
    }
    for s in &traj.states {
        match truth {
            Some(x) => {
                let err = &s.x_hat - &x;
                let nmse = err.dot(&err).as_f64() / x.dot(&x).as_f64();
                writeln!(w, "{},{},{}", s.iter, s.sigma.as_f64(), nmse)?;
            }
            None => writeln!(w, "{},{}", s.iter, s.sigma.as_f64())?,
        }
    }
    Ok(())
}

/// Batched unrolled recursion over independent observation rows.
#[derive(Debug, Clone)]
pub struct BatchRun<T: Scalar> {
    /// `estimates[t]` holds x̂ after layer `t + 1`, one row per observation.
    pub estimates: Vec<Array2<T>>,
    /// `sigmas[t]` is the σ fed to layer `t + 1`.
    pub sigmas: Vec<Array1<T>>,
    /// Layer at which each row diverged; diverged rows are zeroed afterwards.
    pub diverged: Vec<Option<usize>>,
}

/// Runs `layers.len()` AMP iterations on every row of `y` (`batch × m`),
/// sharing `A` and the filter `b` (`N × m`). Rows that produce non-finite
/// values or trip the σ guard are flagged rather than failing the batch.
pub fn run_amp_batch<T: Scalar>(a: &Array2<T>, b: &Array2<T>, y: ArrayView2<'_, T>, layers: &[&dyn Denoiser<T>]) -> Result<BatchRun<T>> {
    let (m, n) = a.dim();
    if b.dim() != (n, m) || y.ncols() != m {
        return Err(Error::DimensionMismatch(format!("A is {:?}, B is {:?}, y rows have {} entries", a.dim(), b.dim(), y.ncols())));
    }
    let batch = y.nrows();
    let bt = b.t();
    let mut x = Array2::<T>::zeros((batch, n));
    let mut z = y.to_owned();
    let mut sigma: Array1<T> = z.rows().into_iter().map(|row| effective_noise(row).unwrap()).collect();
    let limit = sigma.mapv(|s| s * T::of(DIVERGENCE_FACTOR));
    let mut diverged: Vec<Option<usize>> = vec![None; batch];
    let mut estimates = Vec::with_capacity(layers.len());
    let mut sigmas = Vec::with_capacity(layers.len());
    for (t, layer) in layers.iter().enumerate() {
        let iter = t + 1;
        sigmas.push(sigma.clone());
        let r = &x + &z.dot(&bt);
        let mut onsager = Array1::<T>::zeros(batch);
        for i in 0..batch {
            if diverged[i].is_some() {
                continue;
            }
            match layer.denoise(r.row(i), denoiser_noise(sigma[i] * sigma[i]), m) {
                Ok(out) if out.estimate.iter().all(|v| v.is_finite()) && out.onsager.is_finite() => {
                    x.row_mut(i).assign(&out.estimate);
                    onsager[i] = out.onsager;
                }
                _ => diverged[i] = Some(iter),
            }
        }
        let mut z_next = y.to_owned() - x.dot(&a.t());
        z_next += &(&z * &onsager.view().insert_axis(Axis(1)));
        z = z_next;
        for i in 0..batch {
            if diverged[i].is_none() {
                sigma[i] = effective_noise(z.row(i)).unwrap();
                let s = sigma[i];
                if !s.is_finite() || (limit[i] > T::zero() && s > limit[i]) {
                    diverged[i] = Some(iter);
                }
            }
            if diverged[i].is_some() {
                x.row_mut(i).fill(T::zero());
                z.row_mut(i).fill(T::zero());
                sigma[i] = T::zero();
            }
        }
        estimates.push(x.clone());
    }
    Ok(BatchRun { estimates, sigmas, diverged })
}

/// `E[(x − η(x + τ g))²]` for `x ~ prior`, `g ~ N(0, 1)` and the prior's own
/// MMSE denoiser, as `∫ p_r(r) Var[x | r] dr` by adaptive quadrature.
pub fn mmse(prior: &GaussianMixture<f64>, tau_sq: f64) -> Result<f64> {
    if !(tau_sq > 0.0) || !tau_sq.is_finite() {
        return Err(Error::InvalidNoise(tau_sq));
    }
    let l = prior.len();
    let w = prior.weights();
    let mu = prior.means();
    let v = prior.variances();
    let c: Vec<f64> = v.iter().map(|&v| v + tau_sq).collect();
    let mut breaks = Vec::with_capacity(3 * l);
    for k in 0..l {
        let half = 10.0 * c[k].sqrt();
        breaks.extend([mu[k] - half, mu[k], mu[k] + half]);
    }
    let mut logs = vec![0.0; l];
    let mut gam = vec![0.0; l];
    let integrand = |r: f64| {
        let mut max = f64::NEG_INFINITY;
        for k in 0..l {
            let d = r - mu[k];
            logs[k] = w[k].ln() - 0.5 * (2.0 * std::f64::consts::PI * c[k]).ln() - 0.5 * d * d / c[k];
            max = max.max(logs[k]);
        }
        let mut s = 0.0;
        for x in logs.iter() {
            s += (x - max).exp();
        }
        let density = max.exp() * s;
        let mut eta = 0.0;
        for k in 0..l {
            gam[k] = if v[k] == 0.0 { mu[k] } else { (r * v[k] + mu[k] * tau_sq) / c[k] };
            eta += (logs[k] - max).exp() / s * gam[k];
        }
        let mut var = 0.0;
        for k in 0..l {
            let p = (logs[k] - max).exp() / s;
            var += p * (v[k] * tau_sq / c[k] + (gam[k] - eta).powi(2));
        }
        density * var
    };
    // integrate_pieces takes Fn; the scratch buffers need interior mutability
    let cell = std::cell::RefCell::new(integrand);
    let opts = QuadOptions { abs_tol: 1e-15, rel_tol: 1e-11, max_intervals: 4000 };
    Ok(integrate_pieces(|r| (cell.borrow_mut())(r), &breaks, opts)?.value)
}

/// Predicted effective-noise variances `τ²_0, …, τ²_{t−1}`:
/// `τ²_0 = σ_w² + E[x²]/δ`, `τ²_{k+1} = σ_w² + mmse(τ²_k)/δ`.
pub fn state_evolution(prior: &GaussianMixture<f64>, delta: f64, noise_var: f64, t: usize) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config { field: "delta".into(), reason: format!("{delta} not in (0, 1]") });
    }
    if !(noise_var > 0.0) {
        return Err(Error::InvalidNoise(noise_var));
    }
    let mut tau = Vec::with_capacity(t);
    let mut cur = noise_var + prior.second_moment() / delta;
    for _ in 0..t {
        tau.push(cur);
        cur = noise_var + mmse(prior, cur)? / delta;
    }
    Ok(tau)
}
