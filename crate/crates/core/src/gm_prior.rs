//! Gaussian-mixture priors and their MMSE denoiser.
//!
//! Under the decoupled channel `r = x + v`, `v ~ N(0, σ²)`, the posterior of a
//! mixture prior is again a mixture. The denoiser returns its mean and the
//! derivative of that mean with respect to `r`; both are computed from
//! log-domain responsibilities so that entries far in the tails never produce
//! an all-zero normalizer.
//!
//! Components with zero variance are point masses and are handled exactly.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn simplex_tol<T: Scalar>() -> f64 {
    1e-12f64.max(100.0 * T::epsilon().as_f64())
}

/// `Σ_l ω_l N(·; μ_l, σ_l²)` over the real line.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T: Scalar> {
    weights: Vec<T>,
    means: Vec<T>,
    variances: Vec<T>,
}

impl<T: Scalar> GaussianMixture<T> {
    pub fn new(weights: Vec<T>, means: Vec<T>, variances: Vec<T>) -> Result<Self> {
        let l = weights.len();
        if l == 0 {
            return Err(Error::InvalidMixture("at least one component is required".into()));
        }
        if means.len() != l || variances.len() != l {
            return Err(Error::InvalidMixture(format!("length mismatch: {} weights, {} means, {} variances", l, means.len(), variances.len())));
        }
        for (i, ((&w, &m), &v)) in weights.iter().zip(&means).zip(&variances).enumerate() {
            if !w.is_finite() || w < T::zero() || w > T::one() {
                return Err(Error::InvalidMixture(format!("weight {i} = {w} outside [0, 1]")));
            }
            if !m.is_finite() {
                return Err(Error::InvalidMixture(format!("mean {i} is not finite")));
            }
            if !v.is_finite() || v < T::zero() {
                return Err(Error::InvalidMixture(format!("variance {i} = {v} must be finite and non-negative")));
            }
        }
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if (total - 1.0).abs() > simplex_tol::<T>() {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(Self { weights, means, variances })
    }

    /// Single Gaussian `N(mean, variance)`.
    pub fn gaussian(mean: T, variance: T) -> Result<Self> {
        Self::new(vec![T::one()], vec![mean], vec![variance])
    }

    /// Spike at zero with probability `1 − ε`, `N(0, σ_x²)` otherwise.
    pub fn bernoulli_gaussian(epsilon: T, slab_var: T) -> Result<Self> {
        Self::new(vec![T::one() - epsilon, epsilon], vec![T::zero(), T::zero()], vec![T::zero(), slab_var])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn variances(&self) -> &[T] {
        &self.variances
    }

    pub fn mean(&self) -> T {
        self.weights.iter().zip(&self.means).map(|(&w, &m)| w * m).sum()
    }

    /// `E[x²]`.
    pub fn second_moment(&self) -> T {
        self.weights.iter().zip(&self.means).zip(&self.variances).map(|((&w, &m), &v)| w * (m * m + v)).sum()
    }

    /// The same mixture translated by `c`.
    pub fn shifted(&self, c: T) -> Self {
        Self { weights: self.weights.clone(), means: self.means.iter().map(|&m| m + c).collect(), variances: self.variances.clone() }
    }

    pub fn cast<U: Scalar>(&self) -> GaussianMixture<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<_>>();
        GaussianMixture { weights: conv(&self.weights), means: conv(&self.means), variances: conv(&self.variances) }
    }

    pub fn to_record(&self) -> GmRecord {
        let conv = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        GmRecord { components: self.len(), weights: conv(&self.weights), means: conv(&self.means), variances: conv(&self.variances) }
    }

    pub fn from_record(rec: &GmRecord) -> Result<Self> {
        if rec.components != rec.weights.len() {
            return Err(Error::InvalidMixture(format!("L = {} but {} weights given", rec.components, rec.weights.len())));
        }
        let conv = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<_>>();
        Self::new(conv(&rec.weights), conv(&rec.means), conv(&rec.variances))
    }
}

/// Plain-text form of a mixture used by checkpoints and config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmRecord {
    #[serde(rename = "L")]
    pub components: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Prior density at `x`. Fails on point-mass components.
pub fn gm_pdf<T: Scalar>(x: T, gm: &GaussianMixture<T>) -> Result<T> {
    let mut density = T::zero();
    for l in 0..gm.len() {
        let v = gm.variances[l];
        if v == T::zero() {
            return Err(Error::PointMass { component: l });
        }
        let d = x - gm.means[l];
        density += gm.weights[l] * (-(d * d) / (T::of(2.0) * v)).exp() / (T::of(2.0 * std::f64::consts::PI) * v).sqrt();
    }
    Ok(density)
}

fn check_noise<T: Scalar>(sigma_sq: T) -> Result<()> {
    if !(sigma_sq > T::zero()) || !sigma_sq.is_finite() {
        return Err(Error::InvalidNoise(sigma_sq.as_f64()));
    }
    Ok(())
}

fn check_finite<T: Scalar>(r: ArrayView1<'_, T>) -> Result<()> {
    match r.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFiniteInput(i)),
        None => Ok(()),
    }
}

/// Per-entry, per-component posterior quantities; rows are entries.
#[derive(Debug, Clone)]
pub struct PosteriorTerms<T: Scalar> {
    /// Normalized responsibilities β̄.
    pub resp: Array2<T>,
    /// Unnormalized β = ω N(r; μ, σ_l² + σ²). May underflow to zero.
    pub raw: Array2<T>,
    /// Posterior component means γ.
    pub post_means: Array2<T>,
    /// Posterior component variances ν.
    pub post_vars: Array2<T>,
}

pub fn posterior_terms<T: Scalar>(r: ArrayView1<'_, T>, sigma_sq: T, gm: &GaussianMixture<T>) -> Result<PosteriorTerms<T>> {
    check_noise(sigma_sq)?;
    check_finite(r)?;
    let n = r.len();
    let l = gm.len();
    let kernel = GmKernel::new(gm, sigma_sq);
    let mut resp = Array2::zeros((n, l));
    let mut raw = Array2::zeros((n, l));
    let mut post_means = Array2::zeros((n, l));
    let mut post_vars = Array2::zeros((n, l));
    let mut logs = vec![T::zero(); l];
    for (i, &ri) in r.iter().enumerate() {
        let mut max = T::neg_infinity();
        for c in 0..l {
            let d = ri - gm.means[c];
            logs[c] = kernel.log_w[c] - kernel.half_log_c[c] - T::of(0.5) * d * d / kernel.c[c];
            max = max.max(logs[c]);
            raw[[i, c]] = logs[c].exp();
            post_means[[i, c]] = gm.means[c] + kernel.gain[c] * (ri - gm.means[c]);
            post_vars[[i, c]] = gm.variances[c] * sigma_sq / kernel.c[c];
        }
        let mut s = T::zero();
        for c in 0..l {
            let e = (logs[c] - max).exp();
            resp[[i, c]] = e;
            s += e;
        }
        for c in 0..l {
            resp[[i, c]] /= s;
        }
    }
    Ok(PosteriorTerms { resp, raw, post_means, post_vars })
}

/// Denoised estimate, its derivative, and the Onsager coefficient `Σ η' / m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput<T: Scalar> {
    pub estimate: Array1<T>,
    pub derivative: Array1<T>,
    pub onsager: T,
}

impl<T: Scalar> DenoiserOutput<T> {
    pub fn new(estimate: Array1<T>, derivative: Array1<T>, m: usize) -> Self {
        let onsager = derivative.sum() / T::of(m as f64);
        Self { estimate, derivative, onsager }
    }
}

/// MMSE estimate `E[x | r]` under `gm` with its derivative in `r`; `m` is the
/// measurement count used to scale the Onsager coefficient.
pub fn denoise<T: Scalar>(r: ArrayView1<'_, T>, sigma_sq: T, gm: &GaussianMixture<T>, m: usize) -> Result<DenoiserOutput<T>> {
    check_noise(sigma_sq)?;
    check_finite(r)?;
    let mut kernel = GmKernel::new(gm, sigma_sq);
    let mut est = Array1::zeros(r.len());
    let mut der = Array1::zeros(r.len());
    for (i, &ri) in r.iter().enumerate() {
        let (e, d) = kernel.eval(ri);
        est[i] = e;
        der[i] = d;
    }
    Ok(DenoiserOutput::new(est, der, m))
}

/// Adjoints of a mixture's parameters, laid out as log-weights, means, then
/// variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmGrad<T: Scalar> {
    pub log_weights: Vec<T>,
    pub means: Vec<T>,
    pub variances: Vec<T>,
}

impl<T: Scalar> GmGrad<T> {
    pub fn zeros(l: usize) -> Self {
        Self { log_weights: vec![T::zero(); l], means: vec![T::zero(); l], variances: vec![T::zero(); l] }
    }
}

/// Scalar denoiser specialised to one mixture and one noise level.
///
/// Holds the σ²-dependent constants and scratch buffers so that evaluating a
/// row of entries costs `L` exponentials per entry.
pub(crate) struct GmKernel<'a, T: Scalar> {
    gm: &'a GaussianMixture<T>,
    sigma_sq: T,
    log_w: Vec<T>,
    c: Vec<T>,
    inv_c: Vec<T>,
    // v / c
    gain: Vec<T>,
    half_log_c: Vec<T>,
    p: Vec<T>,
    u: Vec<T>,
    gamma: Vec<T>,
}

impl<'a, T: Scalar> GmKernel<'a, T> {
    pub(crate) fn new(gm: &'a GaussianMixture<T>, sigma_sq: T) -> Self {
        let l = gm.len();
        let c: Vec<T> = gm.variances.iter().map(|&v| v + sigma_sq).collect();
        let inv_c: Vec<T> = c.iter().map(|&c| T::one() / c).collect();
        Self {
            gm,
            sigma_sq,
            log_w: gm.weights.iter().map(|w| w.ln()).collect(),
            half_log_c: c.iter().map(|&c| T::of(0.5) * (c.ln() + T::of(LN_2PI))).collect(),
            gain: gm.variances.iter().zip(&inv_c).map(|(&v, &ic)| v * ic).collect(),
            c,
            inv_c,
            p: vec![T::zero(); l],
            u: vec![T::zero(); l],
            gamma: vec![T::zero(); l],
        }
    }

    /// Fills `p`, `u`, `gamma` for entry `r` and returns `(η, ū)`.
    #[inline]
    fn fill(&mut self, r: T) -> (T, T) {
        let l = self.gm.len();
        let mut max = T::neg_infinity();
        for c in 0..l {
            let d = r - self.gm.means[c];
            let u = d * self.inv_c[c];
            self.u[c] = u;
            let lb = self.log_w[c] - self.half_log_c[c] - T::of(0.5) * d * u;
            self.p[c] = lb;
            max = max.max(lb);
            // point masses give exactly μ here since the gain is 0
            self.gamma[c] = self.gm.means[c] + self.gain[c] * d;
        }
        let mut s = T::zero();
        for c in 0..l {
            let e = (self.p[c] - max).exp();
            self.p[c] = e;
            s += e;
        }
        let inv_s = T::one() / s;
        let (mut eta, mut ubar) = (T::zero(), T::zero());
        for c in 0..l {
            self.p[c] *= inv_s;
            eta += self.p[c] * self.gamma[c];
            ubar += self.p[c] * self.u[c];
        }
        (eta, ubar)
    }

    /// `(η(r), η'(r))`.
    #[inline]
    pub(crate) fn eval(&mut self, r: T) -> (T, T) {
        let (eta, ubar) = self.fill(r);
        // Σ_l β̄_l k_l + Σ_l γ_l dβ̄_l/dr with dβ̄_l/dr = β̄_l (ū − u_l)
        let mut deriv = T::zero();
        for c in 0..self.gm.len() {
            deriv += self.p[c] * (self.gain[c] + self.gamma[c] * (ubar - self.u[c]));
        }
        (eta, deriv)
    }

    /// Reverse-mode sweep for one entry: given adjoints of `η` and `η'`,
    /// accumulates parameter adjoints into `grad` and returns `(r̄, σ̄²)`.
    pub(crate) fn backward(&mut self, r: T, eta_bar: T, deriv_bar: T, grad: &mut GmGrad<T>) -> (T, T) {
        let (eta, ubar) = self.fill(r);
        self.backward_filled(eta, ubar, eta_bar, deriv_bar, grad)
    }

    /// Squared error `(η(r) − x)²` of one entry, accumulating `coef` times its
    /// parameter gradient into `grad`.
    pub(crate) fn fit_entry(&mut self, r: T, x: T, coef: T, grad: &mut GmGrad<T>) -> T {
        let (eta, ubar) = self.fill(r);
        let err = eta - x;
        self.backward_filled(eta, ubar, T::of(2.0) * coef * err, T::zero(), grad);
        err * err
    }

    fn backward_filled(&self, eta: T, ubar: T, eta_bar: T, deriv_bar: T, grad: &mut GmGrad<T>) -> (T, T) {
        let l = self.gm.len();
        let s2 = self.sigma_sq;
        let mut r_bar = T::zero();
        let mut s2_bar = T::zero();
        let mut pbar_mean = T::zero();
        let mut pbar = [T::zero(); 16];
        let mut pbar_vec;
        let pbar: &mut [T] = if l <= 16 {
            &mut pbar[..l]
        } else {
            pbar_vec = vec![T::zero(); l];
            &mut pbar_vec
        };
        for c in 0..l {
            let g = self.gamma[c];
            let u = self.u[c];
            pbar[c] = eta_bar * g + deriv_bar * (self.gain[c] + g * ubar + eta * u - g * u);
            pbar_mean += self.p[c] * pbar[c];
        }
        for c in 0..l {
            let p = self.p[c];
            let ic = self.inv_c[c];
            let v = self.gm.variances[c];
            let u = self.u[c];
            let k = self.gain[c];
            let l_bar = p * (pbar[c] - pbar_mean);
            let k_bar = deriv_bar * p;
            let g_bar = eta_bar * p + deriv_bar * p * (ubar - u);
            let u_bar = deriv_bar * p * (eta - self.gamma[c]);

            grad.log_weights[c] += l_bar;
            let mut d_bar = -l_bar * u;
            let mut c_bar = l_bar * T::of(0.5) * (u * u - ic);
            // γ = (r v + μ s2) / c as a function of (r, μ, v, s2)
            r_bar += g_bar * k;
            grad.means[c] += g_bar * s2 * ic;
            let mut v_bar = g_bar * s2 * u * ic;
            s2_bar -= g_bar * u * k;
            // k = v / c
            v_bar += k_bar * s2 * ic * ic;
            s2_bar -= k_bar * v * ic * ic;
            // u = d / c
            d_bar += u_bar * ic;
            c_bar -= u_bar * u * ic;
            // d = r − μ, c = v + s2
            r_bar += d_bar;
            grad.means[c] -= d_bar;
            v_bar += c_bar;
            s2_bar += c_bar;
            grad.variances[c] += v_bar;
        }
        (r_bar, s2_bar)
    }
}

/// Mixture of point masses at `alphabet` with a common variance `floor_var`.
pub fn gm_from_discrete<T: Scalar>(alphabet: &[T], probs: &[T], floor_var: T) -> Result<GaussianMixture<T>> {
    if alphabet.len() != probs.len() || alphabet.is_empty() {
        return Err(Error::InvalidDistribution(format!("{} symbols but {} probabilities", alphabet.len(), probs.len())));
    }
    if probs.iter().any(|&p| !(p >= T::zero()) || p > T::one()) {
        return Err(Error::InvalidDistribution("probabilities must lie in [0, 1]".into()));
    }
    let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > 1e-9f64.max(100.0 * T::epsilon().as_f64()) {
        return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
    }
    for i in 0..alphabet.len() {
        if alphabet[i + 1..].contains(&alphabet[i]) {
            return Err(Error::InvalidDistribution(format!("symbol {} repeated", alphabet[i])));
        }
    }
    if !(floor_var >= T::zero()) {
        return Err(Error::InvalidDistribution("floor variance must be non-negative".into()));
    }
    // renormalise so the mixture invariant holds exactly
    let s = T::of(total);
    GaussianMixture::new(probs.iter().map(|&p| p / s).collect(), alphabet.to_vec(), vec![floor_var; alphabet.len()])
}

/// Draws the component index from `u ∈ [0, 1)`.
pub(crate) fn pick_component<T: Scalar>(weights: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w.as_f64();
        if u < acc {
            return i;
        }
    }
    // u beyond the rounded total: last component with positive weight
    weights.iter().rposition(|w| *w > T::zero()).unwrap_or(0)
}

/// `n` i.i.d. draws from `gm`.
pub fn gm_sample<T: Scalar, R: Rng + ?Sized>(gm: &GaussianMixture<T>, n: usize, rng: &mut R) -> Array1<T> {
    Array1::from_shape_fn(n, |_| {
        let c = pick_component(&gm.weights, rng.random::<f64>());
        let v = gm.variances[c];
        if v == T::zero() {
            gm.means[c]
        } else {
            let g: f64 = StandardNormal.sample(rng);
            gm.means[c] + v.sqrt() * T::of(g)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, integrate_pieces, QuadOptions};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gm(w: &[f64], m: &[f64], v: &[f64]) -> GaussianMixture<f64> {
        GaussianMixture::new(w.to_vec(), m.to_vec(), v.to_vec()).unwrap()
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (f64, f64, GaussianMixture<f64>) {
        let l = rng.random_range(1..=4);
        let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let w = raw.iter().map(|x| x / s).collect();
        let m = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v = (0..l).map(|_| rng.random_range(0.05..2.0)).collect();
        let g = GaussianMixture::new(w, m, v).unwrap();
        (rng.random_range(-4.0..4.0), rng.random_range(0.05..2.0), g)
    }

    /// E[x | r] by integrating over x directly with the prior density.
    fn quadrature_posterior_mean(r: f64, s2: f64, g: &GaussianMixture<f64>) -> f64 {
        let lik = |x: f64| (-(r - x).powi(2) / (2.0 * s2)).exp();
        let mut breaks = vec![];
        for l in 0..g.len() {
            let w = 10.0 * (g.variances()[l] + s2).sqrt();
            breaks.extend([g.means()[l] - w, g.means()[l] + w]);
            let w = 10.0 * g.variances()[l].sqrt();
            breaks.extend([g.means()[l] - w, g.means()[l] + w]);
        }
        let lo = breaks.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = breaks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        breaks.extend([lo.min(r - 10.0 * s2.sqrt()), hi.max(r + 10.0 * s2.sqrt())]);
        let opts = QuadOptions { abs_tol: 0.0, rel_tol: 1e-12, max_intervals: 5000 };
        let num = integrate_pieces(|x| x * gm_pdf(x, g).unwrap() * lik(x), &breaks, opts).unwrap();
        let den = integrate_pieces(|x| gm_pdf(x, g).unwrap() * lik(x), &breaks, opts).unwrap();
        num.value / den.value
    }

    #[test]
    fn pdf_standard_normal_mode() {
        let g = gm(&[1.0], &[0.0], &[1.0]);
        assert!((gm_pdf(0.0, &g).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn pdf_symmetric_mixture() {
        let g = gm(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0]);
        for a in [0.1, 0.7, 2.5] {
            assert_eq!(gm_pdf(a, &g).unwrap(), gm_pdf(-a, &g).unwrap());
        }
    }

    #[test]
    fn pdf_integrates_to_one() {
        let g = gm(&[0.3, 0.7], &[-2.0, 1.0], &[0.5, 2.0]);
        let r = integrate(|x| gm_pdf(x, &g).unwrap(), -20.0, 20.0, QuadOptions::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pdf_rejects_point_mass() {
        let g = GaussianMixture::bernoulli_gaussian(0.1, 1.0).unwrap();
        assert_eq!(gm_pdf(0.0, &g), Err(Error::PointMass { component: 0 }));
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianMixture::<f64>::new(vec![], vec![], vec![]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![0.0], vec![0.0]).is_ok());
    }

    #[test]
    fn single_component_responsibility() {
        let g = gm(&[1.0], &[0.3], &[2.0]);
        let t = posterior_terms(array![-3.0, 0.0, 40.0].view(), 0.5, &g).unwrap();
        assert!(t.resp.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn point_mass_posterior() {
        let g = gm(&[0.4, 0.6], &[1.5, -0.5], &[0.0, 1.0]);
        let t = posterior_terms(array![0.2, 7.0].view(), 0.3, &g).unwrap();
        for i in 0..2 {
            assert_eq!(t.post_means[[i, 0]], 1.5);
            assert_eq!(t.post_vars[[i, 0]], 0.0);
        }
    }

    #[test]
    fn responsibility_ratio() {
        let g = gm(&[0.5, 0.5], &[0.0, 5.0], &[1.0, 1.0]);
        let t = posterior_terms(array![5.0].view(), 1.0, &g).unwrap();
        let ratio = t.resp[[0, 1]] / t.resp[[0, 0]];
        assert!((ratio / (25.0f64 / 4.0).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn far_tail_does_not_underflow() {
        let g = gm(&[0.5, 0.5], &[0.0, 1.0], &[1e-6, 1e-6]);
        let t = posterior_terms(array![1e4].view(), 1e-6, &g).unwrap();
        assert!(t.raw.iter().all(|&b| b == 0.0));
        assert!((t.resp.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(t.resp[[0, 1]], 1.0);
    }

    #[test]
    fn posterior_terms_errors() {
        let g = gm(&[1.0], &[0.0], &[1.0]);
        assert_eq!(posterior_terms(array![1.0].view(), 0.0, &g).unwrap_err(), Error::InvalidNoise(0.0));
        assert_eq!(posterior_terms(array![1.0, f64::NAN].view(), 1.0, &g).unwrap_err(), Error::NonFiniteInput(1));
        assert!(denoise(array![1.0].view(), -1.0, &g, 1).is_err());
    }

    #[test]
    fn single_gaussian_wiener() {
        let g = gm(&[1.0], &[0.0], &[1.0]);
        let out = denoise(array![2.0].view(), 1.0, &g, 1).unwrap();
        assert!((out.estimate[0] - 1.0).abs() < 1e-15);
        assert!((out.derivative[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn discrete_constructors() {
        let b = gm_from_discrete(&[-1.0, 1.0], &[0.5, 0.5], 0.0).unwrap();
        assert_eq!(b.means(), &[-1.0, 1.0]);
        assert_eq!(b.variances(), &[0.0, 0.0]);
        let t = gm_from_discrete(&[-1.0, 0.0, 1.0], &[0.05, 0.9, 0.05], 0.0).unwrap();
        assert_eq!(t.len(), 3);
        assert!(gm_from_discrete(&[-1.0, 1.0], &[0.5, 0.6], 0.0).is_err());
        assert!(gm_from_discrete(&[1.0, 1.0], &[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn degenerate_point_mass_denoiser() {
        let g = gm_from_discrete(&[2.5], &[1.0], 0.0).unwrap();
        let out = denoise(array![-10.0, 0.0, 2.5, 33.0].view(), 0.7, &g, 4).unwrap();
        assert!(out.estimate.iter().all(|&e| e == 2.5));
        assert!(out.derivative.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn discrete_posterior_matches_softmax() {
        let alphabet: [f64; 3] = [-1.0, 0.0, 1.0];
        let probs: [f64; 3] = [0.05, 0.9, 0.05];
        let g = gm_from_discrete(&alphabet, &probs, 0.0).unwrap();
        let s2: f64 = 0.2;
        for r in [-1.7, -0.3, 0.0, 0.45, 3.0] {
            let logits: Vec<f64> = (0..3).map(|l| probs[l].ln() - (r - alphabet[l]).powi(2) / (2.0 * s2)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let direct: f64 = (0..3).map(|l| e[l] / z * alphabet[l]).sum();
            let out = denoise(array![r].view(), s2, &g, 1).unwrap();
            assert!((out.estimate[0] - direct).abs() <= 4.0 * f64::EPSILON, "r={r}");
        }
    }

    #[test]
    fn sample_point_mass() {
        let g = gm(&[1.0], &[3.0], &[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(gm_sample(&g, 4, &mut rng).to_vec(), vec![3.0; 4]);
    }

    #[test]
    fn sample_bernoulli_gaussian_statistics() {
        let g = GaussianMixture::bernoulli_gaussian(0.1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let x = gm_sample(&g, n, &mut rng);
        let slab: Vec<f64> = x.iter().copied().filter(|&v| v != 0.0).collect();
        let frac = slab.len() as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.003, "nonzero fraction {frac}");
        let mean = slab.iter().sum::<f64>() / slab.len() as f64;
        let var = slab.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / slab.len() as f64;
        // slab sample of ~1e5 points: standard errors 3e-3 (mean), 4.5e-3 (variance)
        assert!(mean.abs() < 0.01, "slab mean {mean}");
        assert!((var - 1.0).abs() < 0.015, "slab variance {var}");
    }

    #[test]
    fn quadrature_oracle_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let (r, s2, g) = random_case(&mut rng);
            let analytic = denoise(array![r].view(), s2, &g, 1).unwrap().estimate[0];
            let oracle = quadrature_posterior_mean(r, s2, &g);
            assert!((analytic - oracle).abs() < 1e-8, "r={r} s2={s2} {analytic} vs {oracle}");
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let (r, s2, g) = random_case(&mut rng);
            let h = 1e-6;
            let f = |x: f64| denoise(array![x].view(), s2, &g, 1).unwrap().estimate[0];
            let fd = (f(r + h) - f(r - h)) / (2.0 * h);
            let d = denoise(array![r].view(), s2, &g, 1).unwrap().derivative[0];
            assert!((d - fd).abs() <= 1e-5 * d.abs().max(fd.abs()), "r={r} {d} vs {fd}");
        }
    }

    #[test]
    fn limits_in_noise() {
        let g = gm(&[0.2, 0.5, 0.3], &[-1.0, 0.5, 2.0], &[0.3, 1.0, 0.1]);
        let r = array![-3.0, 0.0, 1.2, 4.0];
        let big = denoise(r.view(), 1e12, &g, 4).unwrap();
        for e in big.estimate.iter() {
            assert!((e - g.mean()).abs() < 1e-4);
        }
        let small = denoise(r.view(), 1e-12, &g, 4).unwrap();
        for (e, x) in small.estimate.iter().zip(r.iter()) {
            assert!((e - x).abs() < 1e-4);
        }
    }

    #[test]
    fn kernel_backward_matches_finite_differences() {
        // adjoint weights for η and η' chosen arbitrarily
        let (ebar, dbar) = (0.7, -1.3);
        let g = gm(&[0.2, 0.5, 0.3], &[-1.0, 0.5, 2.0], &[0.3, 0.0, 0.1]);
        let objective = |g: &GaussianMixture<f64>, r: f64, s2: f64| {
            let (e, d) = GmKernel::new(g, s2).eval(r);
            ebar * e + dbar * d
        };
        for &(r, s2) in &[(0.3, 0.4), (-1.7, 0.05), (2.2, 1.5)] {
            let mut grad = GmGrad::zeros(3);
            let (r_bar, s2_bar) = GmKernel::new(&g, s2).backward(r, ebar, dbar, &mut grad);
            let h = 1e-6;
            let fd_r = (objective(&g, r + h, s2) - objective(&g, r - h, s2)) / (2.0 * h);
            let fd_s = (objective(&g, r, s2 + h) - objective(&g, r, s2 - h)) / (2.0 * h);
            assert!((r_bar - fd_r).abs() < 1e-7 * (1.0 + fd_r.abs()), "{r_bar} {fd_r}");
            assert!((s2_bar - fd_s).abs() < 1e-7 * (1.0 + fd_s.abs()), "{s2_bar} {fd_s}");
            for l in 0..3 {
                let perturb = |field: usize, delta: f64| {
                    let (mut w, mut m, mut v) = (g.weights().to_vec(), g.means().to_vec(), g.variances().to_vec());
                    match field {
                        // log-weight perturbation without renormalising
                        0 => w[l] *= delta.exp(),
                        1 => m[l] += delta,
                        _ => v[l] += delta,
                    }
                    GaussianMixture { weights: w, means: m, variances: v }
                };
                for (field, analytic) in [(0, grad.log_weights[l]), (1, grad.means[l]), (2, grad.variances[l])] {
                    // one-sided at the zero-variance component
                    let fd = if field == 2 && g.variances()[l] == 0.0 {
                        (objective(&perturb(2, h), r, s2) - objective(&g, r, s2)) / h
                    } else {
                        (objective(&perturb(field, h), r, s2) - objective(&perturb(field, -h), r, s2)) / (2.0 * h)
                    };
                    let tol = if field == 2 && g.variances()[l] == 0.0 { 1e-4 } else { 1e-7 };
                    assert!((analytic - fd).abs() < tol * (1.0 + fd.abs()), "l={l} field={field} {analytic} {fd}");
                }
            }
        }
    }

    #[test]
    fn fused_fit_matches_separate_passes() {
        let g = gm(&[0.2, 0.5, 0.3], &[-1.0, 0.5, 2.0], &[0.3, 0.0, 0.1]);
        let (r, x, coef, s2) = (0.8, 0.4, 0.25, 0.2);
        let mut k = GmKernel::new(&g, s2);
        let (eta, _) = k.eval(r);
        let mut want = GmGrad::zeros(3);
        k.backward(r, 2.0 * coef * (eta - x), 0.0, &mut want);
        let mut got = GmGrad::zeros(3);
        let sq = k.fit_entry(r, x, coef, &mut got);
        assert_eq!(sq, (eta - x) * (eta - x));
        assert_eq!((got.log_weights, got.means, got.variances), (want.log_weights, want.means, want.variances));
    }

    #[test]
    fn record_round_trip() {
        let g = gm(&[0.3, 0.7], &[-2.0, 1.0], &[0.5, 2.0]);
        let text = serde_json::to_string(&g.to_record()).unwrap();
        assert!(text.contains("\"L\":2"));
        let back: GaussianMixture<f64> = GaussianMixture::from_record(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
