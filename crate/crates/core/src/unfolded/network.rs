//! Forward pass and reverse-mode gradients of the unrolled recursion.
//!
//! For a batch `Y` (`batch × m`), layer `t = 1..=depth` computes
//!
//! ```text
//! r_t  = x_{t−1} + z_{t−1} Bᵀ
//! s_t  = ‖z_{t−1}‖² / m                    (per row)
//! x_t  = η_t(r_t; s_t),  b_t = Σ η_t'(r_t) / m
//! z_t  = y − x_t Aᵀ + b_t z_{t−1}
//! ```
//!
//! with `x_0 = 0`, `z_0 = y`. The backward sweep differentiates through the
//! denoiser, its derivative (via `b_t`), and the noise estimate `s_t`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

use crate::amp::denoiser_noise;
use crate::error::{Error, Result};
use crate::gm_prior::{GaussianMixture, GmGrad, GmKernel};
use crate::scalar::Scalar;

/// A scalar denoiser the network can differentiate through.
pub trait LayerDenoiser<T: Scalar> {
    fn num_params(&self) -> usize;

    /// Writes `η(r)` and `η'(r)` for one row sharing noise variance `s2`.
    fn forward_row(&self, r: ArrayView1<'_, T>, s2: T, eta: ArrayViewMut1<'_, T>, deriv: ArrayViewMut1<'_, T>);

    /// Vector–Jacobian product for one row. `deriv_bar` is the adjoint shared
    /// by every `η'` entry. Writes `r̄`, accumulates parameter adjoints into
    /// `grad`, and returns `s̄`.
    fn backward_row(&self, r: ArrayView1<'_, T>, s2: T, eta_bar: ArrayView1<'_, T>, deriv_bar: T, r_bar: ArrayViewMut1<'_, T>, grad: &mut [T]) -> T;
}

/// Parameter adjoints are laid out as `[log ω; μ; σ²]`.
impl<T: Scalar> LayerDenoiser<T> for GaussianMixture<T> {
    fn num_params(&self) -> usize {
        3 * self.len()
    }

    fn forward_row(&self, r: ArrayView1<'_, T>, s2: T, mut eta: ArrayViewMut1<'_, T>, mut deriv: ArrayViewMut1<'_, T>) {
        let mut k = GmKernel::new(self, s2);
        for (i, &ri) in r.iter().enumerate() {
            let (e, d) = k.eval(ri);
            eta[i] = e;
            deriv[i] = d;
        }
    }

    fn backward_row(&self, r: ArrayView1<'_, T>, s2: T, eta_bar: ArrayView1<'_, T>, deriv_bar: T, mut r_bar: ArrayViewMut1<'_, T>, grad: &mut [T]) -> T {
        let l = self.len();
        let mut k = GmKernel::new(self, s2);
        let mut g = GmGrad::zeros(l);
        let mut s2_bar = T::zero();
        for (i, &ri) in r.iter().enumerate() {
            let (rb, sb) = k.backward(ri, eta_bar[i], deriv_bar, &mut g);
            r_bar[i] = rb;
            s2_bar += sb;
        }
        for c in 0..l {
            grad[c] += g.log_weights[c];
            grad[l + c] += g.means[c];
            grad[2 * l + c] += g.variances[c];
        }
        s2_bar
    }
}

/// Intermediates recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar> {
    pub depth: usize,
    pub y: Array2<T>,
    /// `x_0 … x_depth`.
    pub xs: Vec<Array2<T>>,
    /// `z_0 … z_{depth−1}`.
    pub zs: Vec<Array2<T>>,
    /// `r_1 … r_depth`.
    pub rs: Vec<Array2<T>>,
    /// Noise variance fed to each layer (after the positivity clamp).
    pub s2: Vec<Array1<T>>,
    /// Whether the clamp was active per row (gradient does not flow).
    pub clamped: Vec<Vec<bool>>,
    /// `b_1 … b_{depth−1}`.
    pub onsager: Vec<Array1<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Estimate after layer `t` (1-based).
    pub fn estimate(&self, t: usize) -> &Array2<T> {
        &self.xs[t]
    }

    pub fn output(&self) -> &Array2<T> {
        &self.xs[self.depth]
    }
}

fn check_dims<T: Scalar>(b: &Array2<T>, a: &Array2<T>, y: ArrayView2<'_, T>) -> Result<()> {
    let (m, n) = a.dim();
    if b.dim() != (n, m) || y.ncols() != m {
        return Err(Error::DimensionMismatch(format!("A is {:?}, B is {:?}, observations have {} entries", a.dim(), b.dim(), y.ncols())));
    }
    Ok(())
}

fn row_noise<T: Scalar>(z: &Array2<T>, m: usize) -> (Array1<T>, Vec<bool>) {
    let inv_m = T::one() / T::of(m as f64);
    let raw: Vec<T> = z.rows().into_iter().map(|row| row.dot(&row) * inv_m).collect();
    let clamped = raw.iter().map(|&s| denoiser_noise(s) != s).collect();
    (raw.into_iter().map(denoiser_noise).collect(), clamped)
}

/// Runs `depth` layers of the network with filter `b` (`N × m`) and per-layer
/// denoisers `layers[0..depth]`.
pub fn forward<T: Scalar, L: LayerDenoiser<T>>(b: &Array2<T>, layers: &[L], a: &Array2<T>, y: ArrayView2<'_, T>, depth: usize) -> Result<Tape<T>> {
    check_dims(b, a, y)?;
    if depth == 0 || depth > layers.len() {
        return Err(Error::TapeMismatch { tape: layers.len(), requested: depth });
    }
    let (m, n) = a.dim();
    let batch = y.nrows();
    let inv_m = T::one() / T::of(m as f64);
    let bt = b.t();
    let mut tape = Tape {
        depth,
        y: y.to_owned(),
        xs: vec![Array2::zeros((batch, n))],
        zs: vec![y.to_owned()],
        rs: Vec::with_capacity(depth),
        s2: Vec::with_capacity(depth),
        clamped: Vec::with_capacity(depth),
        onsager: Vec::with_capacity(depth),
    };
    for t in 1..=depth {
        let z_prev = &tape.zs[t - 1];
        let r = &tape.xs[t - 1] + &z_prev.dot(&bt);
        let (s2, clamped) = row_noise(z_prev, m);
        let mut x = Array2::zeros((batch, n));
        let mut deriv = Array2::zeros((batch, n));
        for i in 0..batch {
            layers[t - 1].forward_row(r.row(i), s2[i], x.row_mut(i), deriv.row_mut(i));
        }
        if x.iter().chain(deriv.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iter: t });
        }
        if t < depth {
            let bt_coef: Array1<T> = deriv.sum_axis(Axis(1)) * inv_m;
            let mut z = &tape.y - &x.dot(&a.t());
            z += &(z_prev * &bt_coef.view().insert_axis(Axis(1)));
            tape.onsager.push(bt_coef);
            tape.zs.push(z);
        }
        tape.rs.push(r);
        tape.s2.push(s2);
        tape.clamped.push(clamped);
        tape.xs.push(x);
    }
    Ok(tape)
}

/// Inputs `(r_t, s_t)` of layer `t = layers.len() + 1`, running every given
/// layer in full.
pub fn layer_inputs<T: Scalar, L: LayerDenoiser<T>>(b: &Array2<T>, layers: &[L], a: &Array2<T>, y: ArrayView2<'_, T>) -> Result<(Array2<T>, Array1<T>)> {
    check_dims(b, a, y)?;
    let m = a.nrows();
    let inv_m = T::one() / T::of(m as f64);
    let mut x = Array2::zeros((y.nrows(), a.ncols()));
    let mut z = y.to_owned();
    for (t, layer) in layers.iter().enumerate() {
        let r = &x + &z.dot(&b.t());
        let (s2, _) = row_noise(&z, m);
        let mut deriv = Array2::zeros(x.dim());
        for i in 0..y.nrows() {
            layer.forward_row(r.row(i), s2[i], x.row_mut(i), deriv.row_mut(i));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iter: t + 1 });
        }
        let coef: Array1<T> = deriv.sum_axis(Axis(1)) * inv_m;
        let mut z_next = y.to_owned() - x.dot(&a.t());
        z_next += &(&z * &coef.view().insert_axis(Axis(1)));
        z = z_next;
    }
    let r = &x + &z.dot(&b.t());
    let (s2, _) = row_noise(&z, m);
    Ok((r, s2))
}

/// Batch NMSE loss and its gradient with respect to the estimate.
#[derive(Debug, Clone)]
pub struct Loss<T: Scalar> {
    /// Mean of `‖x̂ − x‖² / ‖x‖²` over rows with `‖x‖ > 0`.
    pub value: T,
    /// `∂ value / ∂ x̂`.
    pub seed: Array2<T>,
    /// Rows skipped because their truth has zero norm.
    pub excluded: usize,
}

pub fn nmse_loss<T: Scalar>(x_hat: ArrayView2<'_, T>, x: ArrayView2<'_, T>) -> Result<Loss<T>> {
    if x_hat.dim() != x.dim() {
        return Err(Error::DimensionMismatch(format!("estimate {:?} vs truth {:?}", x_hat.dim(), x.dim())));
    }
    let rows = x.nrows();
    let mut seed = Array2::zeros(x.dim());
    let mut total = T::zero();
    let mut excluded = 0;
    let norms: Vec<T> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let used = norms.iter().filter(|&&n| n > T::zero()).count();
    if used == 0 {
        return Err(Error::ZeroNorm);
    }
    let scale = T::one() / T::of(used as f64);
    for i in 0..rows {
        if norms[i] == T::zero() {
            excluded += 1;
            continue;
        }
        let err = &x_hat.row(i) - &x.row(i);
        total += err.dot(&err) / norms[i];
        seed.row_mut(i).assign(&(err * (T::of(2.0) * scale / norms[i])));
    }
    if excluded > 0 {
        log::debug!("{excluded} zero-norm truth rows excluded from the loss");
    }
    Ok(Loss { value: total * scale, seed, excluded })
}

/// Adjoints of the filter and of each layer's denoiser parameters.
#[derive(Debug, Clone)]
pub struct NetworkGrads<T: Scalar> {
    pub b: Option<Array2<T>>,
    /// One entry per layer up to the tape depth; layers below `from_layer`
    /// are left at zero.
    pub layers: Vec<Vec<T>>,
}

/// Which adjoints [`backward`] must produce.
#[derive(Debug, Clone, Copy)]
pub struct BackwardScope {
    pub filter: bool,
    /// Lowest (1-based) layer whose parameters need gradients.
    pub from_layer: usize,
}

impl BackwardScope {
    pub fn all() -> Self {
        Self { filter: true, from_layer: 1 }
    }
}

/// Reverse sweep over `tape` given `seed = ∂loss/∂x_depth`.
pub fn backward<T: Scalar, L: LayerDenoiser<T>>(
    tape: &Tape<T>,
    b: &Array2<T>,
    layers: &[L],
    a: &Array2<T>,
    seed: ArrayView2<'_, T>,
    scope: BackwardScope,
) -> Result<NetworkGrads<T>> {
    let depth = tape.depth;
    if layers.len() < depth || tape.xs.len() != depth + 1 {
        return Err(Error::TapeMismatch { tape: depth, requested: layers.len() });
    }
    if seed.dim() != tape.output().dim() {
        return Err(Error::DimensionMismatch(format!("seed {:?} vs output {:?}", seed.dim(), tape.output().dim())));
    }
    let m = a.nrows();
    let batch = tape.y.nrows();
    let inv_m = T::one() / T::of(m as f64);
    let two_over_m = T::of(2.0) * inv_m;
    let lowest = if scope.filter { 1 } else { scope.from_layer.max(1) };
    let mut grads =
        NetworkGrads { b: scope.filter.then(|| Array2::zeros(b.dim())), layers: layers[..depth].iter().map(|l| vec![T::zero(); l.num_params()]).collect() };
    let mut x_bar = seed.to_owned();
    let mut z_bar: Option<Array2<T>> = None;
    let mut r_bar = Array2::zeros(x_bar.dim());
    for t in (lowest..=depth).rev() {
        let z_prev = &tape.zs[t - 1];
        // z_t = y − x_t Aᵀ + b_t z_{t−1}
        let mut deriv_bar = Array1::<T>::zeros(batch);
        let mut z_prev_bar = Array2::<T>::zeros(z_prev.dim());
        if let Some(zb) = z_bar.take() {
            x_bar -= &zb.dot(a);
            let coef = &tape.onsager[t - 1];
            for i in 0..batch {
                deriv_bar[i] = zb.row(i).dot(&z_prev.row(i)) * inv_m;
            }
            z_prev_bar = &zb * &coef.view().insert_axis(Axis(1));
        }
        let r = &tape.rs[t - 1];
        let s2 = &tape.s2[t - 1];
        let layer_grad = &mut grads.layers[t - 1];
        for i in 0..batch {
            let s2_bar = layers[t - 1].backward_row(r.row(i), s2[i], x_bar.row(i), deriv_bar[i], r_bar.row_mut(i), layer_grad);
            if t > 1 && !tape.clamped[t - 1][i] {
                z_prev_bar.row_mut(i).scaled_add(two_over_m * s2_bar, &z_prev.row(i));
            }
        }
        // r_t = x_{t−1} + z_{t−1} Bᵀ
        if let Some(gb) = grads.b.as_mut() {
            *gb += &r_bar.t().dot(z_prev);
        }
        if t > 1 {
            z_prev_bar += &r_bar.dot(b);
            x_bar.assign(&r_bar);
            z_bar = Some(z_prev_bar);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amp::{run_amp, LinearModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        })
    }

    /// `η(r) = r`, `η' = 1`, no parameters.
    struct Identity;

    impl LayerDenoiser<f64> for Identity {
        fn num_params(&self) -> usize {
            0
        }
        fn forward_row(&self, r: ArrayView1<'_, f64>, _s2: f64, mut eta: ArrayViewMut1<'_, f64>, mut deriv: ArrayViewMut1<'_, f64>) {
            eta.assign(&r);
            deriv.fill(1.0);
        }
        fn backward_row(
            &self,
            _r: ArrayView1<'_, f64>,
            _s2: f64,
            eta_bar: ArrayView1<'_, f64>,
            _deriv_bar: f64,
            mut r_bar: ArrayViewMut1<'_, f64>,
            _grad: &mut [f64],
        ) -> f64 {
            r_bar.assign(&eta_bar);
            0.0
        }
    }

    #[test]
    fn nmse_loss_cases() {
        let x = ndarray::array![[1.0, 0.0]];
        assert_eq!(nmse_loss(x.view(), x.view()).unwrap().value, 0.0);
        assert_eq!(nmse_loss(Array2::zeros((1, 2)).view(), x.view()).unwrap().value, 1.0);
        assert_eq!(nmse_loss(ndarray::array![[0.0, 1.0]].view(), x.view()).unwrap().value, 2.0);
        let with_zero = ndarray::array![[1.0, 0.0], [0.0, 0.0]];
        let l = nmse_loss(Array2::zeros((2, 2)).view(), with_zero.view()).unwrap();
        assert_eq!((l.value, l.excluded), (1.0, 1));
        assert_eq!(nmse_loss::<f64>(Array2::zeros((1, 2)).view(), Array2::zeros((1, 2)).view()).unwrap_err(), Error::ZeroNorm);
    }

    #[test]
    fn untrained_network_is_classical_amp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, n) = (30, 60);
        let a = gaussian_matrix(m, n, 1.0 / (m as f64).sqrt(), &mut rng);
        let y = gaussian_matrix(4, m, 0.5, &mut rng);
        let gm = GaussianMixture::new(vec![0.7, 0.3], vec![0.0, 0.5], vec![0.01, 1.0]).unwrap();
        let layers = vec![gm.clone(); 6];
        let bt = a.t().to_owned();
        let tape = forward(&bt, &layers, &a, y.view(), 6).unwrap();
        for i in 0..4 {
            let model = LinearModel::new(a.clone(), y.row(i).to_owned(), 0.0).unwrap();
            let traj = run_amp(&model, &gm, 6, None).unwrap();
            for t in 1..=6 {
                for (u, v) in tape.estimate(t).row(i).iter().zip(traj.states[t - 1].x_hat.iter()) {
                    assert!((u - v).abs() < 1e-12, "layer {t}");
                }
            }
        }
    }

    #[test]
    fn single_layer_is_denoised_filter_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, n) = (5, 9);
        let a = gaussian_matrix(m, n, 0.4, &mut rng);
        let b = gaussian_matrix(n, m, 0.4, &mut rng);
        let y = gaussian_matrix(1, m, 1.0, &mut rng);
        let gm = GaussianMixture::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.2, 0.3]).unwrap();
        let tape = forward(&b, std::slice::from_ref(&gm), &a, y.view(), 1).unwrap();
        let row = y.row(0);
        let s2 = row.dot(&row) / m as f64;
        let direct = crate::gm_prior::denoise(b.dot(&row).view(), s2, &gm, m).unwrap();
        assert_eq!(tape.output().row(0), direct.estimate);
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, n) = (6, 12);
        let a = gaussian_matrix(m, n, 0.4, &mut rng);
        let row = gaussian_matrix(1, m, 1.0, &mut rng);
        let y = ndarray::concatenate(Axis(0), &[row.view(), row.view(), row.view()]).unwrap();
        let gm = GaussianMixture::bernoulli_gaussian(0.2, 1.0).unwrap();
        let tape = forward(&a.t().to_owned(), &vec![gm; 3], &a, y.view(), 3).unwrap();
        let out = tape.output();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn depth_beyond_layers_is_rejected() {
        let a = Array2::<f64>::zeros((2, 4));
        let gm = GaussianMixture::gaussian(0.0, 1.0).unwrap();
        let y = Array2::<f64>::ones((1, 2));
        assert!(matches!(forward(&a.t().to_owned(), &[gm], &a, y.view(), 2), Err(Error::TapeMismatch { .. })));
    }

    #[test]
    fn identity_layer_filter_gradient_closed_form() {
        // x̂ = B y, loss = mean_i ‖B y_i − x_i‖²/‖x_i‖²
        // ∂loss/∂B = (2/n) Σ_i (B y_i − x_i) y_iᵀ / ‖x_i‖²
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (m, n, batch) = (3, 5, 4);
        let a = gaussian_matrix(m, n, 0.5, &mut rng);
        let b = gaussian_matrix(n, m, 0.5, &mut rng);
        let y = gaussian_matrix(batch, m, 1.0, &mut rng);
        let x = gaussian_matrix(batch, n, 1.0, &mut rng);
        let tape = forward(&b, &[Identity], &a, y.view(), 1).unwrap();
        let loss = nmse_loss(tape.output().view(), x.view()).unwrap();
        let g = backward(&tape, &b, &[Identity], &a, loss.seed.view(), BackwardScope::all()).unwrap();
        let mut want = Array2::<f64>::zeros((n, m));
        for i in 0..batch {
            let xi = x.row(i);
            let resid = b.dot(&y.row(i)) - xi;
            let outer = resid.view().insert_axis(Axis(1)).dot(&y.row(i).insert_axis(Axis(0)));
            want += &(outer * (2.0 / batch as f64 / xi.dot(&xi)));
        }
        for (u, v) in g.b.unwrap().iter().zip(want.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
