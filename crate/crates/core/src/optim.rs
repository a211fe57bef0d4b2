//! Adam optimizer and spectral weight normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;

/// Adam hyperparameters. The learning rate defaults to 4e-4; the moment
/// coefficients and epsilon are the standard defaults.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        AdamConfig {
            learning_rate: T::from_f64(4e-4),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig<T>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig<T>) -> Self {
        AdamState { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update over `params`, in order. Every
    /// parameter must carry a populated gradient; gradients are zeroed
    /// after the update.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::Contract(format!("parameter {} has no gradient", i)));
            }
            if self.m[i].len() != p.numel() {
                return Err(Error::Contract(format!(
                    "parameter {} changed size: {} vs {}",
                    i,
                    p.numel(),
                    self.m[i].len()
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let t_f = T::from_f64(self.t as f64);
        let bc1 = T::one() - c.beta1.powf(t_f);
        let bc2 = T::one() - c.beta2.powf(t_f);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().unwrap().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (T::one() - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (T::one() - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Persistent left/right singular-vector estimates for one weight matrix.
#[derive(Debug, Clone)]
pub struct SpectralState<T: Scalar> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> SpectralState<T> {
    /// Random unit initial estimate, deterministic in the caller's RNG.
    pub fn new(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<T> = (0..rows).map(|_| T::from_f64(rng.gen::<f64>() - 0.5)).collect();
        let mut v: Vec<T> = (0..cols).map(|_| T::from_f64(rng.gen::<f64>() - 0.5)).collect();
        normalize(&mut u);
        normalize(&mut v);
        SpectralState { u, v }
    }

    /// Runs `iters` power iterations against `w` (row-major `[rows, cols]`),
    /// updating the stored estimates, and returns the singular value estimate
    /// `u^T W v`.
    pub fn update(&mut self, w: &[T], rows: usize, cols: usize, iters: usize) -> T {
        debug_assert_eq!(w.len(), rows * cols);
        debug_assert_eq!(self.u.len(), rows);
        debug_assert_eq!(self.v.len(), cols);
        for _ in 0..iters {
            // v <- normalize(W^T u)
            for j in 0..cols {
                let mut s = T::zero();
                for i in 0..rows {
                    s += w[i * cols + j] * self.u[i];
                }
                self.v[j] = s;
            }
            if !normalize(&mut self.v) {
                return T::zero();
            }
            // u <- normalize(W v)
            for i in 0..rows {
                let mut s = T::zero();
                for j in 0..cols {
                    s += w[i * cols + j] * self.v[j];
                }
                self.u[i] = s;
            }
            if !normalize(&mut self.u) {
                return T::zero();
            }
        }
        let mut sigma = T::zero();
        for i in 0..rows {
            let mut s = T::zero();
            for j in 0..cols {
                s += w[i * cols + j] * self.v[j];
            }
            sigma += self.u[i] * s;
        }
        sigma
    }
}

fn normalize<T: Scalar>(x: &mut [T]) -> bool {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= T::from_f64(1e-30) {
        return false;
    }
    for v in x.iter_mut() {
        *v = *v / norm;
    }
    true
}

/// Divides `weight` (reshaped to `[rows, cols]`) by the power-iteration
/// estimate of its largest singular value. A zero matrix returns zeros.
pub fn spectral_normalize<T: Scalar>(
    weight: &Tensor<T>,
    rows: usize,
    cols: usize,
    power_iters: usize,
    state: &mut SpectralState<T>,
) -> Result<Tensor<T>> {
    if weight.numel() != rows * cols {
        return Err(Error::Dimension(format!(
            "spectral_normalize: {} elements cannot view as [{}, {}]",
            weight.numel(),
            rows,
            cols
        )));
    }
    let sigma = state.update(weight.data(), rows, cols, power_iters);
    let mut out = Tensor::zeros(weight.shape().to_vec());
    if sigma > T::from_f64(1e-12) {
        for (o, &wv) in out.data_mut().iter_mut().zip(weight.data()) {
            *o = wv / sigma;
        }
    }
    Ok(out)
}

/// On-tape spectral normalization: the state is refreshed from the current
/// weight values, then `w / (u^T W v)` is built from tape operations so the
/// discriminator gradient flows through the normalization. Returns a node
/// with the shape of `w_node`. A degenerate sigma yields a zero constant.
pub fn spectral_normalize_node<T: Scalar>(
    tape_w: &mut Tape<T>,
    w_node: NodeId,
    rows: usize,
    cols: usize,
    power_iters: usize,
    state: &mut SpectralState<T>,
) -> Result<NodeId> {
    let w_shape = tape_w.shape(w_node).to_vec();
    let numel: usize = w_shape.iter().product();
    if numel != rows * cols {
        return Err(Error::Dimension(format!(
            "spectral_normalize: {} elements cannot view as [{}, {}]",
            numel, rows, cols
        )));
    }
    let sigma_probe = state.update(tape_w.value(w_node), rows, cols, power_iters);
    if sigma_probe <= T::from_f64(1e-12) {
        return tape_w.constant(vec![T::zero(); numel], w_shape);
    }
    let u = tape_w.constant(state.u.clone(), vec![rows, 1])?;
    let v = tape_w.constant(state.v.clone(), vec![cols, 1])?;
    let w2 = tape_w.reshape(w_node, vec![rows, cols])?;
    let wv = tape_w.matmul(w2, v)?;
    let uwv = tape_w.mul(u, wv)?;
    let sigma = tape_w.sum_all(uwv);
    let inv = tape_w.recip(sigma);
    let normalized = tape_w.mul_scalar(w_node, inv)?;
    Ok(normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::<f32>::full(vec![3], 1.5).with_grad();
        p.zero_grad();
        let mut state = AdamState::new(AdamConfig::default());
        state.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.5, 1.5, 1.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_matches_hand_calculation() {
        // m=0.1, v=0.001, bias-corrected m_hat=1, v_hat=1:
        // update = lr * 1 / (1 + eps) ~= 4e-4, so 1.0 -> ~0.9996.
        let mut p = Tensor::<f64>::full(vec![1], 1.0).with_grad();
        p.accumulate_grad(&[1.0]);
        let mut state = AdamState::new(AdamConfig::default());
        state.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.9996).abs() < 1e-6, "got {}", p.data()[0]);
        // gradient zeroed afterward
        assert!(p.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = Tensor::<f32>::full(vec![2], 1.0).with_grad();
        let mut state = AdamState::new(AdamConfig::default());
        let err = state.step(&mut [&mut p]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn default_learning_rate_is_4e_minus_4() {
        let cfg = AdamConfig::<f32>::default();
        assert!((cfg.learning_rate - 4e-4).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_normalized_to_unit_spectral_norm() {
        // diag(3, 1): sigma_max = 3 exactly (2x2 SVD), so the normalized
        // matrix is diag(1, 1/3) with spectral norm 1.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut state = SpectralState::new(2, 2, &mut rng);
        let out = spectral_normalize(&w, 2, 2, 100, &mut state).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-9);
        assert!((out.data()[3] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn identity_matrix_unchanged() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut state = SpectralState::new(2, 2, &mut rng);
        let out = spectral_normalize(&w, 2, 2, 50, &mut state).unwrap();
        for (a, b) in out.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_matrix_guard_returns_zeros() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::<f32>::zeros(vec![3, 2]);
        let mut state = SpectralState::new(3, 2, &mut rng);
        let out = spectral_normalize(&w, 3, 2, 3, &mut state).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_weight_contracts_random_probes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::<f32>::rand_uniform(vec![6, 4], -1.0, 1.0, &mut rng);
        let mut state = SpectralState::new(6, 4, &mut rng);
        let out = spectral_normalize(&w, 6, 4, 100, &mut state).unwrap();
        for _ in 0..50 {
            let x: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xn = x.iter().map(|v| v * v).sum::<f32>().sqrt();
            let mut y = vec![0.0f32; 6];
            for i in 0..6 {
                for j in 0..4 {
                    y[i] += out.data()[i * 4 + j] * x[j];
                }
            }
            let yn = y.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(yn <= 1.01 * xn, "||Wx|| = {} vs ||x|| = {}", yn, xn);
        }
    }
}
