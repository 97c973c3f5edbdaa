//! Fixed-weight leaky echo state network used as working memory.

use nalgebra::{DMatrix, Schur};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use crate::config::ReservoirConfig;

/// Hidden activation of the reservoir.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirState(pub Array1<f64>);

impl ReservoirState {
    pub fn zeros(n_units: usize) -> Self {
        Self(Array1::zeros(n_units))
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct Reservoir {
    pub n_units: usize,
    pub d_in: usize,
    pub spectral_radius: f64,
    pub leak_rate: f64,
    pub input_scale: f64,
    pub connectivity: f64,
    recurrent: Array2<f64>,
    input: Array2<f64>,
    // row-compressed copy of `recurrent` for the step
    sparse_rows: Vec<Vec<(u32, f64)>>,
}

/// Largest eigenvalue modulus of a square matrix. Falls back to Gelfand's
/// formula `||A^k||^(1/k)` when the real Schur iteration does not converge,
/// which happens on very sparse matrices.
pub fn spectral_radius(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[(i, j)]);
    if let Some(schur) = Schur::try_new(dm.clone(), f64::EPSILON, 100 * n.max(10)) {
        return schur
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
    }
    // repeated squaring with renormalisation: log ||A^(2^j)|| / 2^j
    let mut a = dm;
    let mut log_scale = 0.0;
    let mut k = 1.0;
    for _ in 0..30 {
        let norm = a.norm();
        if norm == 0.0 {
            return 0.0;
        }
        a /= norm;
        log_scale += norm.ln() / k;
        a = &a * &a;
        k *= 2.0;
    }
    (log_scale + a.norm().max(f64::MIN_POSITIVE).ln() / k).exp()
}

impl Reservoir {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ReservoirConfig, d_in: usize) -> Self {
        assert!(cfg.n_units > 0 && cfg.spectral_radius > 0.0);
        let n = cfg.n_units;
        let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let recurrent = loop {
            let raw = Array2::from_shape_fn((n, n), |_| {
                if rng.random::<f64>() < cfg.connectivity {
                    unit.sample(rng)
                } else {
                    0.0
                }
            });
            let rho = spectral_radius(&raw);
            if rho > 1e-12 {
                break raw * (cfg.spectral_radius / rho);
            }
        };
        let input = Array2::from_shape_fn((n, d_in), |_| unit.sample(rng) * cfg.input_scale);
        Self::from_weights(cfg, recurrent, input)
    }

    pub fn from_weights(cfg: &ReservoirConfig, recurrent: Array2<f64>, input: Array2<f64>) -> Self {
        assert_eq!(recurrent.nrows(), cfg.n_units);
        assert_eq!(recurrent.ncols(), cfg.n_units);
        assert_eq!(input.nrows(), cfg.n_units);
        let sparse_rows = recurrent
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(j, &w)| (j as u32, w))
                    .collect()
            })
            .collect();
        Self {
            n_units: cfg.n_units,
            d_in: input.ncols(),
            spectral_radius: cfg.spectral_radius,
            leak_rate: cfg.leak_rate,
            input_scale: cfg.input_scale,
            connectivity: cfg.connectivity,
            recurrent,
            input,
            sparse_rows,
        }
    }

    pub fn recurrent_weights(&self) -> &Array2<f64> {
        &self.recurrent
    }

    pub fn input_weights(&self) -> &Array2<f64> {
        &self.input
    }

    pub fn reset_state(&self) -> ReservoirState {
        ReservoirState::zeros(self.n_units)
    }

    /// One leaky update. Returns the new state and `tanh(W_rec h + W_in x)`,
    /// which the backward pass needs.
    pub fn step_with_activation(
        &self,
        state: &ReservoirState,
        x: ArrayView1<f64>,
    ) -> (ReservoirState, Array1<f64>) {
        assert_eq!(x.len(), self.d_in, "reservoir input dimension mismatch");
        assert_eq!(
            state.0.len(),
            self.n_units,
            "reservoir state dimension mismatch"
        );
        let mut pre = self.input.dot(&x);
        let h = &state.0;
        for (p, row) in pre.iter_mut().zip(&self.sparse_rows) {
            let mut acc = 0.0;
            for &(j, w) in row {
                acc += w * h[j as usize];
            }
            *p += acc;
        }
        pre.mapv_inplace(f64::tanh);
        let a = self.leak_rate;
        let next = h * (1.0 - a) + &pre * a;
        (ReservoirState(next), pre)
    }

    pub fn step(&self, state: &ReservoirState, x: ArrayView1<f64>) -> ReservoirState {
        self.step_with_activation(state, x).0
    }

    /// dL/dx given dL/dh_t and the activation from the same step, holding
    /// `h_{t-1}` constant.
    pub fn input_gradient(&self, activation: &Array1<f64>, grad_h: ArrayView1<f64>) -> Array1<f64> {
        let a = self.leak_rate;
        let dpre = Array1::from_shape_fn(self.n_units, |i| {
            grad_h[i] * a * (1.0 - activation[i] * activation[i])
        });
        self.input.t().dot(&dpre)
    }

    /// SHA-256 over both weight matrices, for checking they never change.
    pub fn weight_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for w in self.recurrent.iter().chain(self.input.iter()) {
            hasher.update(w.to_le_bytes());
        }
        hasher.finalize().into()
    }
}
