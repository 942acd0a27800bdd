//! Random-matrix oracles for the spectral pipeline: Gaussian null ensembles
//! that follow the MP law, and planted low-rank spikes that the metrics
//! must detect.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gram::Spectrum;
use crate::linalg::{self, Matrix};

/// Seedable generator used everywhere in the crate.
///
/// Uniforms come from ChaCha8; Gaussians use the ziggurat sampler of
/// `rand_distr::StandardNormal` on top of that stream. Streams are stable
/// for a given seed within one build of the crate.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent child stream for a labelled purpose, so adding draws to
    /// one consumer never shifts another.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.gaussian())
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// `m x n` matrix of i.i.d. standard normals.
pub fn gaussian_matrix(m: usize, n: usize, seed: u64) -> Matrix {
    Rng::new(seed).gaussian_matrix(m, n, 1.0)
}

/// Eigenvalues of the Wishart matrix `X·Xᵀ / d_in`, `X = gaussian_matrix(m, d_in)`.
///
/// This is the ensemble for which the MP edges are exact. Requires
/// `m, d_in >= 16` so finite-size effects stay modest.
pub fn wishart_null_spectrum(m: usize, d_in: usize, seed: u64) -> Result<Spectrum> {
    if m < 16 || d_in < 16 {
        return Err(Error::Config(format!(
            "wishart_null_spectrum needs m, d_in >= 16, got {m}, {d_in}"
        )));
    }
    let x = gaussian_matrix(m, d_in, seed);
    let g = linalg::matmul_nt(&x, &x)?.scaled(1.0 / d_in as f64);
    let values = linalg::singular_values(&g, "Wishart null")?;
    Ok(Spectrum { values, m, d_in })
}

/// Query/key pair with a planted rank-`rank` spike of strength `theta`:
///
/// ```text
/// wq = Xq + theta · U · Vᵀ
/// wk = Xk + theta · U · Vᵀ
/// ```
///
/// `Xq`, `Xk` are independent standard Gaussian `m x d_in` backgrounds, `U`
/// (`m x rank`) has orthonormal columns, and `V` (`d_in x rank`) has
/// orthogonal columns of norm `sqrt(d_in)`, so `theta` is measured against
/// the per-row noise norm. Both operands share the same factors, so the
/// spike survives in `wq · wkᵀ / d_in` with strength about `theta²`.
/// `theta = 0` returns the two backgrounds unchanged.
pub fn spiked_pair(m: usize, d_in: usize, theta: f64, rank: usize, seed: u64) -> Result<(Matrix, Matrix)> {
    if rank > m.min(d_in) {
        return Err(Error::Config(format!(
            "spike rank {rank} exceeds min(m, d_in) = {}",
            m.min(d_in)
        )));
    }
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::Config(format!("spike strength must be >= 0, got {theta}")));
    }
    let mut rng = Rng::new(seed);
    let mut wq = rng.gaussian_matrix(m, d_in, 1.0);
    let mut wk = rng.gaussian_matrix(m, d_in, 1.0);
    if rank == 0 || theta == 0.0 {
        return Ok((wq, wk));
    }
    let u = linalg::orthonormal_columns(&rng.gaussian_matrix(m, rank, 1.0));
    let v = linalg::orthonormal_columns(&rng.gaussian_matrix(d_in, rank, 1.0)).scaled((d_in as f64).sqrt());
    let spike = linalg::matmul_nt(&u, &v)?;
    wq.add_scaled(&spike, theta);
    wk.add_scaled(&spike, theta);
    Ok((wq, wk))
}

/// Continuous part of the MP density at `x` for aspect ratio `gamma`
/// (unit variance). Zero outside `(lambda_minus, lambda_plus)`; for
/// `gamma > 1` it integrates to `1 / gamma` and the rest sits at zero, see
/// [`mp_zero_mass`].
pub fn mp_density(x: f64, gamma: f64) -> f64 {
    assert!(gamma > 0.0, "gamma must be positive");
    let root = gamma.sqrt();
    let lo = (1.0 - root).powi(2);
    let hi = (1.0 + root).powi(2);
    if x <= lo || x >= hi || x <= 0.0 {
        return 0.0;
    }
    ((hi - x) * (x - lo)).sqrt() / (2.0 * std::f64::consts::PI * gamma * x)
}

/// Point mass of the MP law at zero, `max(0, 1 - 1/gamma)`.
pub fn mp_zero_mass(gamma: f64) -> f64 {
    (1.0 - 1.0 / gamma).max(0.0)
}
