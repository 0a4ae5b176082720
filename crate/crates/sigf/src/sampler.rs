//! Multivariate Gaussian core: factorized sampling, Schur-complement
//! conditioning and deterministic, hierarchically derived randomness
//! streams.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

const ROOT_DOMAIN: &[u8] = b"sigf/rng-stream/v1";
const SYMMETRY_TOL: f64 = 1e-12;
const JITTER_SCALE: f64 = 1e-10;

/// A deterministic randomness stream addressed by (seed, derivation path).
///
/// Child streams are keyed by hashing the parent key together with the
/// label (and index), not by consuming parent state, so replicas can be
/// derived and used in any order without statistical coupling.
pub struct RngStream {
    key: [u8; 32],
    path: Vec<String>,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> RngStream {
        let mut h = Sha256::new();
        h.update(ROOT_DOMAIN);
        h.update(seed.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        RngStream {
            key,
            path: Vec::new(),
            rng: ChaCha12Rng::from_seed(key),
        }
    }

    /// Child stream for a named sub-task.
    pub fn derive(&self, label: &str) -> RngStream {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([0x01]);
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut path = self.path.clone();
        path.push(label.to_string());
        RngStream {
            key,
            path,
            rng: ChaCha12Rng::from_seed(key),
        }
    }

    /// Child stream for the `index`-th replica of a named sub-task.
    pub fn derive_indexed(&self, label: &str, index: u64) -> RngStream {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([0x02]);
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut path = self.path.clone();
        path.push(format!("{label}[{index}]"));
        RngStream {
            key,
            path,
            rng: ChaCha12Rng::from_seed(key),
        }
    }

    /// The derivation path, `/`-joined, for diagnostics.
    pub fn path(&self) -> String {
        self.path.join("/")
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// A vector of independent standard normals.
    pub fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RngStream({})", self.path())
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// A multivariate Gaussian with cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct GaussianLaw {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Lower-triangular factor with `factor · factorᵀ ≈ cov`.
    factor: DMatrix<f64>,
    jittered: bool,
}

impl GaussianLaw {
    /// Builds a law from a mean and a symmetric PSD covariance. A single
    /// diagonal jitter of `1e-10 · trace/dim` is attempted when the exact
    /// Cholesky fails; a second failure is a numeric error.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<GaussianLaw> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Domain(format!(
                "covariance is {}×{} but mean has length {n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = cov.amax().max(1.0);
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((cov[(i, j)] - cov[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Domain(format!(
                "covariance asymmetric: max |Σ_ij − Σ_ji| = {asym:.3e}"
            )));
        }

        if cov.amax() == 0.0 {
            // Degenerate point mass: samples return the mean exactly.
            let factor = DMatrix::zeros(n, n);
            return Ok(GaussianLaw { mean, cov, factor, jittered: false });
        }

        if let Some(ch) = nalgebra::Cholesky::new(cov.clone()) {
            return Ok(GaussianLaw { mean, cov, factor: ch.unpack(), jittered: false });
        }
        let jitter = JITTER_SCALE * cov.trace() / n as f64;
        let mut padded = cov.clone();
        for i in 0..n {
            padded[(i, i)] += jitter;
        }
        match nalgebra::Cholesky::new(padded) {
            Some(ch) => Ok(GaussianLaw { mean, cov, factor: ch.unpack(), jittered: true }),
            None => {
                let diag = cov.diagonal();
                Err(Error::Numeric(format!(
                    "covariance not PSD after jitter {jitter:.3e}: dim={n}, trace={:.6e}, \
                     diag range [{:.6e}, {:.6e}]",
                    cov.trace(),
                    diag.min(),
                    diag.max()
                )))
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular factor L with LLᵀ ≈ Σ (exactly zero for a point mass).
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Whether the diagonal jitter was needed to factorize.
    pub fn jitter_applied(&self) -> bool {
        self.jittered
    }

    /// One draw: mean + L·z with z standard normal.
    pub fn sample(&self, stream: &mut RngStream) -> DVector<f64> {
        let z = stream.normal_vector(self.dim());
        &self.mean + &self.factor * z
    }
}

/// One draw from `law`, deterministic given the stream state.
pub fn gaussian_sample(law: &GaussianLaw, stream: &mut RngStream) -> DVector<f64> {
    law.sample(stream)
}

/// Conditions `law` on exact observations `observed = [(index, value), …]`.
///
/// Returns the Schur-complement posterior over the *remaining* coordinates
/// together with their original indices (sorted). An empty observation list
/// returns the law unchanged.
pub fn condition_gaussian(
    law: &GaussianLaw,
    observed: &[(usize, f64)],
) -> Result<(GaussianLaw, Vec<usize>)> {
    let n = law.dim();
    if observed.is_empty() {
        return Ok((law.clone(), (0..n).collect()));
    }
    let mut obs: Vec<(usize, f64)> = observed.to_vec();
    obs.sort_unstable_by_key(|(i, _)| *i);
    for w in obs.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Domain(format!(
                "duplicate observed index {}",
                w[0].0
            )));
        }
    }
    if obs.last().unwrap().0 >= n {
        return Err(Error::Domain(format!(
            "observed index {} out of range for dimension {n}",
            obs.last().unwrap().0
        )));
    }

    let obs_idx: Vec<usize> = obs.iter().map(|(i, _)| *i).collect();
    let kept: Vec<usize> = (0..n).filter(|i| obs_idx.binary_search(i).is_err()).collect();
    let (no, nk) = (obs_idx.len(), kept.len());

    let cov = law.covariance();
    let sigma_oo = DMatrix::from_fn(no, no, |a, b| cov[(obs_idx[a], obs_idx[b])]);
    let sigma_ko = DMatrix::from_fn(nk, no, |a, b| cov[(kept[a], obs_idx[b])]);
    let sigma_kk = DMatrix::from_fn(nk, nk, |a, b| cov[(kept[a], kept[b])]);
    let resid = DVector::from_fn(no, |a, _| obs[a].1 - law.mean()[obs_idx[a]]);

    let chol = nalgebra::Cholesky::new(sigma_oo).ok_or_else(|| {
        Error::Numeric(format!(
            "observed block singular ({} coordinates)",
            no
        ))
    })?;
    let mean_k = DVector::from_fn(nk, |a, _| law.mean()[kept[a]]) + &sigma_ko * chol.solve(&resid);
    let mut cov_k = &sigma_kk - &sigma_ko * chol.solve(&sigma_ko.transpose());
    // The Schur complement of a symmetric matrix is symmetric; restore that
    // exactly before handing it to the constructor's strict check.
    for i in 0..nk {
        for j in (i + 1)..nk {
            let s = 0.5 * (cov_k[(i, j)] + cov_k[(j, i)]);
            cov_k[(i, j)] = s;
            cov_k[(j, i)] = s;
        }
    }
    Ok((GaussianLaw::new(mean_k, cov_k)?, kept))
}
