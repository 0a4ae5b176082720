//! Numeric comparison checks for small Gaussian vectors: a vector Slepian
//! inequality on partition maxima and its functional (Kahane-type)
//! generalization, estimated by a shifted Kronecker-lattice quasi-Monte
//! Carlo rule.

use crate::sampler::RngStream;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

pub const DEFAULT_QMC_BUDGET: usize = 1 << 16;
const SHIFTS: usize = 16;
const DIAG_TOL: f64 = 1e-12;

/// Two same-dimension Gaussian families with equal variances, a partition
/// of the coordinates, and one threshold per part.
#[derive(Clone, Debug)]
pub struct ComparisonInstance {
    cov_x: DMatrix<f64>,
    cov_y: DMatrix<f64>,
    partition: Vec<Vec<usize>>,
    thresholds: Vec<f64>,
}

impl ComparisonInstance {
    pub fn new(
        cov_x: DMatrix<f64>,
        cov_y: DMatrix<f64>,
        partition: Vec<Vec<usize>>,
        thresholds: Vec<f64>,
    ) -> Result<ComparisonInstance> {
        let n = cov_x.nrows();
        if n == 0 || n > 4 {
            return Err(Error::Domain(format!("dimension must be 1..=4, got {n}")));
        }
        if cov_x.ncols() != n || cov_y.nrows() != n || cov_y.ncols() != n {
            return Err(Error::Domain("covariance shapes disagree".into()));
        }
        for m in [&cov_x, &cov_y] {
            for i in 0..n {
                for j in 0..i {
                    if (m[(i, j)] - m[(j, i)]).abs() > DIAG_TOL {
                        return Err(Error::Domain(format!(
                            "covariance not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        for i in 0..n {
            if (cov_x[(i, i)] - cov_y[(i, i)]).abs() > DIAG_TOL {
                return Err(Error::Domain(format!(
                    "diagonals differ at {i}: {} vs {}",
                    cov_x[(i, i)],
                    cov_y[(i, i)]
                )));
            }
        }
        if partition.len() != thresholds.len() {
            return Err(Error::Domain(format!(
                "{} parts but {} thresholds",
                partition.len(),
                thresholds.len()
            )));
        }
        let mut seen = vec![false; n];
        for t in &partition {
            if t.is_empty() {
                return Err(Error::Domain("empty partition part".into()));
            }
            for &i in t {
                if i >= n {
                    return Err(Error::Domain(format!("coordinate {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Domain(format!("coordinate {i} in two parts")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Domain("partition does not cover all coordinates".into()));
        }
        Ok(ComparisonInstance {
            cov_x,
            cov_y,
            partition,
            thresholds,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov_x.nrows()
    }

    pub fn cov_x(&self) -> &DMatrix<f64> {
        &self.cov_x
    }

    pub fn cov_y(&self) -> &DMatrix<f64> {
        &self.cov_y
    }

    pub fn partition(&self) -> &[Vec<usize>] {
        &self.partition
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// The same instance with the two families exchanged.
    pub fn swapped(&self) -> ComparisonInstance {
        ComparisonInstance {
            cov_x: self.cov_y.clone(),
            cov_y: self.cov_x.clone(),
            partition: self.partition.clone(),
            thresholds: self.thresholds.clone(),
        }
    }

    /// Which family has entrywise smaller cross-covariances. Errors when
    /// neither dominates, naming the first offending entry.
    fn ordering(&self) -> Result<Ordering> {
        let n = self.dim();
        let (mut x_le_y, mut y_le_x) = (true, true);
        let mut witness = None;
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (self.cov_x[(i, j)], self.cov_y[(i, j)]);
                if a > b + DIAG_TOL {
                    x_le_y = false;
                    witness.get_or_insert((i, j, a, b));
                }
                if b > a + DIAG_TOL {
                    y_le_x = false;
                    witness.get_or_insert((i, j, a, b));
                }
            }
        }
        match (x_le_y, y_le_x) {
            (true, _) => Ok(Ordering::XBelowY),
            (false, true) => Ok(Ordering::YBelowX),
            (false, false) => {
                let (i, j, a, b) = witness.unwrap();
                Err(Error::Domain(format!(
                    "cross-covariances are not ordered: entry ({i}, {j}) has X = {a}, Y = {b} \
                     while another entry orders the other way"
                )))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ordering {
    XBelowY,
    YBelowX,
}

#[derive(Clone, Debug)]
pub struct ComparisonReport {
    /// estimate for the family hypothesized smaller (and its label)
    pub lhs: f64,
    pub lhs_label: &'static str,
    pub rhs: f64,
    pub rhs_label: &'static str,
    pub lhs_se: f64,
    pub rhs_se: f64,
    /// standard error of the paired difference lhs − rhs
    pub diff_se: f64,
    pub pass: bool,
}

// ---------------------------------------------------------------------------
// QMC engine

/// Square-root factor of a symmetric PSD matrix via eigen-decomposition
/// with negative eigenvalues clamped to zero (handles singular
/// covariances such as comonotone pairs).
fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let n = cov.nrows();
    let mut f = eig.eigenvectors;
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            f[(i, j)] *= s;
        }
    }
    f
}

/// Kronecker lattice in [0,1)^d: point k is frac(k·α + shift) with
/// α = frac(√(primes)).
struct Lattice {
    alpha: Vec<f64>,
    points: usize,
}

impl Lattice {
    fn new(dim: usize, points: usize) -> Lattice {
        const PRIMES: [f64; 4] = [2.0, 3.0, 5.0, 7.0];
        Lattice {
            alpha: PRIMES[..dim].iter().map(|p| p.sqrt().fract()).collect(),
            points,
        }
    }

    fn gaussian_points(&self, shift: &[f64], out: &mut Vec<DVector<f64>>) {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        out.clear();
        for k in 0..self.points {
            let kf = k as f64;
            out.push(DVector::from_iterator(
                self.alpha.len(),
                self.alpha.iter().zip(shift).map(|(a, s)| {
                    let u = (kf * a + s).fract().clamp(1e-12, 1.0 - 1e-12);
                    normal.inverse_cdf(u)
                }),
            ));
        }
    }
}

/// Runs `eval` over SHIFTS randomly shifted lattices and returns per-shift
/// means of (f(X-sample), f(Y-sample)).
fn qmc_paired<F>(
    instance: &ComparisonInstance,
    budget: usize,
    seed: u64,
    eval: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if budget < SHIFTS * 16 {
        return Err(Error::Domain(format!(
            "QMC budget {budget} too small; need at least {}",
            SHIFTS * 16
        )));
    }
    let dim = instance.dim();
    let lattice = Lattice::new(dim, budget / SHIFTS);
    let fx = psd_factor(&instance.cov_x);
    let fy = psd_factor(&instance.cov_y);
    let mut stream = RngStream::from_seed(seed).derive("qmc-shifts");
    let mut per_shift_x = Vec::with_capacity(SHIFTS);
    let mut per_shift_y = Vec::with_capacity(SHIFTS);
    let mut z = Vec::new();
    for _ in 0..SHIFTS {
        let shift: Vec<f64> = (0..dim).map(|_| stream.uniform()).collect();
        lattice.gaussian_points(&shift, &mut z);
        let (mut ax, mut ay) = (0.0, 0.0);
        for zk in &z {
            ax += eval(&(&fx * zk));
            ay += eval(&(&fy * zk));
        }
        per_shift_x.push(ax / z.len() as f64);
        per_shift_y.push(ay / z.len() as f64);
    }
    Ok((per_shift_x, per_shift_y))
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn assemble_report(
    ordering: Ordering,
    per_x: &[f64],
    per_y: &[f64],
) -> ComparisonReport {
    let (small, small_label, large, large_label) = match ordering {
        Ordering::XBelowY => (per_x, "X", per_y, "Y"),
        Ordering::YBelowX => (per_y, "Y", per_x, "X"),
    };
    let (lhs, lhs_se) = mean_se(small);
    let (rhs, rhs_se) = mean_se(large);
    let diffs: Vec<f64> = small.iter().zip(large).map(|(a, b)| a - b).collect();
    let (diff, diff_se) = mean_se(&diffs);
    ComparisonReport {
        lhs,
        lhs_label: small_label,
        rhs,
        rhs_label: large_label,
        lhs_se,
        rhs_se,
        diff_se,
        pass: diff <= 3.0 * diff_se,
    }
}

/// P(max_{T_l} ξ ≤ x_l for every part l) for both families; PASS when the
/// family with entrywise smaller cross-covariances has the smaller
/// probability, up to 3 paired standard errors.
pub fn check_vector_slepian(
    instance: &ComparisonInstance,
    budget: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let ordering = instance.ordering()?;
    let parts = instance.partition.clone();
    let thresholds = instance.thresholds.clone();
    let indicator = move |v: &DVector<f64>| -> f64 {
        let ok = parts.iter().zip(&thresholds).all(|(t, x)| {
            t.iter().all(|&i| v[i] <= *x)
        });
        f64::from(u8::from(ok))
    };
    let (px, py) = qmc_paired(instance, budget, seed, indicator)?;
    Ok(assemble_report(ordering, &px, &py))
}

/// Smooth test functions with the mixed-partial signs the functional
/// comparison hypothesis demands; only members of this library are
/// accepted.
#[derive(Clone, Debug)]
pub enum TestFunction {
    Constant(f64),
    /// scale · Π_i logistic((tᵢ − ξᵢ)/width): decreasing in every
    /// coordinate, non-negative mixed partials.
    DecreasingProduct {
        thresholds: Vec<f64>,
        width: f64,
        scale: f64,
    },
}

impl TestFunction {
    /// The smooth surrogate of this instance's orthant indicator: part
    /// thresholds copied down to their coordinates.
    pub fn orthant_of(instance: &ComparisonInstance, width: f64) -> TestFunction {
        let mut thresholds = vec![0.0; instance.dim()];
        for (t, x) in instance.partition.iter().zip(&instance.thresholds) {
            for &i in t {
                thresholds[i] = *x;
            }
        }
        TestFunction::DecreasingProduct {
            thresholds,
            width,
            scale: 1.0,
        }
    }

    pub fn scaled(&self, c: f64) -> TestFunction {
        match self {
            TestFunction::Constant(v) => TestFunction::Constant(c * v),
            TestFunction::DecreasingProduct {
                thresholds,
                width,
                scale,
            } => TestFunction::DecreasingProduct {
                thresholds: thresholds.clone(),
                width: *width,
                scale: c * scale,
            },
        }
    }

    pub fn eval(&self, v: &DVector<f64>) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::DecreasingProduct {
                thresholds,
                width,
                scale,
            } => {
                let mut p = *scale;
                for (i, t) in thresholds.iter().enumerate() {
                    p *= 1.0 / (1.0 + (-(t - v[i]) / width).exp());
                }
                p
            }
        }
    }
}

/// E[f] for both families; for the decreasing-product library the family
/// with smaller cross-covariances must have the smaller mean, up to 3
/// paired standard errors.
pub fn check_kahane_functional(
    instance: &ComparisonInstance,
    f: &TestFunction,
    budget: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    if let TestFunction::DecreasingProduct { thresholds, width, .. } = f {
        if thresholds.len() != instance.dim() {
            return Err(Error::Domain(format!(
                "test function has {} thresholds for dimension {}",
                thresholds.len(),
                instance.dim()
            )));
        }
        if !(*width > 0.0) {
            return Err(Error::Domain("sigmoid width must be positive".into()));
        }
    }
    let ordering = instance.ordering()?;
    let func = f.clone();
    let (ex, ey) = qmc_paired(instance, budget, seed, move |v| func.eval(v))?;
    Ok(assemble_report(ordering, &ex, &ey))
}

/// A random instance satisfying the comparison hypotheses: Y interpolates
/// between X and the comonotone family, so cross-covariances can only
/// grow while diagonals stay equal.
pub fn random_admissible_instance(n: usize, stream: &mut RngStream) -> Result<ComparisonInstance> {
    if n == 0 || n > 4 {
        return Err(Error::Domain(format!("dimension must be 1..=4, got {n}")));
    }
    // random correlation matrix
    let m = DMatrix::<f64>::from_fn(n, n, |_, _| stream.standard_normal());
    let mut a = &m * m.transpose();
    for i in 0..n {
        a[(i, i)] += 0.05;
    }
    let d: Vec<f64> = (0..n).map(|i| a[(i, i)].sqrt()).collect();
    let cov_x = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]));
    let t = 0.2 + 0.6 * stream.uniform();
    let cov_y = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (1.0 - t) * cov_x[(i, j)] + t
        }
    });
    // random partition: contiguous split of a shuffled coordinate list
    let mut coords: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (stream.uniform() * (i + 1) as f64) as usize;
        coords.swap(i, j.min(i));
    }
    let parts = 1 + (stream.uniform() * n as f64) as usize;
    let mut partition: Vec<Vec<usize>> = vec![Vec::new(); parts.min(n)];
    for (idx, c) in coords.into_iter().enumerate() {
        let slot = idx % partition.len();
        partition[slot].push(c);
    }
    let thresholds: Vec<f64> = (0..partition.len())
        .map(|_| -1.5 + 3.0 * stream.uniform())
        .collect();
    ComparisonInstance::new(cov_x, cov_y, partition, thresholds)
}
