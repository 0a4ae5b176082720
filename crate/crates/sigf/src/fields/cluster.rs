//! Rejection samplers for the cluster law: the law of the height gaps
//! around a local maximum, either at finite window size (a conditioned
//! DGFF) or in its limit form (a pinned field shifted by the potential
//! kernel and conditioned to stay nonnegative).

use crate::greenfn::{green_table, potential_kernel};
use crate::lattice::{l1_neighborhood, v2, Region, Vertex};
use crate::sampler::{condition_gaussian, gaussian_sample, GaussianLaw, RngStream};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Largest window radius the samplers accept.
pub const CLUSTER_WINDOW_CAP: i64 = 8;
/// Default rejection budget per accepted sample.
pub const DEFAULT_CLUSTER_BUDGET: u32 = 100_000;

// comfortably below every test tolerance, and attainable by the capped
// Richardson extrapolation even for the largest window differences
const KERNEL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterMode {
    /// Conditioned DGFF on Λ_M(0): center pinned to 2σ²(1)·log M + t and
    /// required to be the maximum.
    FiniteM { m: i64 },
    /// Limit law: pinned-field draw with drift 2σ(1)·𝔞, conditioned
    /// nonnegative on the window.
    PinnedLimit,
}

/// One accepted cluster shape: gaps θ_w ≥ 0 with θ₀ = 0, plus the number
/// of proposals the rejection loop consumed.
#[derive(Clone, Debug)]
pub struct ClusterSample {
    pub theta: Vec<(Vertex, f64)>,
    pub proposals: u32,
}

impl ClusterSample {
    pub fn theta_at(&self, w: Vertex) -> Option<f64> {
        self.theta
            .binary_search_by(|(u, _)| u.cmp(&w))
            .ok()
            .map(|i| self.theta[i].1)
    }
}

enum Machinery {
    Pinned {
        law: GaussianLaw,
        offsets: Vec<Vertex>,
    },
    FiniteM {
        posterior: GaussianLaw,
        kept: Vec<Vertex>,
        cstar: f64,
    },
}

pub struct ClusterLaw {
    r: i64,
    sigma1: f64,
    budget: u32,
    mode: ClusterMode,
    machinery: Machinery,
}

fn pinned_machinery(r: i64, sigma1: f64) -> Result<Machinery> {
    let mut offsets = l1_neighborhood(v2(0, 0), r)?;
    offsets.sort_unstable();
    offsets.retain(|w| *w != v2(0, 0));
    let dim = offsets.len();
    let kernel: Vec<f64> = offsets
        .iter()
        .map(|w| potential_kernel(*w, KERNEL_TOL))
        .collect::<Result<_>>()?;
    let mean = DVector::from_fn(dim, |i, _| 2.0 * sigma1 * kernel[i]);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..=i {
            let diff = v2(offsets[i].x - offsets[j].x, offsets[i].y - offsets[j].y);
            let cross = if i == j {
                0.0
            } else {
                potential_kernel(diff, KERNEL_TOL)?
            };
            let val = kernel[i] + kernel[j] - cross;
            cov[(i, j)] = val;
            cov[(j, i)] = val;
        }
    }
    Ok(Machinery::Pinned {
        law: GaussianLaw::new(mean, cov)?,
        offsets,
    })
}

fn finite_m_machinery(r: i64, sigma1: f64, t: f64, m: i64) -> Result<Machinery> {
    if m < r {
        return Err(Error::Config(format!(
            "finite window M = {m} must be at least the cluster radius r = {r}"
        )));
    }
    let region = Region::from_vertices(l1_neighborhood(v2(0, 0), m)?);
    let table = green_table(region.clone())?;
    let dim = region.len();
    let cov = table.matrix() * (sigma1 * sigma1);
    let law = GaussianLaw::new(DVector::zeros(dim), cov)?;
    let center = region
        .position(v2(0, 0))
        .expect("origin is in its own window");
    let cstar = 2.0 * sigma1 * sigma1 * (m as f64).ln() + t;
    let (posterior, kept_idx) = condition_gaussian(&law, &[(center, cstar)])?;
    let kept = kept_idx
        .into_iter()
        .map(|i| region.vertices()[i])
        .collect();
    Ok(Machinery::FiniteM {
        posterior,
        kept,
        cstar,
    })
}

impl ClusterLaw {
    /// Strict constructor: requires σ(1) > 1 per the standing assumption on
    /// admissible profiles.
    pub fn new(r: i64, sigma1: f64, t: f64, mode: ClusterMode) -> Result<ClusterLaw> {
        if sigma1 <= 1.0 {
            return Err(Error::Config(format!(
                "cluster law needs σ(1) > 1 in strict mode, got {sigma1}"
            )));
        }
        Self::new_relaxed(r, sigma1, t, mode)
    }

    /// Exploratory constructor allowing any positive σ(1).
    pub fn new_relaxed(r: i64, sigma1: f64, t: f64, mode: ClusterMode) -> Result<ClusterLaw> {
        if !(r >= 1 && r <= CLUSTER_WINDOW_CAP) {
            return Err(Error::Config(format!(
                "cluster window radius {r} outside [1, {CLUSTER_WINDOW_CAP}]"
            )));
        }
        if !sigma1.is_finite() || sigma1 <= 0.0 {
            return Err(Error::Config(format!("σ(1) must be positive, got {sigma1}")));
        }
        let machinery = match mode {
            ClusterMode::PinnedLimit => pinned_machinery(r, sigma1)?,
            ClusterMode::FiniteM { m } => finite_m_machinery(r, sigma1, t, m)?,
        };
        Ok(ClusterLaw {
            r,
            sigma1,
            budget: DEFAULT_CLUSTER_BUDGET,
            mode,
            machinery,
        })
    }

    pub fn with_budget(mut self, budget: u32) -> ClusterLaw {
        self.budget = budget.max(1);
        self
    }

    pub fn radius(&self) -> i64 {
        self.r
    }

    pub fn mode(&self) -> ClusterMode {
        self.mode
    }

    /// The unconditioned proposal law of the pinned mode (drifted pinned
    /// field on Λ_r(0) ∖ {0}) together with its offsets.
    pub fn pinned_law(&self) -> Result<(&GaussianLaw, &[Vertex])> {
        match &self.machinery {
            Machinery::Pinned { law, offsets } => Ok((law, offsets)),
            Machinery::FiniteM { .. } => Err(Error::Config(
                "pinned proposal law is only available in pinned-limit mode".into(),
            )),
        }
    }

    /// Draw until the conditioning event holds or the budget runs out.
    pub fn sample(&self, stream: &mut RngStream) -> Result<ClusterSample> {
        match &self.machinery {
            Machinery::Pinned { law, offsets } => {
                for attempt in 1..=self.budget {
                    let z = gaussian_sample(law, stream);
                    if z.iter().all(|&x| x >= 0.0) {
                        let mut theta: Vec<(Vertex, f64)> =
                            offsets.iter().copied().zip(z.iter().copied()).collect();
                        theta.push((v2(0, 0), 0.0));
                        theta.sort_unstable_by(|a, b| a.0.cmp(&b.0));
                        return Ok(ClusterSample {
                            theta,
                            proposals: attempt,
                        });
                    }
                }
            }
            Machinery::FiniteM {
                posterior,
                kept,
                cstar,
            } => {
                for attempt in 1..=self.budget {
                    let z = gaussian_sample(posterior, stream);
                    if z.iter().all(|&x| x <= *cstar) {
                        // express the gaps in the limit law's units
                        let mut theta: Vec<(Vertex, f64)> = kept
                            .iter()
                            .zip(z.iter())
                            .filter(|(w, _)| w.l1(v2(0, 0)) <= self.r)
                            .map(|(w, &x)| (*w, (cstar - x) / self.sigma1))
                            .collect();
                        theta.push((v2(0, 0), 0.0));
                        theta.sort_unstable_by(|a, b| a.0.cmp(&b.0));
                        return Ok(ClusterSample {
                            theta,
                            proposals: attempt,
                        });
                    }
                }
            }
        }
        Err(Error::Sampling(format!(
            "cluster rejection budget of {} proposals exhausted \
             (acceptance rate below ~{:.1e})",
            self.budget,
            1.0 / f64::from(self.budget)
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{mean_with_se, sample_variance};
    use std::f64::consts::PI;

    const SIGMA1: f64 = 1.224744871391589; // √1.5

    fn accepted(law: &ClusterLaw, n: usize, stream: &mut RngStream) -> (Vec<ClusterSample>, u64) {
        let mut out = Vec::with_capacity(n);
        let mut proposals = 0u64;
        for _ in 0..n {
            let s = law.sample(stream).unwrap();
            proposals += u64::from(s.proposals);
            out.push(s);
        }
        (out, proposals)
    }

    #[test]
    fn construction_gates() {
        assert!(ClusterLaw::new(2, 1.0, 0.0, ClusterMode::PinnedLimit).is_err());
        assert!(ClusterLaw::new_relaxed(2, 1.0, 0.0, ClusterMode::PinnedLimit).is_ok());
        assert!(ClusterLaw::new(0, SIGMA1, 0.0, ClusterMode::PinnedLimit).is_err());
        assert!(ClusterLaw::new(9, SIGMA1, 0.0, ClusterMode::PinnedLimit).is_err());
        assert!(ClusterLaw::new(4, SIGMA1, 0.0, ClusterMode::FiniteM { m: 3 }).is_err());
    }

    #[test]
    fn theta_zero_and_nonnegative_in_both_modes() {
        let mut stream = RngStream::from_seed(71).derive("cluster-basic");
        for mode in [ClusterMode::PinnedLimit, ClusterMode::FiniteM { m: 5 }] {
            let law = ClusterLaw::new(2, SIGMA1, 0.0, mode).unwrap();
            for _ in 0..50 {
                let s = law.sample(&mut stream).unwrap();
                assert_eq!(s.theta_at(v2(0, 0)), Some(0.0));
                assert_eq!(s.theta.len(), 13); // |Λ_2| = 2·4+4+1
                for &(_, th) in &s.theta {
                    assert!(th >= 0.0 && th.is_finite());
                }
            }
        }
    }

    #[test]
    fn acceptance_non_increasing_in_radius() {
        let mut stream = RngStream::from_seed(72).derive("cluster-accept");
        let n = 300;
        let mut rates = Vec::new();
        for r in [2i64, 4, 6] {
            let law = ClusterLaw::new(r, SIGMA1, 0.0, ClusterMode::PinnedLimit).unwrap();
            let (_, proposals) = accepted(&law, n, &mut stream);
            let p = n as f64 / proposals as f64;
            let se = (p * (1.0 - p) / proposals as f64).sqrt();
            rates.push((p, se));
        }
        for pair in rates.windows(2) {
            let ((p_small, se_s), (p_large, se_l)) = (pair[0], pair[1]);
            let slack = 3.0 * (se_s * se_s + se_l * se_l).sqrt();
            assert!(
                p_large <= p_small + slack,
                "acceptance increased with radius: {p_small} -> {p_large}"
            );
        }
    }

    #[test]
    fn pinned_variance_at_unit_offset_is_pi() {
        let law = ClusterLaw::new(4, SIGMA1, 0.0, ClusterMode::PinnedLimit).unwrap();
        let (glaw, offsets) = law.pinned_law().unwrap();
        let i = offsets.iter().position(|w| *w == v2(1, 0)).unwrap();
        let var = glaw.covariance()[(i, i)];
        assert!(
            (var - PI).abs() <= 0.02 * PI,
            "pinned Var at (1,0): {var} vs π"
        );
        // Monte Carlo on the unconditioned proposal law agrees
        let mut stream = RngStream::from_seed(73).derive("cluster-pinned-var");
        let n = 4000;
        let draws: Vec<f64> = (0..n)
            .map(|_| gaussian_sample(glaw, &mut stream)[i])
            .collect();
        let got = sample_variance(&draws);
        let se = var * (2.0 / n as f64).sqrt();
        assert!((got - var).abs() < 5.0 * se, "MC var {got} vs {var}");
    }

    #[test]
    fn mean_gap_grows_with_radius() {
        // stochastic monotonicity: enlarging the window raises the
        // conditioned field, hence the mean gap at a fixed offset
        let mut stream = RngStream::from_seed(74).derive("cluster-fkg");
        let n = 400;
        let mut means = Vec::new();
        for r in [2i64, 5] {
            let law = ClusterLaw::new(r, SIGMA1, 0.0, ClusterMode::PinnedLimit).unwrap();
            let (samples, _) = accepted(&law, n, &mut stream);
            let vals: Vec<f64> = samples
                .iter()
                .map(|s| s.theta_at(v2(1, 0)).unwrap())
                .collect();
            means.push(mean_with_se(&vals));
        }
        let ((m_small, se_s), (m_large, se_l)) = (means[0], means[1]);
        let slack = 3.0 * (se_s * se_s + se_l * se_l).sqrt();
        assert!(
            m_large >= m_small - slack,
            "mean gap fell with radius: {m_small} -> {m_large}"
        );
    }

    #[test]
    fn budget_exhaustion_reports_sampling_error() {
        let law = ClusterLaw::new(2, SIGMA1, -50.0, ClusterMode::FiniteM { m: 6 })
            .unwrap()
            .with_budget(200);
        let mut stream = RngStream::from_seed(75).derive("cluster-budget");
        match law.sample(&mut stream) {
            Err(Error::Sampling(msg)) => assert!(msg.contains("200")),
            other => panic!("expected sampling error, got {other:?}"),
        }
    }
}
