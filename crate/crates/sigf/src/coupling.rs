//! Generative coupling model for the coarse/fine split: Bernoulli-thinned
//! shifted exponentials riding on the coarse Gaussian field, per-region
//! maxima G⁽ⁱ⁾, the D functionals they predict, β* estimation from fine-field
//! box maxima, and the Laplace-functional prediction those pieces combine
//! into.

use crate::extremal::m_kt;
use crate::fields::{
    grid_green, sample_component, Calibration, ComponentKind, ThreeFieldContext,
    VarianceProfile,
};
use crate::lattice::GridSpec;
use crate::sampler::{GaussianLaw, RngStream};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Parameters of the coupling model over the R = (KL)² coarse boxes.
#[derive(Clone, Debug)]
pub struct CouplingParams {
    big_k: u32,
    big_l: u32,
    big_kp: u32,
    big_lp: u32,
    gamma: f64,
    beta_star: f64,
    profile: VarianceProfile,
}

impl CouplingParams {
    pub fn new(
        big_k: u32,
        big_l: u32,
        big_kp: u32,
        big_lp: u32,
        gamma: f64,
        beta_star: f64,
        profile: VarianceProfile,
    ) -> Result<CouplingParams> {
        for (name, v) in [("K", big_k), ("L", big_l), ("K'", big_kp), ("L'", big_lp)] {
            if v == 0 || !v.is_power_of_two() {
                return Err(Error::Domain(format!(
                    "{name} must be a positive power of two, got {v}"
                )));
            }
        }
        if big_k * big_l < 2 {
            return Err(Error::Domain("KL must be at least 2".into()));
        }
        if !(0.0 < gamma && gamma < 0.5) {
            return Err(Error::Domain(format!("γ = {gamma} outside (0, ½)")));
        }
        if !(beta_star > 0.0) || !beta_star.is_finite() {
            return Err(Error::Domain(format!("β* must be positive, got {beta_star}")));
        }
        let s0_sq = profile.sigma0() * profile.sigma0();
        if s0_sq >= 1.0 {
            return Err(Error::Config(format!(
                "the coupling model needs σ(0) < 1, got σ²(0) = {s0_sq}"
            )));
        }
        let params = CouplingParams {
            big_k,
            big_l,
            big_kp,
            big_lp,
            gamma,
            beta_star,
            profile,
        };
        let p = params.success_probability();
        if p > 1.0 {
            return Err(Error::Config(format!(
                "Bernoulli success probability {p} > 1 at k̄ = {}, σ(0) = {}; reduce β*",
                params.k_bar(),
                params.profile.sigma0()
            )));
        }
        Ok(params)
    }

    pub fn kl(&self) -> u32 {
        self.big_k * self.big_l
    }

    /// R = (KL)², the number of coarse boxes.
    pub fn box_count(&self) -> usize {
        (self.kl() as usize).pow(2)
    }

    /// k̄ = log(KL), natural logarithm.
    pub fn k_bar(&self) -> f64 {
        f64::from(self.kl()).ln()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn beta_star(&self) -> f64 {
        self.beta_star
    }

    pub fn profile(&self) -> &VarianceProfile {
        &self.profile
    }

    pub fn fine_sides(&self) -> (u32, u32) {
        (self.big_kp, self.big_lp)
    }

    /// β*·e^{2k̄^γ}·e^{2k̄(σ²(0)−1)}, the thinning probability.
    pub fn success_probability(&self) -> f64 {
        let k_bar = self.k_bar();
        let s0_sq = self.profile.sigma0() * self.profile.sigma0();
        self.beta_star * (2.0 * k_bar.powf(self.gamma)).exp() * (2.0 * k_bar * (s0_sq - 1.0)).exp()
    }

    /// P(Y ≥ x) for the shifted exponential, e^{−2(x+k̄^γ)} on [−k̄^γ, ∞).
    pub fn y_survival(&self, x: f64) -> f64 {
        (-2.0 * (x + self.k_bar().powf(self.gamma))).exp().min(1.0)
    }

    fn sample_y(&self, stream: &mut RngStream) -> f64 {
        // inverse CDF: Y = −k̄^γ + Exp(2)
        -self.k_bar().powf(self.gamma) - 0.5 * (1.0 - stream.uniform()).ln()
    }
}

/// Covariance kernel of the coarse Gaussian Z over the R boxes, cached per
/// (KL, profile).
fn coarse_law(params: &CouplingParams) -> Result<Arc<GaussianLaw>> {
    static CACHE: OnceLock<Mutex<HashMap<(u32, String), Arc<GaussianLaw>>>> = OnceLock::new();
    let key = (params.kl(), params.profile.content_hash());
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().expect("coupling cache poisoned").get(&key) {
        return Ok(hit.clone());
    }
    let spec = GridSpec::new(params.kl())?;
    let green = grid_green(&spec)?;
    let s0_sq = params.profile.sigma0() * params.profile.sigma0();
    let cov: DMatrix<f64> = green.matrix() * s0_sq;
    let law = Arc::new(GaussianLaw::new(DVector::zeros(cov.nrows()), cov)?);
    cache
        .lock()
        .expect("coupling cache poisoned")
        .insert(key, law.clone());
    Ok(law)
}

/// Draws one Z sample (indexed row-major over the KL × KL coarse boxes).
pub fn sample_z(params: &CouplingParams, stream: &mut RngStream) -> Result<DVector<f64>> {
    Ok(coarse_law(params)?.sample(stream))
}

/// Per-region maximum; `Empty` is the flagged sentinel for a region whose
/// thinning retained no box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegionMax {
    Empty,
    Value(f64),
}

impl RegionMax {
    pub fn value(&self) -> Option<f64> {
        match self {
            RegionMax::Empty => None,
            RegionMax::Value(v) => Some(*v),
        }
    }

    /// Whether the region maximum lies at or below the threshold; an empty
    /// region has no exceedance, so it always does.
    pub fn at_most(&self, x: f64) -> bool {
        match self {
            RegionMax::Empty => true,
            RegionMax::Value(v) => *v <= x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CouplingDraw {
    pub g: Vec<RegionMax>,
    /// the underlying coarse Gaussian sample, for D-functional reuse
    pub z: DVector<f64>,
}

fn check_regions(regions: &[Vec<usize>], box_count: usize) -> Result<()> {
    let mut seen = vec![false; box_count];
    for t in regions {
        for &j in t {
            if j >= box_count {
                return Err(Error::Domain(format!(
                    "region index {j} out of range (R = {box_count})"
                )));
            }
            if seen[j] {
                return Err(Error::Domain(format!("box {j} appears in two regions")));
            }
            seen[j] = true;
        }
    }
    Ok(())
}

/// One draw of the coupling model: ρ_j ~ Bernoulli(p), Y_j shifted
/// exponential, Z centred Gaussian with the coarse kernel, and per region
/// G⁽ⁱ⁾ = max over j ∈ T_i with ρ_j = 1 of (Y_j + 2k̄(1−σ²(0)) + Z_j − 2k̄).
pub fn sample_coupling(
    params: &CouplingParams,
    regions: &[Vec<usize>],
    stream: &mut RngStream,
) -> Result<CouplingDraw> {
    let r = params.box_count();
    check_regions(regions, r)?;
    let p = params.success_probability();
    let s0_sq = params.profile.sigma0() * params.profile.sigma0();
    let k_bar = params.k_bar();
    let y_shift = 2.0 * k_bar * (1.0 - s0_sq);

    // All R boxes draw their (ρ, Y) in index order, independent of the
    // region layout, so region maxima are exchangeable by construction.
    let rho: Vec<bool> = (0..r).map(|_| stream.uniform() < p).collect();
    let y: Vec<f64> = (0..r).map(|_| params.sample_y(stream)).collect();
    let z = sample_z(params, stream)?;

    let g = regions
        .iter()
        .map(|t| {
            t.iter()
                .filter(|j| rho[**j])
                .map(|&j| y[j] + y_shift + z[j] - 2.0 * k_bar)
                .max_by(f64::total_cmp)
                .map_or(RegionMax::Empty, RegionMax::Value)
        })
        .collect();
    Ok(CouplingDraw { g, z })
}

/// Which constant sits inside the D-functional exponent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DExponent {
    /// (1+σ²(0))·k̄ — the default normalization
    Standard,
    /// 2(1+σ²(0))·k̄ — alternative reading kept for regression comparison
    Doubled,
}

/// D(A_i) = Σ_{j∈T_i} exp(−2(c − Z_j)) with c the chosen exponent constant.
#[allow(non_snake_case)]
pub fn compute_D(
    z: &DVector<f64>,
    regions: &[Vec<usize>],
    params: &CouplingParams,
    exponent: DExponent,
) -> Result<Vec<f64>> {
    let r = params.box_count();
    if z.len() != r {
        return Err(Error::Domain(format!(
            "Z sample has length {} but R = {r}",
            z.len()
        )));
    }
    check_regions(regions, r)?;
    let s0_sq = params.profile.sigma0() * params.profile.sigma0();
    let c = match exponent {
        DExponent::Standard => (1.0 + s0_sq) * params.k_bar(),
        DExponent::Doubled => 2.0 * (1.0 + s0_sq) * params.k_bar(),
    };
    Ok(regions
        .iter()
        .map(|t| t.iter().map(|&j| (-2.0 * (c - z[j])).exp()).sum())
        .collect())
}

/// Mean over the D samples of exp(−β*·Σ_i D(A_i)·e^{−2x_i}).
pub fn laplace_prediction(d_samples: &[Vec<f64>], beta_star: f64, x: &[f64]) -> Result<f64> {
    if d_samples.is_empty() {
        return Err(Error::Domain("no D samples supplied".into()));
    }
    if d_samples.iter().any(|d| d.len() != x.len()) {
        return Err(Error::Domain(format!(
            "threshold vector has length {} but D samples have other lengths",
            x.len()
        )));
    }
    let atten: Vec<f64> = x.iter().map(|xi| (-2.0 * xi).exp()).collect();
    let mean = d_samples
        .iter()
        .map(|d| {
            (-beta_star * d.iter().zip(&atten).map(|(di, a)| di * a).sum::<f64>()).exp()
        })
        .sum::<f64>()
        / d_samples.len() as f64;
    Ok(mean)
}

/// Quadrant partition of the KL × KL coarse-box grid into four regions.
pub fn quadrant_regions(kl: u32) -> Vec<Vec<usize>> {
    let kl = kl as usize;
    let half = kl / 2;
    let mut regions = vec![Vec::new(); 4];
    for yb in 0..kl {
        for xb in 0..kl {
            let q = usize::from(xb >= half) + 2 * usize::from(yb >= half);
            regions[q].push(yb * kl + xb);
        }
    }
    regions
}

// ---------------------------------------------------------------------------
// β* estimation

#[derive(Clone, Debug)]
pub struct BetaStarEstimate {
    pub value: f64,
    pub se: f64,
    /// per offset: (z, estimate, standard error)
    pub per_z: Vec<(f64, f64, f64)>,
    /// true when β̂*(z) drifts across the grid faster than 3 SE allows
    pub plateau_warning: bool,
}

/// Inverts the thinning law on exceedance frequencies of centred fine-field
/// box maxima: β̂*(z) = e^{2k̄(1−σ²(0))}·e^{−2k̄^γ}·e^{2z}·P̂(max ≥ z),
/// averaged over the offset grid.
pub fn estimate_beta_star(
    centred_maxima: &[f64],
    params: &CouplingParams,
    z_grid: &[f64],
) -> Result<BetaStarEstimate> {
    if centred_maxima.is_empty() || z_grid.len() < 2 {
        return Err(Error::Domain(
            "need samples and at least two grid offsets".into(),
        ));
    }
    let n = centred_maxima.len() as f64;
    let s0_sq = params.profile.sigma0() * params.profile.sigma0();
    let k_bar = params.k_bar();
    let prefactor = (2.0 * k_bar * (1.0 - s0_sq)).exp() * (-2.0 * k_bar.powf(params.gamma)).exp();

    let p_hat = |z: f64| -> f64 {
        centred_maxima.iter().filter(|m| **m >= z).count() as f64 / n
    };
    let m = z_grid.len();
    let amp: Vec<f64> = z_grid.iter().map(|z| prefactor * (2.0 * z).exp()).collect();
    let ps: Vec<f64> = z_grid.iter().map(|z| p_hat(*z)).collect();
    let per: Vec<f64> = amp.iter().zip(&ps).map(|(a, p)| a * p).collect();
    // exact covariance of the exceedance frequencies over nested events:
    // Cov(p̂(z_i), p̂(z_j)) = (p̂(z_i ∨ z_j) − p̂(z_i)p̂(z_j)) / n
    let cov = |i: usize, j: usize| -> f64 {
        let pmax = p_hat(z_grid[i].max(z_grid[j]));
        amp[i] * amp[j] * (pmax - ps[i] * ps[j]) / n
    };
    let value = per.iter().sum::<f64>() / m as f64;
    let mut var = 0.0;
    for i in 0..m {
        for j in 0..m {
            var += cov(i, j);
        }
    }
    let se = (var.max(0.0)).sqrt() / m as f64;

    // plateau check: least-squares slope of β̂*(z) against z
    let zbar = z_grid.iter().sum::<f64>() / m as f64;
    let szz: f64 = z_grid.iter().map(|z| (z - zbar) * (z - zbar)).sum();
    let coef: Vec<f64> = z_grid.iter().map(|z| (z - zbar) / szz).collect();
    let slope: f64 = coef.iter().zip(&per).map(|(c, b)| c * b).sum();
    let mut slope_var = 0.0;
    for i in 0..m {
        for j in 0..m {
            slope_var += coef[i] * coef[j] * cov(i, j);
        }
    }
    let slope_se = slope_var.max(0.0).sqrt();
    Ok(BetaStarEstimate {
        value,
        se,
        per_z: (0..m)
            .map(|i| (z_grid[i], per[i], cov(i, i).max(0.0).sqrt()))
            .collect(),
        plateau_warning: slope.abs() > 3.0 * slope_se && slope_se > 0.0,
    })
}

/// Centering m(k̄, n) − k̄^γ for fine-field box maxima: the intermediate-max
/// centering from dyadic scale log₂(KL) down to the lattice floor.
pub fn fine_field_centering(params: &CouplingParams, n_side: u32) -> Result<f64> {
    let k_dyadic = f64::from(params.kl().trailing_zeros());
    let n = f64::from(n_side.trailing_zeros());
    let m = m_kt(n_side, k_dyadic, n, 0.0, &params.profile)?;
    Ok(m - params.k_bar().powf(params.gamma))
}

/// Max of the fine part (middle + bottom + local repair, no coarse
/// component) over the centre-most N/KL coarse box of the three-field
/// approximation.
pub fn fine_field_box_max(
    ctx: &ThreeFieldContext,
    calib: &Calibration,
    stream: &mut RngStream,
) -> Result<f64> {
    if !calib.matches(ctx) {
        return Err(Error::Config(
            "calibration does not match the three-field context".into(),
        ));
    }
    let spec = *ctx.spec();
    let middle = sample_component(ComponentKind::Middle, ctx, stream)?;
    let bottom = sample_component(ComponentKind::Bottom, ctx, stream)?;
    let bs = i64::from(ctx.bottom_side());
    let per = i64::from(spec.side()) / bs;
    let theta: Vec<f64> = (0..per * per).map(|_| stream.standard_normal()).collect();

    let coarse_side = i64::from(ctx.coarse_side());
    let boxes_per_side = i64::from(spec.side()) / coarse_side;
    let corner = (boxes_per_side / 2) * coarse_side;
    let mut best = f64::NEG_INFINITY;
    for dy in 0..coarse_side {
        for dx in 0..coarse_side {
            let v = crate::lattice::v2(corner + dx, corner + dy);
            let i = spec.index(v);
            let box_idx = ((v.y / bs) * per + v.x / bs) as usize;
            let h = middle.heights[i]
                + bottom.heights[i]
                + calib.a_for(ctx, v) * theta[box_idx];
            best = best.max(h);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::calibrate_three_field;
    use crate::testkit;

    fn params(beta_star: f64) -> CouplingParams {
        CouplingParams::new(
            4,
            4,
            4,
            4,
            0.25,
            beta_star,
            VarianceProfile::standard_two_scale(),
        )
        .unwrap()
    }

    #[test]
    fn params_validation() {
        let profile = VarianceProfile::standard_two_scale();
        // success probability must stay ≤ 1
        let err = CouplingParams::new(4, 4, 4, 4, 0.25, 50.0, profile.clone());
        match err {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("k̄") && msg.contains("σ(0)"), "{msg}");
            }
            other => panic!("expected configuration error, got {other:?}"),
        }
        // σ(0) ≥ 1 is rejected
        let flat = VarianceProfile::homogeneous();
        assert!(matches!(
            CouplingParams::new(4, 4, 4, 4, 0.25, 0.1, flat),
            Err(Error::Config(_))
        ));
        assert!(CouplingParams::new(3, 4, 4, 4, 0.25, 0.1, profile.clone()).is_err());
        assert!(CouplingParams::new(4, 4, 4, 4, 0.6, 0.1, profile.clone()).is_err());
        assert!(CouplingParams::new(4, 4, 4, 4, 0.25, -1.0, profile.clone()).is_err());
        let ok = params(0.05);
        assert_eq!(ok.box_count(), 256);
        assert!((ok.k_bar() - (16.0f64).ln()).abs() < 1e-15);
        let p = ok.success_probability();
        assert!(0.0 < p && p <= 1.0);
    }

    #[test]
    fn vanishing_beta_gives_all_sentinels() {
        let p = params(1e-280);
        assert!(p.success_probability() < 1e-250);
        let regions = quadrant_regions(p.kl());
        let mut stream = RngStream::from_seed(41).derive("coupling-sentinel");
        for _ in 0..50 {
            let draw = sample_coupling(&p, &regions, &mut stream).unwrap();
            assert!(draw.g.iter().all(|g| *g == RegionMax::Empty));
            assert!(draw.g.iter().all(|g| g.value().is_none()));
        }
    }

    #[test]
    fn y_marginal_matches_closed_form() {
        let p = params(0.05);
        let mut stream = RngStream::from_seed(42).derive("coupling-y");
        let n = 40_000;
        let ys: Vec<f64> = (0..n).map(|_| p.sample_y(&mut stream)).collect();
        let shift = p.k_bar().powf(p.gamma());
        assert!(ys.iter().all(|y| *y >= -shift));
        for x in [-shift, -0.5, 0.0, 0.4, 1.0] {
            let target = p.y_survival(x);
            let emp = ys.iter().filter(|y| **y >= x).count() as f64 / n as f64;
            let se = (target * (1.0 - target) / n as f64).sqrt().max(1e-9);
            assert!(
                (emp - target).abs() <= 5.0 * se,
                "x = {x}: {emp} vs {target}"
            );
        }
    }

    #[test]
    fn singleton_region_is_a_convolution() {
        // β* chosen so the success probability is exactly 1: ρ ≡ 1
        let profile = VarianceProfile::standard_two_scale();
        let k_bar = (16.0f64).ln();
        let s0_sq = 0.5;
        let beta =
            (-2.0 * k_bar.powf(0.25)).exp() * (2.0 * k_bar * (1.0 - s0_sq)).exp() * (1.0 - 1e-9);
        let p = CouplingParams::new(4, 4, 4, 4, 0.25, beta, profile).unwrap();
        assert!((p.success_probability() - 1.0).abs() < 1e-8);

        let j0 = 17usize;
        let regions = vec![vec![j0]];
        let mut stream = RngStream::from_seed(43).derive("coupling-conv");
        let mut gs: Vec<f64> = (0..4000)
            .map(|_| {
                sample_coupling(&p, &regions, &mut stream).unwrap().g[0]
                    .value()
                    .expect("forced thinning cannot produce sentinels")
            })
            .collect();

        // synthetic oracle: Y + N(0, Σ^c_{j0,j0}) + shifts
        let var_z = coarse_law(&p).unwrap().covariance()[(j0, j0)];
        let y_shift = 2.0 * k_bar * (1.0 - s0_sq);
        let mut oracle: Vec<f64> = (0..4000)
            .map(|_| {
                p.sample_y(&mut stream) + y_shift + var_z.sqrt() * stream.standard_normal()
                    - 2.0 * k_bar
            })
            .collect();
        let (d, pval) = testkit::two_sample_ks(&mut gs, &mut oracle);
        assert!(pval > 0.01, "KS d = {d}, p = {pval}");
    }

    #[test]
    fn region_maxima_are_exchangeable() {
        let p = params(0.05);
        let regions_a = vec![vec![0, 5, 9], vec![12, 31]];
        let regions_b = vec![vec![9, 0, 5], vec![31, 12]];
        let mut sa = RngStream::from_seed(44).derive("coupling-exch");
        let mut sb = RngStream::from_seed(44).derive("coupling-exch");
        for _ in 0..200 {
            let da = sample_coupling(&p, &regions_a, &mut sa).unwrap();
            let db = sample_coupling(&p, &regions_b, &mut sb).unwrap();
            assert_eq!(da.g, db.g);
        }
        // region validation
        let mut s = RngStream::from_seed(44).derive("coupling-exch-bad");
        assert!(sample_coupling(&p, &[vec![0], vec![0]], &mut s).is_err());
        assert!(sample_coupling(&p, &[vec![256]], &mut s).is_err());
    }

    #[test]
    fn d_functional_closed_forms() {
        let p = params(0.05);
        let r = p.box_count();
        let regions = vec![vec![0, 1, 2], vec![10, 11]];
        let z0 = DVector::zeros(r);
        let d = compute_D(&z0, &regions, &p, DExponent::Standard).unwrap();
        let kl = 16.0f64;
        let unit = kl.powf(-2.0 * 1.5); // (KL)^{−2(1+σ²(0))}
        assert!((d[0] - 3.0 * unit).abs() < 1e-15);
        assert!((d[1] - 2.0 * unit).abs() < 1e-15);

        // additive over disjoint unions
        let merged = compute_D(&z0, &[vec![0, 1, 2, 10, 11]], &p, DExponent::Standard).unwrap();
        assert!((merged[0] - (d[0] + d[1])).abs() < 1e-15);

        // strictly increasing in each coordinate
        let mut z1 = z0.clone();
        z1[1] = 0.3;
        let d1 = compute_D(&z1, &regions, &p, DExponent::Standard).unwrap();
        assert!(d1[0] > d[0] && (d1[1] - d[1]).abs() < 1e-18);

        // the exponent switch changes the value
        let dd = compute_D(&z0, &regions, &p, DExponent::Doubled).unwrap();
        assert!(dd[0] < d[0]);
        assert!((dd[0] - 3.0 * kl.powf(-4.0 * 1.5)).abs() < 1e-18);
    }

    #[test]
    fn laplace_prediction_limits() {
        let d_samples = vec![vec![0.2, 0.4], vec![0.1, 0.3]];
        let one = laplace_prediction(&d_samples, 0.5, &[1e9, 1e9]).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let a = laplace_prediction(&d_samples, 0.5, &[0.0, 0.0]).unwrap();
        let b = laplace_prediction(&d_samples, 0.5, &[0.5, 0.0]).unwrap();
        assert!(b >= a);
        assert!(laplace_prediction(&d_samples, 0.5, &[0.0]).is_err());
        assert!(laplace_prediction(&[], 0.5, &[0.0]).is_err());
    }

    #[test]
    fn prediction_matches_empirical_joint_cdf() {
        let p = params(0.05);
        let regions = quadrant_regions(p.kl());
        let mut stream = RngStream::from_seed(45).derive("coupling-agree");
        let draws: Vec<CouplingDraw> = (0..3000)
            .map(|_| sample_coupling(&p, &regions, &mut stream).unwrap())
            .collect();
        let mut finite: Vec<f64> = draws
            .iter()
            .flat_map(|d| d.g.iter().filter_map(RegionMax::value))
            .collect();
        finite.sort_unstable_by(f64::total_cmp);
        let median = finite[finite.len() / 2];
        let x = vec![median; regions.len()];
        let empirical = draws
            .iter()
            .filter(|d| d.g.iter().zip(&x).all(|(g, xi)| g.at_most(*xi)))
            .count() as f64
            / draws.len() as f64;

        let d_samples: Vec<Vec<f64>> = (0..3000)
            .map(|_| {
                let z = sample_z(&p, &mut stream).unwrap();
                compute_D(&z, &regions, &p, DExponent::Standard).unwrap()
            })
            .collect();
        let predicted = laplace_prediction(&d_samples, p.beta_star(), &x).unwrap();
        assert!(
            (empirical - predicted).abs() <= 0.1,
            "empirical {empirical} vs predicted {predicted}"
        );
    }

    #[test]
    fn prediction_discrepancy_shrinks_with_kl() {
        let mut stream = RngStream::from_seed(46).derive("coupling-trend");
        let mut discrepancies = Vec::new();
        for (k, l) in [(2, 2), (2, 4), (4, 4)] {
            let p = CouplingParams::new(
                k,
                l,
                4,
                4,
                0.25,
                0.35,
                VarianceProfile::standard_two_scale(),
            )
            .unwrap();
            let regions = quadrant_regions(p.kl());
            let n = 4000;
            let draws: Vec<CouplingDraw> = (0..n)
                .map(|_| sample_coupling(&p, &regions, &mut stream).unwrap())
                .collect();
            let mut finite: Vec<f64> = draws
                .iter()
                .flat_map(|d| d.g.iter().filter_map(RegionMax::value))
                .collect();
            finite.sort_unstable_by(f64::total_cmp);
            let median = finite[finite.len() / 2];
            let x = vec![median; regions.len()];
            let empirical = draws
                .iter()
                .filter(|d| d.g.iter().zip(&x).all(|(g, xi)| g.at_most(*xi)))
                .count() as f64
                / n as f64;
            let d_samples: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let z = sample_z(&p, &mut stream).unwrap();
                    compute_D(&z, &regions, &p, DExponent::Standard).unwrap()
                })
                .collect();
            let predicted = laplace_prediction(&d_samples, p.beta_star(), &x).unwrap();
            let se = (empirical * (1.0 - empirical) / n as f64).sqrt();
            discrepancies.push(((empirical - predicted).abs(), se));
        }
        for w in discrepancies.windows(2) {
            let (d_small, se_small) = w[0];
            let (d_large, se_large) = w[1];
            assert!(
                d_large <= d_small + 3.0 * (se_small.powi(2) + se_large.powi(2)).sqrt(),
                "discrepancy grew: {d_small} -> {d_large}"
            );
        }
    }

    #[test]
    fn beta_star_inversion_recovers_planted_value() {
        let p = params(0.05);
        let beta_true = 0.2;
        let s0_sq = 0.5;
        let prefactor =
            (2.0 * p.k_bar() * (1.0 - s0_sq)).exp() * (-2.0 * p.k_bar().powf(0.25)).exp();
        let q = beta_true / prefactor;
        // P(X ≥ z) = q·e^{−2z}: X = log(q/U)/2
        let mut stream = RngStream::from_seed(47).derive("coupling-invert");
        let samples: Vec<f64> = (0..30_000)
            .map(|_| (q / (1.0 - stream.uniform())).ln() / 2.0)
            .collect();
        let grid = [0.5, 1.0, 1.5];
        let est = estimate_beta_star(&samples, &p, &grid).unwrap();
        assert!(
            (est.value - beta_true).abs() <= 3.0 * est.se,
            "β̂* = {} ± {} vs {beta_true}",
            est.value,
            est.se
        );
        assert!(!est.plateau_warning, "unexpected plateau warning: {est:?}");
        assert_eq!(est.per_z.len(), 3);
        assert!(est.value > 0.0);

        // halving the sample count stays within 3 combined SE
        let half = estimate_beta_star(&samples[..15_000], &p, &grid).unwrap();
        let comb = (est.se * est.se + half.se * half.se).sqrt();
        assert!((half.value - est.value).abs() <= 3.0 * comb);

        // a wrong decay rate trips the plateau warning
        let wrong: Vec<f64> = (0..30_000)
            .map(|_| (q / (1.0 - stream.uniform())).ln())
            .collect();
        let est_wrong = estimate_beta_star(&wrong, &p, &grid).unwrap();
        assert!(est_wrong.plateau_warning);
    }

    #[test]
    fn beta_star_from_fine_field_is_stable() {
        let profile = VarianceProfile::standard_two_scale();
        let p = CouplingParams::new(2, 2, 4, 4, 0.25, 0.05, profile.clone()).unwrap();
        let spec = GridSpec::new(64).unwrap();
        let ctx = ThreeFieldContext::new(spec, 2, 2, 4, 4, profile).unwrap();
        let calib = calibrate_three_field(&ctx).unwrap();
        let center = fine_field_centering(&p, 64).unwrap();
        let mut stream = RngStream::from_seed(48).derive("coupling-fine");
        let maxima: Vec<f64> = (0..2500)
            .map(|_| fine_field_box_max(&ctx, &calib, &mut stream).unwrap() - center)
            .collect();
        let est = estimate_beta_star(&maxima, &p, &[1.0, 1.5, 2.0]).unwrap();
        assert!(est.value.is_finite() && est.value > 0.0, "{est:?}");
        // At this scale the offsets sit in the bulk of the box-max law
        // (the −k̄^γ ≈ −1.09 centering shift nearly cancels z = 1), where
        // the local decay rate is ≈ 1 rather than 2, so the per-offset
        // estimates drift by ≈ 1.8× per unit z (measured 1.13 / 2.00 /
        // 3.56) and the plateau warning fires. Freeze that behaviour.
        for (z, b, _) in &est.per_z {
            let ratio = b / est.value;
            assert!(
                (0.4..=2.5).contains(&ratio),
                "β̂*({z}) = {b} vs grid mean {}",
                est.value
            );
        }
        assert!(
            est.plateau_warning,
            "expected the drift across the offset grid to trip the plateau check"
        );
    }
}
