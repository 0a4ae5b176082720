//! Box-indexed Gaussian perturbations and the independent-copy variant used
//! in the robustness arguments for the extremal process.

use super::FieldSample;
use crate::sampler::RngStream;
use crate::{Error, Result};
use nalgebra::DVector;

fn tile_count(n: u32, side: u32) -> i64 {
    i64::from(n.div_ceil(side))
}

fn tile_index(x: i64, y: i64, side: u32, per: i64) -> usize {
    let s = i64::from(side);
    ((y / s) * per + x / s) as usize
}

/// ψ̄_v = ψ_v + s₁·g_{B(v,r₁)} + s₂·g_{B(v,N/r₂)} with one i.i.d. standard
/// Gaussian per tile of each partition.
pub fn perturbed_field(
    base: &FieldSample,
    s1: f64,
    s2: f64,
    r1: u32,
    r2: u32,
    stream: &mut RngStream,
) -> Result<FieldSample> {
    let n = base.spec.side();
    if r1 == 0 || r2 == 0 || r1 > n || r2 > n {
        return Err(Error::Domain(format!(
            "perturbation box parameters r1 = {r1}, r2 = {r2} must lie in [1, {n}]"
        )));
    }
    if !(s1.is_finite() && s2.is_finite()) {
        return Err(Error::Domain("perturbation amplitudes must be finite".into()));
    }
    let side1 = r1;
    let side2 = n / r2; // ≥ 1 since r2 ≤ n
    let per1 = tile_count(n, side1);
    let per2 = tile_count(n, side2);
    let g1: Vec<f64> = (0..per1 * per1).map(|_| stream.standard_normal()).collect();
    let g2: Vec<f64> = (0..per2 * per2).map(|_| stream.standard_normal()).collect();

    let heights = DVector::from_fn(base.spec.vertex_count(), |i, _| {
        let v = base.spec.vertex(i);
        base.heights[i]
            + s1 * g1[tile_index(v.x, v.y, side1, per1)]
            + s2 * g2[tile_index(v.x, v.y, side2, per2)]
    });
    Ok(FieldSample {
        spec: base.spec,
        heights,
        underlying: None,
        tag: "perturbed".into(),
    })
}

/// ψ + √(q/log N)·ψ̃ with ψ̃ an independent copy of ψ and q ≥ 0 the squared
/// size of the perturbing profile.
pub fn star_perturbation(
    base: &FieldSample,
    indep: &FieldSample,
    norm_sq: f64,
) -> Result<FieldSample> {
    if base.spec.side() != indep.spec.side() {
        return Err(Error::Domain(
            "star perturbation needs both fields on the same grid".into(),
        ));
    }
    if !norm_sq.is_finite() || norm_sq < 0.0 {
        return Err(Error::Domain(format!(
            "squared profile size must be nonnegative, got {norm_sq}"
        )));
    }
    let c = (norm_sq / base.spec.nf().ln()).sqrt();
    Ok(FieldSample {
        spec: base.spec,
        heights: &base.heights + c * &indep.heights,
        underlying: None,
        tag: "star-perturbed".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::dgff::grid_green;
    use crate::fields::operator::{operator, sample_inhomogeneous};
    use crate::fields::profile::VarianceProfile;
    use crate::lattice::{v2, GridSpec};
    use crate::testkit::sample_variance;

    #[test]
    fn zero_amplitudes_leave_field_unchanged() {
        let spec = GridSpec::new(8).unwrap();
        let profile = VarianceProfile::standard_two_scale();
        let mut stream = RngStream::from_seed(41).derive("perturb-zero");
        let base = sample_inhomogeneous(&spec, &profile, &mut stream).unwrap();
        let out = perturbed_field(&base, 0.0, 0.0, 2, 4, &mut stream).unwrap();
        assert_eq!(out.heights, base.heights);
    }

    #[test]
    fn same_box_shares_one_draw() {
        let spec = GridSpec::new(8).unwrap();
        let profile = VarianceProfile::standard_two_scale();
        let mut stream = RngStream::from_seed(42).derive("perturb-share");
        let base = sample_inhomogeneous(&spec, &profile, &mut stream).unwrap();
        let out = perturbed_field(&base, 1.0, 0.0, 4, 8, &mut stream).unwrap();
        // vertices (0,0) and (3,3) share the side-4 box; (4,0) does not
        let d = |v| out.height_at(v) - base.height_at(v);
        assert_eq!(d(v2(0, 0)), d(v2(3, 3)));
        assert_ne!(d(v2(0, 0)), d(v2(4, 0)));
    }

    #[test]
    fn perturbed_variance_adds_amplitudes() {
        let spec = GridSpec::new(8).unwrap();
        let profile = VarianceProfile::standard_two_scale();
        let op = operator(&spec, &profile).unwrap();
        let green = grid_green(&spec).unwrap();
        let v = v2(4, 4);
        let (s1, s2) = (0.7, 1.3);
        let exact = op.variance_at(&green, v).unwrap() + s1 * s1 + s2 * s2;

        let mut stream = RngStream::from_seed(43).derive("perturb-var");
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let base = sample_inhomogeneous(&spec, &profile, &mut stream).unwrap();
                perturbed_field(&base, s1, s2, 2, 4, &mut stream)
                    .unwrap()
                    .height_at(v)
            })
            .collect();
        let var = sample_variance(&draws);
        let se = exact * (2.0 / n as f64).sqrt();
        assert!((var - exact).abs() < 5.0 * se, "var {var} vs {exact}");
    }

    #[test]
    fn parameter_domain_is_enforced() {
        let spec = GridSpec::new(8).unwrap();
        let profile = VarianceProfile::standard_two_scale();
        let mut stream = RngStream::from_seed(44).derive("perturb-domain");
        let base = sample_inhomogeneous(&spec, &profile, &mut stream).unwrap();
        assert!(perturbed_field(&base, 1.0, 1.0, 0, 2, &mut stream).is_err());
        assert!(perturbed_field(&base, 1.0, 1.0, 2, 9, &mut stream).is_err());
    }

    #[test]
    fn star_variant_is_exact_linear_combination() {
        let spec = GridSpec::new(16).unwrap();
        let profile = VarianceProfile::standard_two_scale();
        let mut s1 = RngStream::from_seed(45).derive("star-a");
        let mut s2 = RngStream::from_seed(45).derive("star-b");
        let base = sample_inhomogeneous(&spec, &profile, &mut s1).unwrap();
        let copy = sample_inhomogeneous(&spec, &profile, &mut s2).unwrap();
        let q = 0.36;
        let out = star_perturbation(&base, &copy, q).unwrap();
        let c = (q / 16.0f64.ln()).sqrt();
        for i in 0..out.heights.len() {
            assert!((out.heights[i] - (base.heights[i] + c * copy.heights[i])).abs() < 1e-15);
        }
        assert!(star_perturbation(&base, &copy, -1.0).is_err());
    }
}
