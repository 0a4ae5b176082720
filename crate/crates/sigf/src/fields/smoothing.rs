//! The Ornstein–Uhlenbeck-style smoothing that mixes two independent copies
//! of a field while preserving its law exactly: the invariance of the
//! extremal process under this transform is one of the headline checks.

use super::FieldSample;
use crate::{Error, Result};

/// √(1 − t/log N)·ψ′ + √(t/log N)·ψ″ for 0 ≤ t < log N. Since the two
/// inputs are independent with a common covariance Σ, the output covariance
/// is (1 − t/log N)·Σ + (t/log N)·Σ = Σ exactly.
pub fn smoothing_transform(
    psi1: &FieldSample,
    psi2: &FieldSample,
    t: f64,
) -> Result<FieldSample> {
    if psi1.spec.side() != psi2.spec.side() {
        return Err(Error::Domain(
            "smoothing needs both copies on the same grid".into(),
        ));
    }
    if psi1.tag != psi2.tag {
        return Err(Error::Domain(format!(
            "smoothing needs two copies of the same field kind, got '{}' and '{}'",
            psi1.tag, psi2.tag
        )));
    }
    let log_n = psi1.spec.nf().ln();
    if !t.is_finite() || t < 0.0 || t >= log_n {
        return Err(Error::Domain(format!(
            "smoothing time t = {t} must lie in [0, log N = {log_n})"
        )));
    }
    let b = (t / log_n).sqrt();
    let a = (1.0 - t / log_n).sqrt();
    Ok(FieldSample {
        spec: psi1.spec,
        heights: a * &psi1.heights + b * &psi2.heights,
        underlying: None,
        tag: "smoothed".into(),
    })
}

/// The two mixing weights; their squares sum to 1, which is the whole
/// covariance-preservation argument.
pub fn smoothing_weights(n: u32, t: f64) -> Result<(f64, f64)> {
    let log_n = f64::from(n).ln();
    if !t.is_finite() || t < 0.0 || t >= log_n {
        return Err(Error::Domain(format!(
            "smoothing time t = {t} must lie in [0, log N = {log_n})"
        )));
    }
    Ok(((1.0 - t / log_n).sqrt(), (t / log_n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::operator::sample_inhomogeneous;
    use crate::fields::profile::VarianceProfile;
    use crate::lattice::GridSpec;
    use crate::sampler::RngStream;
    use crate::testkit::two_sample_ks;

    #[test]
    fn time_zero_is_identity() {
        let spec = GridSpec::new(8).unwrap();
        let profile = VarianceProfile::standard_two_scale();
        let mut sa = RngStream::from_seed(51).derive("smooth-a");
        let mut sb = RngStream::from_seed(51).derive("smooth-b");
        let p1 = sample_inhomogeneous(&spec, &profile, &mut sa).unwrap();
        let p2 = sample_inhomogeneous(&spec, &profile, &mut sb).unwrap();
        let out = smoothing_transform(&p1, &p2, 0.0).unwrap();
        assert_eq!(out.heights, p1.heights);
    }

    #[test]
    fn weights_preserve_covariance_exactly() {
        for n in [8u32, 32, 64] {
            let log_n = f64::from(n).ln();
            for frac in [0.0, 0.25, 0.5, 0.9, 0.999] {
                let (a, b) = smoothing_weights(n, frac * log_n).unwrap();
                assert!((a * a + b * b - 1.0).abs() <= 1e-12);
            }
        }
        assert!(smoothing_weights(8, 8.0f64.ln()).is_err());
        assert!(smoothing_weights(8, -0.1).is_err());
    }

    #[test]
    fn maxima_law_is_invariant() {
        let spec = GridSpec::new(32).unwrap();
        let profile = VarianceProfile::standard_two_scale();
        let t = 0.5 * 32.0f64.ln();
        let mut sa = RngStream::from_seed(52).derive("smooth-ks-a");
        let mut sb = RngStream::from_seed(52).derive("smooth-ks-b");
        let mut sc = RngStream::from_seed(52).derive("smooth-ks-c");
        let n = 10_000;
        let mut base_max = Vec::with_capacity(n);
        let mut smooth_max = Vec::with_capacity(n);
        for _ in 0..n {
            base_max.push(
                sample_inhomogeneous(&spec, &profile, &mut sa)
                    .unwrap()
                    .max()
                    .1,
            );
            let p1 = sample_inhomogeneous(&spec, &profile, &mut sb).unwrap();
            let p2 = sample_inhomogeneous(&spec, &profile, &mut sc).unwrap();
            smooth_max.push(smoothing_transform(&p1, &p2, t).unwrap().max().1);
        }
        let (d, p) = two_sample_ks(&mut base_max, &mut smooth_max);
        assert!(p > 0.05, "KS rejected: d = {d}, p = {p}");
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let profile = VarianceProfile::standard_two_scale();
        let mut s = RngStream::from_seed(53).derive("smooth-mismatch");
        let p8 = sample_inhomogeneous(&GridSpec::new(8).unwrap(), &profile, &mut s).unwrap();
        let p16 = sample_inhomogeneous(&GridSpec::new(16).unwrap(), &profile, &mut s).unwrap();
        assert!(smoothing_transform(&p8, &p16, 0.1).is_err());
        let p8b = sample_inhomogeneous(&GridSpec::new(8).unwrap(), &profile, &mut s).unwrap();
        assert!(smoothing_transform(&p8, &p8b, 3.0).is_err()); // ≥ log 8
    }
}
