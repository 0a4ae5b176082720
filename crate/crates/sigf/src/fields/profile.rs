//! Piecewise-constant variance profiles σ²(·) on [0,1] and their exact
//! integrals.

use crate::{Error, Result};
use sha2::{Digest, Sha256};

/// A piecewise-constant variance profile: breakpoints 0 = λ₀ < … < λ_M = 1
/// with σᵢ² on the i-th interval. Profiles are always normalized so that
/// ∫₀¹ σ² = 1; the strict constructor additionally enforces the admissible
/// regime I(x) < x on (0,1), σ(0) < 1 and σ(1) > 1.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceProfile {
    breaks: Vec<f64>,
    values: Vec<f64>,
    strict: bool,
}

const NORMALIZATION_TOL: f64 = 1e-12;

impl VarianceProfile {
    /// Strict constructor: rejects profiles outside the admissible regime
    /// with a configuration error.
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<VarianceProfile> {
        let p = Self::validated(breaks, values, true)?;
        Ok(p)
    }

    /// Relaxed constructor: only the basic shape and the ∫₀¹σ² = 1
    /// normalization are enforced. Exists for exploratory profiles such as
    /// the homogeneous σ ≡ 1.
    pub fn new_relaxed(breaks: Vec<f64>, values: Vec<f64>) -> Result<VarianceProfile> {
        Self::validated(breaks, values, false)
    }

    fn validated(breaks: Vec<f64>, values: Vec<f64>, strict: bool) -> Result<VarianceProfile> {
        if breaks.len() < 2 || values.len() + 1 != breaks.len() {
            return Err(Error::Config(format!(
                "profile needs M+1 breakpoints and M values, got {} and {}",
                breaks.len(),
                values.len()
            )));
        }
        if breaks[0] != 0.0 || *breaks.last().unwrap() != 1.0 {
            return Err(Error::Config(
                "profile breakpoints must start at 0 and end at 1".into(),
            ));
        }
        if breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(
                "profile breakpoints must be strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "profile values must be finite and ≥ 0".into(),
            ));
        }
        let profile = VarianceProfile { breaks, values, strict };
        let total = profile.integral_sq_unchecked(0.0, 1.0);
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Config(format!(
                "profile not normalized: ∫σ² = {total}, expected 1"
            )));
        }
        if strict {
            profile.check_strict()?;
        }
        Ok(profile)
    }

    fn check_strict(&self) -> Result<()> {
        if !(self.values[0] < 1.0) {
            return Err(Error::Config(format!(
                "strict profile needs σ²(0) < 1, got {}",
                self.values[0]
            )));
        }
        if !(*self.values.last().unwrap() > 1.0) {
            return Err(Error::Config(format!(
                "strict profile needs σ²(1) > 1, got {}",
                self.values.last().unwrap()
            )));
        }
        // I(x) < x on a dense interior grid
        let grid = 1024;
        for k in 1..grid {
            let x = k as f64 / grid as f64;
            let ix = self.integral_sq_unchecked(0.0, x);
            if ix >= x {
                return Err(Error::Config(format!(
                    "strict profile needs I(x) < x on (0,1); I({x}) = {ix}"
                )));
            }
        }
        Ok(())
    }

    /// The homogeneous profile σ ≡ 1 (fails strict admissibility by design,
    /// so it is constructed relaxed).
    pub fn homogeneous() -> VarianceProfile {
        VarianceProfile::new_relaxed(vec![0.0, 1.0], vec![1.0]).unwrap()
    }

    /// Two-interval profile with variances (s0², s1²) split at `split`.
    pub fn two_scale(s0_sq: f64, s1_sq: f64, split: f64) -> Result<VarianceProfile> {
        VarianceProfile::new(vec![0.0, split, 1.0], vec![s0_sq, s1_sq])
    }

    /// The workhorse admissible profile σ² = (½, 3⁄2) split at ½.
    pub fn standard_two_scale() -> VarianceProfile {
        VarianceProfile::two_scale(0.5, 1.5, 0.5).unwrap()
    }

    pub fn num_scales(&self) -> usize {
        self.values.len()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values_sq(&self) -> &[f64] {
        &self.values
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    /// σ² at scale λ (right-continuous; λ = 1 takes the final value).
    pub fn value_sq_at(&self, lambda: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
            return Err(Error::Domain(format!("scale {lambda} outside [0,1]")));
        }
        let idx = match self.breaks.iter().rposition(|b| *b <= lambda) {
            Some(i) if i == self.breaks.len() - 1 => self.values.len() - 1,
            Some(i) => i,
            None => 0,
        };
        Ok(self.values[idx])
    }

    pub fn sigma_at(&self, lambda: f64) -> Result<f64> {
        Ok(self.value_sq_at(lambda)?.sqrt())
    }

    /// σ(0), the initial standard deviation.
    pub fn sigma0(&self) -> f64 {
        self.values[0].sqrt()
    }

    /// σ(1), the final standard deviation.
    pub fn sigma1(&self) -> f64 {
        self.values.last().unwrap().sqrt()
    }

    fn piecewise_integral(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.values.len() {
            let lo = self.breaks[i].max(a);
            let hi = self.breaks[i + 1].min(b);
            if hi > lo {
                acc += f(self.values[i]) * (hi - lo);
            }
        }
        acc
    }

    fn integral_sq_unchecked(&self, a: f64, b: f64) -> f64 {
        self.piecewise_integral(a, b, |v| v)
    }

    /// ∫_a^b σ²(x) dx by exact piecewise arithmetic.
    pub fn integral_sq(&self, a: f64, b: f64) -> Result<f64> {
        check_range(a, b)?;
        Ok(self.integral_sq_unchecked(a, b))
    }

    /// ∫_a^b σ(x) dx (the first power — used by dyadic level weights).
    pub fn integral_sigma(&self, a: f64, b: f64) -> Result<f64> {
        check_range(a, b)?;
        Ok(self.piecewise_integral(a, b, |v| v.sqrt()))
    }

    /// I(λ) = ∫₀^λ σ².
    pub fn cumulative(&self, lambda: f64) -> Result<f64> {
        self.integral_sq(0.0, lambda)
    }

    /// Hash of the profile content, for calibration-context matching.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.breaks {
            h.update(b.to_le_bytes());
        }
        h.update([0xff]);
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_range(a: f64, b: f64) -> Result<()> {
    if !(0.0 <= a && a <= b && b <= 1.0) {
        return Err(Error::Domain(format!(
            "integration range [{a}, {b}] outside 0 ≤ a ≤ b ≤ 1"
        )));
    }
    Ok(())
}

/// ∫_a^b σ² for `profile` — the module-level spelling of
/// [`VarianceProfile::integral_sq`].
pub fn profile_integral(profile: &VarianceProfile, a: f64, b: f64) -> Result<f64> {
    profile.integral_sq(a, b)
}
