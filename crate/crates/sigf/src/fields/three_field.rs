//! The three-field approximation: a macroscopic coarse field, a dyadic
//! middle field (modified inhomogeneous branching random walk), a local
//! bottom field, and the variance-matching calibration that welds them
//! into a comparison partner for the scale-inhomogeneous field.

use super::dgff::{grid_green, sample_dgff};
use super::operator::operator;
use super::profile::VarianceProfile;
use super::FieldSample;
use crate::lattice::{dyadic_boxes_containing, v2, GridSpec, Vertex};
use crate::sampler::RngStream;
use crate::{Error, Result};
use nalgebra::DVector;
use std::collections::HashMap;
use std::f64::consts::LN_2;

/// Grid partition bookkeeping shared by all three components: N = 2^n, the
/// coarse tiling into (KL)² boxes of side N/KL and the bottom tiling into
/// (N/K′L′)² boxes of side K′L′.
#[derive(Clone, Debug)]
pub struct ThreeFieldContext {
    spec: GridSpec,
    big_k: u32,
    big_l: u32,
    big_kp: u32,
    big_lp: u32,
    profile: VarianceProfile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComponentKind {
    Coarse,
    Middle,
    Bottom,
}

fn exp_of(name: &str, value: u32) -> Result<u32> {
    if value == 0 || !value.is_power_of_two() {
        return Err(Error::Config(format!(
            "{name} = {value} must be a positive power of two"
        )));
    }
    Ok(value.trailing_zeros())
}

impl ThreeFieldContext {
    pub fn new(
        spec: GridSpec,
        big_k: u32,
        big_l: u32,
        big_kp: u32,
        big_lp: u32,
        profile: VarianceProfile,
    ) -> Result<ThreeFieldContext> {
        let n = spec.side();
        if !n.is_power_of_two() {
            return Err(Error::Config(format!(
                "three-field bookkeeping needs N = 2^n, got N = {n}"
            )));
        }
        let (k, l) = (exp_of("K", big_k)?, exp_of("L", big_l)?);
        let (kp, lp) = (exp_of("K'", big_kp)?, exp_of("L'", big_lp)?);
        let ne = n.trailing_zeros();
        if k + l >= ne {
            return Err(Error::Config(format!(
                "K·L = {} must be a proper divisor of N = {n}",
                big_k * big_l
            )));
        }
        if kp + lp < 1 {
            return Err(Error::Config("K'·L' must be at least 2".into()));
        }
        if kp + lp > ne - l - k {
            return Err(Error::Config(format!(
                "bottom boxes (side {}) larger than coarse boxes (side {})",
                big_kp * big_lp,
                n >> (k + l)
            )));
        }
        Ok(ThreeFieldContext {
            spec,
            big_k,
            big_l,
            big_kp,
            big_lp,
            profile,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn profile(&self) -> &VarianceProfile {
        &self.profile
    }

    fn n_exp(&self) -> u32 {
        self.spec.side().trailing_zeros()
    }

    /// Side of a coarse box, N/(KL).
    pub fn coarse_side(&self) -> u32 {
        self.spec.side() / (self.big_k * self.big_l)
    }

    /// Side of a bottom box, K′L′.
    pub fn bottom_side(&self) -> u32 {
        self.big_kp * self.big_lp
    }

    /// Dyadic levels of the middle field: k′+l′ ..= n−l−k.
    pub fn levels(&self) -> std::ops::RangeInclusive<u32> {
        let lo = self.big_kp.trailing_zeros() + self.big_lp.trailing_zeros();
        let hi = self.n_exp() - self.big_l.trailing_zeros() - self.big_k.trailing_zeros();
        lo..=hi
    }

    fn coarse_box_of(&self, v: Vertex) -> (i64, i64) {
        let s = i64::from(self.coarse_side());
        (v.x / s, v.y / s)
    }

    fn bottom_corner_of(&self, v: Vertex) -> Vertex {
        let s = i64::from(self.bottom_side());
        v2((v.x / s) * s, (v.y / s) * s)
    }

    fn bottom_box_index(&self, v: Vertex) -> u64 {
        let s = i64::from(self.bottom_side());
        let per = i64::from(self.spec.side()) / s;
        ((v.y / s) * per + v.x / s) as u64
    }

    /// Residue class of `v` modulo the bottom tiling, as a flat index.
    pub fn residue_class(&self, v: Vertex) -> usize {
        let s = i64::from(self.bottom_side());
        ((v.y % s) * s + v.x % s) as usize
    }

    /// The center-most vertex of a given residue class (a representative
    /// well inside the grid).
    pub fn representative(&self, class: usize) -> Vertex {
        let s = i64::from(self.bottom_side());
        let per = i64::from(self.spec.side()) / s;
        let b0 = (per / 2) * s;
        v2(b0 + (class as i64 % s), b0 + class as i64 / s)
    }

    /// Per-level amplitude of the middle field: 2^{−j}·√(log 2)·w_j with
    /// w_j = ∫_{n−j−1}^{n−j} σ(s/n) ds.
    fn level_amplitudes(&self) -> Result<Vec<(u32, f64)>> {
        let nf = f64::from(self.n_exp());
        self.levels()
            .map(|j| {
                let jf = f64::from(j);
                let w = nf * self.profile.integral_sigma((nf - jf - 1.0) / nf, (nf - jf) / nf)?;
                Ok((j, 2.0_f64.powi(-(j as i32)) * LN_2.sqrt() * w))
            })
            .collect()
    }
}

fn coarse_heights(ctx: &ThreeFieldContext, stream: &mut RngStream) -> Result<DVector<f64>> {
    let kl = ctx.big_k * ctx.big_l;
    let coarse_spec = GridSpec::new(kl)?;
    let phi = sample_dgff(&coarse_spec, stream)?;
    let s0 = ctx.profile.sigma0();
    Ok(DVector::from_fn(ctx.spec.vertex_count(), |i, _| {
        let (bx, by) = ctx.coarse_box_of(ctx.spec.vertex(i));
        s0 * phi.heights[coarse_spec.index(v2(bx, by))]
    }))
}

fn middle_heights(ctx: &ThreeFieldContext, stream: &mut RngStream) -> Result<DVector<f64>> {
    let spec = ctx.spec;
    let kl = i64::from(ctx.big_k * ctx.big_l);
    let cs = i64::from(ctx.coarse_side());
    let sq = i64::from(ctx.bottom_side());
    let per = cs / sq; // bottom boxes per coarse box, per axis
    let amplitudes = ctx.level_amplitudes()?;

    let boxes_per_axis = i64::from(spec.side()) / sq;
    let mut box_val = vec![0.0f64; (boxes_per_axis * boxes_per_axis) as usize];
    for cby in 0..kl {
        for cbx in 0..kl {
            for &(j, amp) in &amplitudes {
                // all dyadic corners any bottom corner in this coarse box
                // touches at this level, in deterministic order; the same
                // dyadic box seen from two coarse boxes gets two draws, so
                // the middle field decouples across coarse boxes
                let mut corners: Vec<Vertex> = Vec::new();
                for ty in 0..per {
                    for tx in 0..per {
                        let corner = v2(cbx * cs + tx * sq, cby * cs + ty * sq);
                        corners.extend(dyadic_boxes_containing(&spec, corner, j)?);
                    }
                }
                corners.sort_unstable();
                corners.dedup();
                let gauss: HashMap<Vertex, f64> = corners
                    .into_iter()
                    .map(|c| (c, stream.standard_normal()))
                    .collect();
                for ty in 0..per {
                    for tx in 0..per {
                        let corner = v2(cbx * cs + tx * sq, cby * cs + ty * sq);
                        let sum: f64 = dyadic_boxes_containing(&spec, corner, j)?
                            .iter()
                            .map(|b| gauss[b])
                            .sum();
                        box_val[ctx.bottom_box_index(corner) as usize] += amp * sum;
                    }
                }
            }
        }
    }
    Ok(DVector::from_fn(spec.vertex_count(), |i, _| {
        box_val[ctx.bottom_box_index(spec.vertex(i)) as usize]
    }))
}

fn bottom_heights(ctx: &ThreeFieldContext, stream: &mut RngStream) -> Result<DVector<f64>> {
    let spec = ctx.spec;
    let sq = ctx.bottom_side();
    let box_spec = GridSpec::new(sq)?;
    let per = i64::from(spec.side()) / i64::from(sq);
    let s1 = ctx.profile.sigma1();
    let mut heights = DVector::zeros(spec.vertex_count());
    for by in 0..per {
        for bx in 0..per {
            let phi = sample_dgff(&box_spec, stream)?;
            let corner = v2(bx * i64::from(sq), by * i64::from(sq));
            for u in box_spec.vertices() {
                let v = corner.offset(u.x, u.y);
                heights[spec.index(v)] = s1 * phi.heights[box_spec.index(u)];
            }
        }
    }
    Ok(heights)
}

/// One draw of a single component of the approximation.
pub fn sample_component(
    kind: ComponentKind,
    ctx: &ThreeFieldContext,
    stream: &mut RngStream,
) -> Result<FieldSample> {
    let (heights, tag) = match kind {
        ComponentKind::Coarse => (coarse_heights(ctx, stream)?, "coarse"),
        ComponentKind::Middle => (middle_heights(ctx, stream)?, "middle"),
        ComponentKind::Bottom => (bottom_heights(ctx, stream)?, "bottom"),
    };
    Ok(FieldSample {
        spec: ctx.spec,
        heights,
        underlying: None,
        tag: tag.into(),
    })
}

/// Exact variance of the coarse component at `v`.
pub fn coarse_variance(ctx: &ThreeFieldContext, v: Vertex) -> Result<f64> {
    let kl = ctx.big_k * ctx.big_l;
    let coarse_spec = GridSpec::new(kl)?;
    let green = grid_green(&coarse_spec)?;
    let (bx, by) = ctx.coarse_box_of(v);
    let w = v2(bx, by);
    Ok(ctx.profile.sigma0().powi(2) * green.entry(w, w)?)
}

/// Exact variance of the middle component at `v`:
/// Σ_j |B_j(corner)|·4^{−j}·log2·w_j².
pub fn middle_variance(ctx: &ThreeFieldContext, v: Vertex) -> Result<f64> {
    let corner = ctx.bottom_corner_of(v);
    let mut acc = 0.0;
    for (j, amp) in ctx.level_amplitudes()? {
        let count = dyadic_boxes_containing(&ctx.spec, corner, j)?.len();
        acc += amp * amp * count as f64;
    }
    Ok(acc)
}

/// Exact variance of the bottom component at `v`.
pub fn bottom_variance(ctx: &ThreeFieldContext, v: Vertex) -> Result<f64> {
    let sq = ctx.bottom_side();
    let box_spec = GridSpec::new(sq)?;
    let green = grid_green(&box_spec)?;
    let corner = ctx.bottom_corner_of(v);
    let u = v2(v.x - corner.x, v.y - corner.y);
    Ok(ctx.profile.sigma1().powi(2) * green.entry(u, u)?)
}

/// Variance-matching constants: α lifts the target to
/// Var(ψ) + 4α ≥ Var(S^c + S^m + S^b) at every class representative, and
/// a(v̄) fills the remaining gap per residue class.
#[derive(Clone, Debug)]
pub struct Calibration {
    side: u32,
    big_k: u32,
    big_l: u32,
    big_kp: u32,
    big_lp: u32,
    profile_hash: String,
    pub alpha: f64,
    a: Vec<f64>,
}

impl Calibration {
    pub fn matches(&self, ctx: &ThreeFieldContext) -> bool {
        self.side == ctx.spec.side()
            && self.big_k == ctx.big_k
            && self.big_l == ctx.big_l
            && self.big_kp == ctx.big_kp
            && self.big_lp == ctx.big_lp
            && self.profile_hash == ctx.profile.content_hash()
    }

    /// a(v̄) for the residue class of `v`.
    pub fn a_for(&self, ctx: &ThreeFieldContext, v: Vertex) -> f64 {
        self.a[ctx.residue_class(v)]
    }

    pub fn a_values(&self) -> &[f64] {
        &self.a
    }
}

/// Computes α and the per-class constants a(v̄) from the exact variances of
/// ψ and of the three components at class representatives.
pub fn calibrate_three_field(ctx: &ThreeFieldContext) -> Result<Calibration> {
    if !ctx.profile.is_strict() {
        return Err(Error::Config(
            "three-field calibration needs a strictly admissible profile \
             (σ(0) < 1 < σ(1), I(x) < x)"
                .into(),
        ));
    }
    let op = operator(&ctx.spec, &ctx.profile)?;
    let green = grid_green(&ctx.spec)?;
    let classes = (ctx.bottom_side() * ctx.bottom_side()) as usize;

    let mut var_psi = vec![0.0; classes];
    let mut var_s = vec![0.0; classes];
    for class in 0..classes {
        let v = ctx.representative(class);
        var_psi[class] = op.variance_at(&green, v)?;
        var_s[class] =
            coarse_variance(ctx, v)? + middle_variance(ctx, v)? + bottom_variance(ctx, v)?;
    }
    let alpha = 0.25
        * var_s
            .iter()
            .zip(&var_psi)
            .map(|(s, p)| (s - p).max(0.0))
            .fold(0.0f64, f64::max);
    let mut a = Vec::with_capacity(classes);
    for class in 0..classes {
        let a_sq = var_psi[class] + 4.0 * alpha - var_s[class];
        if a_sq < -1e-9 {
            return Err(Error::Numeric(format!(
                "calibration produced a² = {a_sq} < 0 for class {class}"
            )));
        }
        a.push(a_sq.max(0.0).sqrt());
    }
    Ok(Calibration {
        side: ctx.spec.side(),
        big_k: ctx.big_k,
        big_l: ctx.big_l,
        big_kp: ctx.big_kp,
        big_lp: ctx.big_lp,
        profile_hash: ctx.profile.content_hash(),
        alpha,
        a,
    })
}

/// One draw of the calibrated approximation
/// S = S^c + S^m + S^b + a(v̄)·Θ_box.
pub fn sample_three_field(
    ctx: &ThreeFieldContext,
    calib: &Calibration,
    stream: &mut RngStream,
) -> Result<FieldSample> {
    if !calib.matches(ctx) {
        return Err(Error::Config(
            "calibration context does not match the sampling context".into(),
        ));
    }
    let mut heights = coarse_heights(ctx, stream)?;
    heights += middle_heights(ctx, stream)?;
    heights += bottom_heights(ctx, stream)?;

    let sq = i64::from(ctx.bottom_side());
    let per = i64::from(ctx.spec.side()) / sq;
    let theta: Vec<f64> = (0..per * per).map(|_| stream.standard_normal()).collect();
    for v in ctx.spec.vertices() {
        heights[ctx.spec.index(v)] +=
            calib.a[ctx.residue_class(v)] * theta[ctx.bottom_box_index(v) as usize];
    }
    Ok(FieldSample {
        spec: ctx.spec,
        heights,
        underlying: None,
        tag: "three-field".into(),
    })
}
