//! Green functions of the walk killed outside a region, harmonic measure,
//! and the potential kernel of the planar walk.
//!
//! All Green values carry the field normalization G(v,w) = (π/2)·E_v[visits
//! to w before leaving the region], so that diagonal entries are field
//! variances.

use crate::lattice::{Region, Vertex};
use crate::sampler::RngStream;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

/// Largest region admitted for a dense solve.
pub const DENSE_CAP: usize = 4096;

/// Largest ℓ∞ offset for which the potential kernel is computed.
pub const OFFSET_CAP: i64 = 16;

/// Largest box exponent used in potential-kernel extrapolation (side 2^m).
const KERNEL_BOX_CAP: u32 = 9;

/// Green table of the walk killed on exiting `region`, with the Cholesky
/// factor of the killed-walk operator cached; the full matrix is
/// materialized lazily since sampling and solving never need it.
pub struct GreenTable {
    region: Region,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    green: OnceLock<DMatrix<f64>>,
}

/// Builds the Green table for `region` by a dense factorization of the
/// killed-walk equations (I − Q)g = e.
pub fn green_table(region: Region) -> Result<GreenTable> {
    let n = region.len();
    if n == 0 {
        return Err(Error::Domain("empty region has no Green function".into()));
    }
    if n > DENSE_CAP {
        return Err(Error::Resource(format!(
            "region has {n} vertices, above the dense-solve cap of {DENSE_CAP}"
        )));
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    for (i, &v) in region.vertices().iter().enumerate() {
        for w in v.neighbors() {
            if let Some(j) = region.position(w) {
                m[(i, j)] = -0.25;
            }
        }
    }
    let chol = nalgebra::Cholesky::new(m).ok_or_else(|| {
        Error::Numeric("killed-walk operator not positive definite".into())
    })?;
    Ok(GreenTable {
        region,
        chol,
        green: OnceLock::new(),
    })
}

impl GreenTable {
    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn dim(&self) -> usize {
        self.region.len()
    }

    /// The full matrix G = (π/2)(I − Q)^{-1}, materialized on first use.
    pub fn matrix(&self) -> &DMatrix<f64> {
        self.green.get_or_init(|| {
            let mut g = self.chol.inverse();
            g.scale_mut(PI / 2.0);
            // the inverse of a symmetric matrix is symmetric; restore exactly
            for i in 0..g.nrows() {
                for j in (i + 1)..g.ncols() {
                    let s = 0.5 * (g[(i, j)] + g[(j, i)]);
                    g[(i, j)] = s;
                    g[(j, i)] = s;
                }
            }
            g
        })
    }

    /// G(u, v) in field-variance units.
    pub fn entry(&self, u: Vertex, v: Vertex) -> Result<f64> {
        let (i, j) = match (self.region.position(u), self.region.position(v)) {
            (Some(i), Some(j)) => (i, j),
            _ => {
                return Err(Error::Domain(format!(
                    "vertex {u} or {v} outside the table's region"
                )))
            }
        };
        Ok(self.matrix()[(i, j)])
    }

    /// Solves (I − Q) x = rhs; x holds unscaled expected visit counts when
    /// rhs is an indicator.
    pub fn solve_visits(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// G · rhs in field-variance units.
    pub fn apply_green(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.chol.solve(rhs);
        x.scale_mut(PI / 2.0);
        x
    }

    /// The quadratic form aᵀ G b.
    pub fn quad_form(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&self.apply_green(b))
    }

    /// One centred draw with covariance G: √(π/2) · L^{-T} z for the factor
    /// L Lᵀ = I − Q.
    pub fn sample_zero_mean(&self, stream: &mut RngStream) -> DVector<f64> {
        let z = stream.normal_vector(self.dim());
        let x = self
            .chol
            .l_dirty()
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has positive diagonal");
        x * (PI / 2.0).sqrt()
    }

    /// Exit distribution of the walk started at `source` inside this
    /// table's region, reusing the cached factorization.
    pub fn exit_distribution(&self, source: Vertex) -> Result<HarmonicWeights> {
        let i = self.region.position(source).ok_or_else(|| {
            Error::Domain(format!("source {source} not in the table's region"))
        })?;
        let mut e = DVector::zeros(self.dim());
        e[i] = 1.0;
        let visits = self.chol.solve(&e);
        let mut weights: HashMap<Vertex, f64> = HashMap::new();
        for (j, &v) in self.region.vertices().iter().enumerate() {
            if visits[j] == 0.0 {
                continue;
            }
            for b in v.neighbors() {
                if !self.region.contains(b) {
                    *weights.entry(b).or_insert(0.0) += 0.25 * visits[j];
                }
            }
        }
        HarmonicWeights::new(source, weights.into_iter().collect())
    }
}

/// Exit distribution of a walk: nonnegative weights on the exterior
/// boundary summing to one.
#[derive(Clone, Debug)]
pub struct HarmonicWeights {
    source: Vertex,
    weights: Vec<(Vertex, f64)>,
}

impl HarmonicWeights {
    fn new(source: Vertex, mut weights: Vec<(Vertex, f64)>) -> Result<HarmonicWeights> {
        weights.sort_unstable_by_key(|(v, _)| *v);
        let mut total = 0.0;
        for (v, w) in &mut weights {
            // solver round-off may produce −1e−18-scale weights; clamp
            if *w < 0.0 {
                if *w < -1e-12 {
                    return Err(Error::Numeric(format!(
                        "negative harmonic weight {w:.3e} at {v}"
                    )));
                }
                *w = 0.0;
            }
            total += *w;
        }
        if (total - 1.0).abs() > 1e-12 * weights.len().max(1) as f64 {
            return Err(Error::Numeric(format!(
                "harmonic weights sum to {total}, not 1"
            )));
        }
        Ok(HarmonicWeights { source, weights })
    }

    fn point_mass(source: Vertex) -> HarmonicWeights {
        HarmonicWeights {
            source,
            weights: vec![(source, 1.0)],
        }
    }

    pub fn source(&self) -> Vertex {
        self.source
    }

    /// Weights sorted by vertex.
    pub fn weights(&self) -> &[(Vertex, f64)] {
        &self.weights
    }

    pub fn is_point_mass(&self) -> bool {
        self.weights.len() == 1 && self.weights[0].1 == 1.0
    }
}

/// Hitting distribution on the exterior boundary of `interior` for a walk
/// from `source`. A source outside the interior must lie on its exterior
/// boundary and is its own exit point.
pub fn harmonic_measure(interior: &Region, source: Vertex) -> Result<HarmonicWeights> {
    if interior.contains(source) {
        let table = green_table(interior.clone())?;
        return table.exit_distribution(source);
    }
    if source.neighbors().iter().any(|w| interior.contains(*w)) {
        return Ok(HarmonicWeights::point_mass(source));
    }
    Err(Error::Domain(format!(
        "source {source} is neither in the interior nor on its boundary"
    )))
}

// ---------------------------------------------------------------------------
// Potential kernel

/// Matrix-free conjugate gradient for (I − Q)x = e_center on the square box
/// of side `s`, where Q moves to in-box neighbors with rate 1/4.
fn killed_walk_center_column(s: usize) -> Vec<f64> {
    let n = s * s;
    let center = (s / 2) * s + s / 2;
    let apply = |v: &[f64], out: &mut [f64]| {
        for y in 0..s {
            for x in 0..s {
                let i = y * s + x;
                let mut acc = 0.0;
                if x + 1 < s {
                    acc += v[i + 1];
                }
                if x > 0 {
                    acc += v[i - 1];
                }
                if y + 1 < s {
                    acc += v[i + s];
                }
                if y > 0 {
                    acc += v[i - s];
                }
                out[i] = v[i] - 0.25 * acc;
            }
        }
    };
    let mut x = vec![0.0; n];
    let mut r = vec![0.0; n];
    r[center] = 1.0;
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rs: f64 = 1.0;
    let tol2 = 1e-26; // squared residual target; rhs has unit norm
    for _ in 0..20 * s {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if rs_new < tol2 {
            break;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

fn center_column_cached(m: u32) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<u32, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(col) = cache.lock().unwrap().get(&m) {
        return Arc::clone(col);
    }
    let col = Arc::new(killed_walk_center_column(1usize << m));
    cache.lock().unwrap().insert(m, Arc::clone(&col));
    col
}

/// The potential kernel 𝔞(w) of the planar walk in field units:
/// lim over boxes of G(c,c) − G(c,c+w), i.e. π/2 times the classical
/// kernel. Computed from killed-walk solves on boxes of side 2^m with
/// Richardson extrapolation in 4^{-m} (the leading finite-box error; the
/// 1/side term cancels by the symmetry of the box around its center),
/// stopping when successive extrapolants agree within `tol`.
pub fn potential_kernel(w: Vertex, tol: f64) -> Result<f64> {
    let (wx, wy) = (w.x.abs(), w.y.abs());
    if wx.max(wy) > OFFSET_CAP {
        return Err(Error::Domain(format!(
            "offset {w} beyond the ‖w‖∞ ≤ {OFFSET_CAP} cap"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    if wx == 0 && wy == 0 {
        return Ok(0.0);
    }
    // canonical representative under the dihedral symmetries of the lattice
    let (p, q) = if wx >= wy { (wx, wy) } else { (wy, wx) };

    let m_start = {
        // keep the offset well inside the box so the 4^{-m} law is clean
        let mut m = 5;
        while (1i64 << m) < 8 * (p + 1) {
            m += 1;
        }
        m as u32
    };
    let diff_at = |m: u32| -> f64 {
        let s = 1usize << m;
        let col = center_column_cached(m);
        let c = (s / 2, s / 2);
        let ci = c.1 * s + c.0;
        let ti = (c.1 + q as usize) * s + c.0 + p as usize;
        (PI / 2.0) * (col[ci] - col[ti])
    };

    let mut d_prev = diff_at(m_start);
    let mut r_prev: Option<f64> = None;
    let mut achieved = f64::INFINITY;
    for m in (m_start + 1)..=KERNEL_BOX_CAP {
        let d = diff_at(m);
        let r = (4.0 * d - d_prev) / 3.0;
        if let Some(rp) = r_prev {
            achieved = (r - rp).abs();
            if achieved < tol {
                return Ok(r);
            }
        }
        d_prev = d;
        r_prev = Some(r);
    }
    Err(Error::Accuracy {
        what: format!("potential kernel at {w}: extrapolants still moving at box side 2^{KERNEL_BOX_CAP}"),
        achieved,
        required: tol,
    })
}
