//! The linear operator mapping a free-field draw φ to the
//! scale-inhomogeneous field ψ, together with the induced covariance.
//!
//! For a piecewise-constant profile the scale integral collapses to the
//! telescoping sum ψ_v = Σᵢ σᵢ·(φ_v(λᵢ) − φ_v(λᵢ₋₁)) over the conditional
//! expectations φ_v(λ) = E[φ_v | values outside the scale-λ window], with
//! φ_v(0) = 0 forced by the zero boundary and φ_v(1) = φ_v. Rearranged, the
//! operator has the sparse form
//!     L = σ_M·id + Σ_{i=1}^{M−1} (σᵢ − σᵢ₊₁)·H_{λᵢ},
//! where H_λ holds the harmonic-measure rows of the scale-λ windows.

use super::profile::VarianceProfile;
use super::{dgff, FieldSample};
use crate::greenfn::{harmonic_measure, GreenTable};
use crate::lattice::{box_around, GridSpec, Rect, Region, Vertex};
use crate::sampler::RngStream;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

pub struct InhomogeneousOperator {
    spec: GridSpec,
    profile: VarianceProfile,
    /// Sparse rows in canonical vertex order: (column index, coefficient).
    rows: Vec<Vec<(u32, f64)>>,
}

/// Exit weights for a window shape, keyed by the window's corners relative
/// to the source. Translation invariance makes the distribution shareable
/// between all vertices whose window has the same relative geometry;
/// grid-clipping of the *exit sites* differs per vertex, so weights are
/// cached unfiltered as relative offsets.
type ShapeKey = (i64, i64, i64, i64);

fn shape_exit_weights(key: ShapeKey) -> Result<Arc<Vec<(i64, i64, f64)>>> {
    static CACHE: OnceLock<Mutex<HashMap<ShapeKey, Arc<Vec<(i64, i64, f64)>>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(w) = cache.lock().unwrap().get(&key) {
        return Ok(Arc::clone(w));
    }
    let rect = Rect {
        lo: Vertex { x: key.0, y: key.1 },
        hi: Vertex { x: key.2, y: key.3 },
    };
    let region = Region::from_rect(&rect);
    let hw = harmonic_measure(&region, Vertex { x: 0, y: 0 })?;
    let weights: Arc<Vec<(i64, i64, f64)>> = Arc::new(
        hw.weights()
            .iter()
            .map(|(b, w)| (b.x, b.y, *w))
            .collect(),
    );
    cache.lock().unwrap().insert(key, Arc::clone(&weights));
    Ok(weights)
}

fn build_rows(spec: &GridSpec, profile: &VarianceProfile) -> Result<Vec<Vec<(u32, f64)>>> {
    let m = profile.num_scales();
    let sigmas: Vec<f64> = profile.values_sq().iter().map(|v| v.sqrt()).collect();
    let breaks = profile.breakpoints();
    let n = spec.vertex_count();
    let mut rows = Vec::with_capacity(n);
    for v in spec.vertices() {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        acc.insert(spec.index(v) as u32, sigmas[m - 1]);
        for i in 1..m {
            let coeff = sigmas[i - 1] - sigmas[i];
            if coeff == 0.0 {
                continue;
            }
            let rect = box_around(spec, v, breaks[i])?;
            let key = (
                rect.lo.x - v.x,
                rect.lo.y - v.y,
                rect.hi.x - v.x,
                rect.hi.y - v.y,
            );
            for &(dx, dy, w) in shape_exit_weights(key)?.iter() {
                let b = v.offset(dx, dy);
                if spec.contains(b) {
                    *acc.entry(spec.index(b) as u32).or_insert(0.0) += coeff * w;
                }
            }
        }
        let mut row: Vec<(u32, f64)> = acc.into_iter().collect();
        row.sort_unstable_by_key(|(j, _)| *j);
        rows.push(row);
    }
    Ok(rows)
}

/// The operator for (spec, profile), built once and shared.
pub fn operator(spec: &GridSpec, profile: &VarianceProfile) -> Result<Arc<InhomogeneousOperator>> {
    if spec.side() > dgff::DGFF_EXACT_CAP {
        return Err(Error::Resource(format!(
            "N = {} exceeds the exact dense cap of {}",
            spec.side(),
            dgff::DGFF_EXACT_CAP
        )));
    }
    static CACHE: OnceLock<Mutex<HashMap<(u32, String), Arc<InhomogeneousOperator>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (spec.side(), profile.content_hash());
    if let Some(op) = cache.lock().unwrap().get(&key) {
        return Ok(Arc::clone(op));
    }
    let op = Arc::new(InhomogeneousOperator {
        spec: *spec,
        profile: profile.clone(),
        rows: build_rows(spec, profile)?,
    });
    cache.lock().unwrap().insert(key, Arc::clone(&op));
    Ok(op)
}

impl InhomogeneousOperator {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn profile(&self) -> &VarianceProfile {
        &self.profile
    }

    /// The sparse row of L at vertex `v`.
    pub fn row(&self, v: Vertex) -> &[(u32, f64)] {
        &self.rows[self.spec.index(v)]
    }

    /// ψ = Lφ.
    pub fn apply(&self, phi: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.rows.len(), |i, _| {
            self.rows[i]
                .iter()
                .map(|&(j, c)| c * phi[j as usize])
                .sum()
        })
    }

    /// The full covariance Σψ = L·G·Lᵀ. Materializes the Green matrix, so
    /// it is gated to grids up to 32 (use [`Self::variance_at`] above that).
    pub fn covariance(&self, green: &GreenTable) -> Result<DMatrix<f64>> {
        let n = self.rows.len();
        if n > 1024 {
            return Err(Error::Resource(format!(
                "full Σψ on {n} vertices; use variance_at for large grids"
            )));
        }
        if green.dim() != n {
            return Err(Error::Domain(
                "Green table does not match the operator's grid".into(),
            ));
        }
        let g = green.matrix();
        // y_v = (L G)_v through the sparse rows, then Σ[v,w] = y_v · L_w
        let mut lg = DMatrix::<f64>::zeros(n, n);
        for (v, row) in self.rows.iter().enumerate() {
            for &(j, c) in row {
                let j = j as usize;
                for k in 0..n {
                    lg[(v, k)] += c * g[(j, k)];
                }
            }
        }
        let mut cov = DMatrix::<f64>::zeros(n, n);
        for v in 0..n {
            for (w, row) in self.rows.iter().enumerate().skip(v) {
                let mut s = 0.0;
                for &(j, c) in row {
                    s += c * lg[(v, j as usize)];
                }
                cov[(v, w)] = s;
                cov[(w, v)] = s;
            }
        }
        Ok(cov)
    }

    /// Var(ψ_v) through one killed-walk solve; no Green materialization.
    pub fn variance_at(&self, green: &GreenTable, v: Vertex) -> Result<f64> {
        if green.dim() != self.rows.len() {
            return Err(Error::Domain(
                "Green table does not match the operator's grid".into(),
            ));
        }
        let row = self.row(v);
        let mut e = DVector::zeros(green.dim());
        for &(j, c) in row {
            e[j as usize] = c;
        }
        Ok(green.quad_form(&e, &e))
    }
}

/// One draw of the scale-inhomogeneous field: ψ = Lφ with the underlying φ
/// retained.
pub fn sample_inhomogeneous(
    spec: &GridSpec,
    profile: &VarianceProfile,
    stream: &mut RngStream,
) -> Result<FieldSample> {
    let op = operator(spec, profile)?;
    let phi = dgff::sample_dgff(spec, stream)?;
    let heights = op.apply(&phi.heights);
    Ok(FieldSample {
        spec: *spec,
        heights,
        underlying: Some(phi.heights),
        tag: "inhomogeneous".into(),
    })
}
