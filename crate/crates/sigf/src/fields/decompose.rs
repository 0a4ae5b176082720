//! Gibbs–Markov decomposition around a vertex: inside an ℓ¹ window the field
//! splits into an exact sum of a *binding* part (measurable with respect to
//! the DGFF outside the window) and an independent *local* part. The split
//! drives the localization checks and the cluster-law heuristics.

use super::operator::operator;
use super::profile::VarianceProfile;
use super::FieldSample;
use crate::greenfn::{green_table, GreenTable};
use crate::lattice::{l1_neighborhood, GridSpec, Region, Vertex};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Green table and exit rows of the origin-centered ℓ¹ ball Λ_M(0); every
/// window placement is a translate, so this is computed once per radius.
struct WindowKit {
    table: Arc<GreenTable>,
    rel: Vec<Vertex>,
    /// exit weights per interior position, offsets relative to the center
    exits: Vec<Vec<(Vertex, f64)>>,
}

fn window_kit(m: i64) -> Result<Arc<WindowKit>> {
    static CACHE: OnceLock<Mutex<HashMap<i64, Arc<WindowKit>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("window kit cache poisoned");
    if let Some(kit) = guard.get(&m) {
        return Ok(kit.clone());
    }
    let rel = l1_neighborhood(crate::lattice::v2(0, 0), m)?;
    let region = Region::from_vertices(rel.clone());
    let table = Arc::new(green_table(region.clone())?);
    let rel = region.vertices().to_vec();
    let mut exits = Vec::with_capacity(rel.len());
    for &u in &rel {
        let hw = table.exit_distribution(u)?;
        exits.push(hw.weights().to_vec());
    }
    let kit = Arc::new(WindowKit { table, rel, exits });
    guard.insert(m, kit.clone());
    Ok(kit)
}

fn check_window(spec: &GridSpec, v: Vertex, m: i64) -> Result<()> {
    if m < 1 {
        return Err(Error::Domain(format!("window radius must be ≥ 1, got {m}")));
    }
    let hi = i64::from(spec.side()) - 2;
    if v.x - m < 1 || v.y - m < 1 || v.x + m > hi || v.y + m > hi {
        return Err(Error::Domain(format!(
            "window Λ_{m}({v}) touches the boundary of the side-{} grid",
            spec.side()
        )));
    }
    Ok(())
}

/// Exact covariance split of ψ restricted to Λ_M(v):
/// Σψ|_window = sigma_phi + sigma_local with the two parts independent.
pub struct Decomposition {
    spec: GridSpec,
    center: Vertex,
    window: Region,
    sigma_phi: DMatrix<f64>,
    sigma_local: DMatrix<f64>,
    /// rows of the binding functional over grid indices: Φ_w = Σ_b B[w,b]·φ_b
    binding: DMatrix<f64>,
    ls: DMatrix<f64>,
    gs: Arc<GreenTable>,
}

pub fn decompose_around(
    spec: &GridSpec,
    profile: &VarianceProfile,
    v: Vertex,
    m: i64,
) -> Result<Decomposition> {
    check_window(spec, v, m)?;
    let kit = window_kit(m)?;
    let op = operator(spec, profile)?;
    let green = super::dgff::grid_green(spec)?;

    let verts: Vec<Vertex> = kit.rel.iter().map(|r| v.offset(r.x, r.y)).collect();
    let window = Region::from_vertices(verts);
    let dim = window.len();
    let n = spec.vertex_count();

    // operator restricted to the window
    let mut ls = DMatrix::<f64>::zeros(dim, dim);
    for (wi, &w) in window.vertices().iter().enumerate() {
        for &(u_idx, coeff) in op.row(w) {
            if let Some(uj) = window.position(spec.vertex(u_idx as usize)) {
                ls[(wi, uj)] += coeff;
            }
        }
    }
    let mut sigma_local = &ls * kit.table.matrix() * ls.transpose();
    symmetrize(&mut sigma_local);

    // binding rows: keep coefficients outside the window, harmonically
    // extend the ones inside
    let mut binding = DMatrix::<f64>::zeros(dim, n);
    for (wi, &w) in window.vertices().iter().enumerate() {
        for &(u_idx, coeff) in op.row(w) {
            let u = spec.vertex(u_idx as usize);
            match window.position(u) {
                Some(uj) => {
                    for &(b_rel, wt) in &kit.exits[uj] {
                        let b = v.offset(b_rel.x, b_rel.y);
                        if spec.contains(b) {
                            binding[(wi, spec.index(b))] += coeff * wt;
                        }
                    }
                }
                None => binding[(wi, u_idx as usize)] += coeff,
            }
        }
    }
    let mut bg = DMatrix::<f64>::zeros(n, dim);
    for i in 0..dim {
        bg.set_column(i, &green.apply_green(&binding.row(i).transpose()));
    }
    let mut sigma_phi = &binding * bg;
    symmetrize(&mut sigma_phi);

    Ok(Decomposition {
        spec: *spec,
        center: v,
        window,
        sigma_phi,
        sigma_local,
        binding,
        ls,
        gs: kit.table.clone(),
    })
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let t = a.transpose();
    *a += t;
    *a *= 0.5;
}

impl Decomposition {
    pub fn center(&self) -> Vertex {
        self.center
    }

    pub fn window(&self) -> &Region {
        &self.window
    }

    /// Covariance of the binding field Φ^{M,v} on the window.
    pub fn sigma_phi(&self) -> &DMatrix<f64> {
        &self.sigma_phi
    }

    /// Covariance of the local field ψ̃ on the window.
    pub fn sigma_local(&self) -> &DMatrix<f64> {
        &self.sigma_local
    }

    fn underlying_of<'a>(&self, sample: &'a FieldSample) -> Result<&'a DVector<f64>> {
        if sample.spec.side() != self.spec.side() {
            return Err(Error::Config(
                "sample grid does not match the decomposition grid".into(),
            ));
        }
        sample.underlying.as_ref().ok_or_else(|| {
            Error::Config(
                "binding-field evaluation needs the sample's retained underlying DGFF".into(),
            )
        })
    }

    /// Realized binding field Φ^{M,v} on the window, evaluated from the
    /// sample's underlying DGFF.
    pub fn binding_field(&self, sample: &FieldSample) -> Result<DVector<f64>> {
        let phi = self.underlying_of(sample)?;
        Ok(&self.binding * phi)
    }

    /// Realized local field ψ̃ = ψ − Φ on the window.
    pub fn local_field(&self, sample: &FieldSample) -> Result<DVector<f64>> {
        let mut out = self.binding_field(sample)?;
        out.neg_mut();
        for (wi, &w) in self.window.vertices().iter().enumerate() {
            out[wi] += sample.heights[self.spec.index(w)];
        }
        Ok(out)
    }

    /// Position of the window center within the window's vertex ordering.
    pub fn center_position(&self) -> usize {
        self.window
            .position(self.center)
            .expect("center is in its own window")
    }

    /// Covariance of the residual ψ̃ − σ(1)·φ^window, the part of the local
    /// field not explained by a plain DGFF at the final scale.
    pub fn residual_covariance(&self, sigma1: f64) -> DMatrix<f64> {
        let lg = &self.ls * self.gs.matrix();
        let mut d = self.sigma_local.clone() - sigma1 * &lg - sigma1 * lg.transpose()
            + (sigma1 * sigma1) * self.gs.matrix();
        symmetrize(&mut d);
        d
    }
}

/// Row-only binding functional for one center: Φ^{M,v}_v = row·φ. Cheap
/// enough to build per replica inside frequency estimators.
pub struct BindingEvaluator {
    side: u32,
    center: Vertex,
    row: DVector<f64>,
}

pub fn binding_evaluator(
    spec: &GridSpec,
    profile: &VarianceProfile,
    v: Vertex,
    m: i64,
) -> Result<BindingEvaluator> {
    check_window(spec, v, m)?;
    let kit = window_kit(m)?;
    let op = operator(spec, profile)?;
    let rel_region = Region::from_vertices(kit.rel.clone());
    let mut row = DVector::<f64>::zeros(spec.vertex_count());
    for &(u_idx, coeff) in op.row(v) {
        let u = spec.vertex(u_idx as usize);
        match rel_region.position(crate::lattice::v2(u.x - v.x, u.y - v.y)) {
            Some(uj) => {
                for &(b_rel, wt) in &kit.exits[uj] {
                    let b = v.offset(b_rel.x, b_rel.y);
                    if spec.contains(b) {
                        row[spec.index(b)] += coeff * wt;
                    }
                }
            }
            None => row[u_idx as usize] += coeff,
        }
    }
    Ok(BindingEvaluator {
        side: spec.side(),
        center: v,
        row,
    })
}

impl BindingEvaluator {
    pub fn center(&self) -> Vertex {
        self.center
    }

    /// Φ^{M,v}_v evaluated on a sample carrying its underlying DGFF.
    pub fn eval(&self, sample: &FieldSample) -> Result<f64> {
        if sample.spec.side() != self.side {
            return Err(Error::Config(
                "sample grid does not match the evaluator grid".into(),
            ));
        }
        let phi = sample.underlying.as_ref().ok_or_else(|| {
            Error::Config(
                "binding-field evaluation needs the sample's retained underlying DGFF".into(),
            )
        })?;
        Ok(self.row.dot(phi))
    }
}
