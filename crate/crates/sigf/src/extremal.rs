//! Centering sequences, r-local maxima, the extremal point process with its
//! cluster decoration, level sets, and joint region maxima.

use crate::fields::FieldSample;
use crate::lattice::{l1_neighborhood, Vertex};
use crate::{Error, Result};

/// 2·log N − ¼·log log N, the centering of the maximum.
pub fn m_centering(n: u32) -> Result<f64> {
    if n < 3 {
        return Err(Error::Domain(format!(
            "centering needs N ≥ 3 so that log log N > 0, got {n}"
        )));
    }
    let ln_n = f64::from(n).ln();
    Ok(2.0 * ln_n - 0.25 * ln_n.ln())
}

/// 2·log N·I(k/n, t/n) − (t∧(n−l̄))·log n / (4(n−l̄)) with n = log₂N: the
/// scale-dependent centering of intermediate running maxima.
pub fn m_kt(
    n_side: u32,
    k: f64,
    t: f64,
    l_bar: f64,
    profile: &crate::fields::VarianceProfile,
) -> Result<f64> {
    if !n_side.is_power_of_two() || n_side < 4 {
        return Err(Error::Domain(format!(
            "scale centering needs N = 2^n ≥ 4, got {n_side}"
        )));
    }
    let n = f64::from(n_side.trailing_zeros());
    if !(0.0 <= k && k <= t && t <= n) {
        return Err(Error::Domain(format!(
            "scale ordering 0 ≤ k ≤ t ≤ n violated: k = {k}, t = {t}, n = {n}"
        )));
    }
    if !(0.0..n).contains(&l_bar) {
        return Err(Error::Domain(format!(
            "boundary-scale parameter l̄ = {l_bar} outside [0, n = {n})"
        )));
    }
    let ln_big_n = f64::from(n_side).ln();
    let integral = profile.integral_sq(k / n, t / n)?;
    Ok(2.0 * ln_big_n * integral - (t.min(n - l_bar) * n.ln()) / (4.0 * (n - l_bar)))
}

/// One extremal atom: scaled position, centred height, and its source.
#[derive(Clone, Debug)]
pub struct Atom {
    pub x: [f64; 2],
    pub h: f64,
    pub source: Vertex,
    /// true when a decoration window around the source left the grid
    pub clipped: bool,
}

/// Positions and centred heights of the r-local maxima of one field.
#[derive(Clone, Debug)]
pub struct PointProcessSample {
    pub atoms: Vec<Atom>,
    pub side: u32,
    pub r: i64,
    pub centering: f64,
}

impl PointProcessSample {
    /// ⟨η, f⟩ = Σ_atoms f(x₁, x₂, h).
    pub fn integrate(&self, f: impl Fn(f64, f64, f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| f(a.x[0], a.x[1], a.h)).sum()
    }
}

/// Extremal atoms together with the per-atom cluster shape
/// θ(w) = ψ_v − ψ_{v+w}.
#[derive(Clone, Debug)]
pub struct ClusteredSample {
    pub base: PointProcessSample,
    /// parallel to `base.atoms`
    pub thetas: Vec<Vec<(Vertex, f64)>>,
}

/// All v whose height is maximal over Λ_r(v) ∩ V_N; exact ties qualify.
pub fn local_maxima(field: &FieldSample, r: i64) -> Result<Vec<(Vertex, f64)>> {
    if r < 1 {
        return Err(Error::Domain(format!("local-maximum radius must be ≥ 1, got {r}")));
    }
    let spec = field.spec;
    let mut out = Vec::new();
    'vertices: for v in spec.vertices() {
        let h = field.heights[spec.index(v)];
        for w in l1_neighborhood(v, r)? {
            if w != v && spec.contains(w) && field.heights[spec.index(w)] > h {
                continue 'vertices;
            }
        }
        out.push((v, h));
    }
    Ok(out)
}

/// η_{N,r}: atoms (v/N, ψ_v − m_N) over the r-local maxima.
pub fn extremal_process(field: &FieldSample, r: i64) -> Result<PointProcessSample> {
    let centering = m_centering(field.spec.side())?;
    let nf = field.spec.nf();
    let atoms = local_maxima(field, r)?
        .into_iter()
        .map(|(v, h)| Atom {
            x: [v.x as f64 / nf, v.y as f64 / nf],
            h: h - centering,
            source: v,
            clipped: false,
        })
        .collect();
    Ok(PointProcessSample {
        atoms,
        side: field.spec.side(),
        r,
        centering,
    })
}

/// μ_{N,r}: extremal atoms decorated with gaps on the ℓ¹ window of radius
/// `j ≤ r`; windows leaving the grid are kept and flagged clipped.
pub fn full_process(field: &FieldSample, r: i64, j: i64) -> Result<ClusteredSample> {
    if j < 0 || j > r {
        return Err(Error::Domain(format!(
            "decoration window j = {j} must lie in [0, r = {r}]"
        )));
    }
    let mut base = extremal_process(field, r)?;
    let spec = field.spec;
    let mut thetas = Vec::with_capacity(base.atoms.len());
    for atom in &mut base.atoms {
        let v = atom.source;
        let h = field.heights[spec.index(v)];
        let mut theta = Vec::new();
        let mut clipped = false;
        for w in l1_neighborhood(v, j)? {
            if spec.contains(w) {
                theta.push((
                    crate::lattice::v2(w.x - v.x, w.y - v.y),
                    h - field.heights[spec.index(w)],
                ));
            } else {
                clipped = true;
            }
        }
        theta.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        atom.clipped = clipped;
        thetas.push(theta);
    }
    Ok(ClusteredSample { base, thetas })
}

/// Flattens a decorated sample into atoms (x_i, h_i − θ_i(w)) over every
/// window offset of every atom.
pub fn superpose(clustered: &ClusteredSample) -> PointProcessSample {
    let mut atoms = Vec::new();
    for (atom, theta) in clustered.base.atoms.iter().zip(&clustered.thetas) {
        for &(w, th) in theta {
            atoms.push(Atom {
                x: atom.x,
                h: atom.h - th,
                source: atom.source.offset(w.x, w.y),
                clipped: atom.clipped,
            });
        }
    }
    PointProcessSample {
        atoms,
        side: clustered.base.side,
        r: clustered.base.r,
        centering: clustered.base.centering,
    }
}

/// Γ_N(y) = {v : ψ_v ≥ m_N − y}.
pub fn level_set(field: &FieldSample, y: f64) -> Result<Vec<Vertex>> {
    let threshold = m_centering(field.spec.side())? - y;
    let spec = field.spec;
    Ok(spec
        .vertices()
        .filter(|v| field.heights[spec.index(*v)] >= threshold)
        .collect())
}

/// Axis-aligned half-open rectangle [lo₁,hi₁)×[lo₂,hi₂) in scaled
/// coordinates on [0,1]².
#[derive(Clone, Copy, Debug)]
pub struct ScaledRect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl ScaledRect {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Result<ScaledRect> {
        if !(lo[0] < hi[0] && lo[1] < hi[1]) {
            return Err(Error::Domain(format!(
                "degenerate scaled rectangle [{},{})×[{},{})",
                lo[0], hi[0], lo[1], hi[1]
            )));
        }
        Ok(ScaledRect { lo, hi })
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (self.lo[0]..self.hi[0]).contains(&x[0]) && (self.lo[1]..self.hi[1]).contains(&x[1])
    }

    fn overlaps(&self, other: &ScaledRect) -> bool {
        self.lo[0] < other.hi[0]
            && other.lo[0] < self.hi[0]
            && self.lo[1] < other.hi[1]
            && other.lo[1] < self.hi[1]
    }
}

/// Centred maximum of the field over each scaled region; `None` marks a
/// region whose lattice intersection is empty.
pub fn joint_region_maxima(
    field: &FieldSample,
    regions: &[ScaledRect],
) -> Result<Vec<Option<f64>>> {
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            if a.overlaps(b) {
                return Err(Error::Domain(
                    "scaled regions must be pairwise disjoint".into(),
                ));
            }
        }
    }
    let centering = m_centering(field.spec.side())?;
    let spec = field.spec;
    let nf = spec.nf();
    let mut out = vec![None; regions.len()];
    for v in spec.vertices() {
        let x = [v.x as f64 / nf, v.y as f64 / nf];
        let h = field.heights[spec.index(v)];
        for (slot, region) in out.iter_mut().zip(regions) {
            if region.contains(x) {
                *slot = Some(slot.map_or(h - centering, |m: f64| m.max(h - centering)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{sample_inhomogeneous, VarianceProfile};
    use crate::lattice::{v2, GridSpec};
    use crate::sampler::RngStream;
    use nalgebra::DVector;

    fn synthetic(spec: GridSpec, f: impl Fn(Vertex) -> f64) -> FieldSample {
        FieldSample {
            spec,
            heights: DVector::from_fn(spec.vertex_count(), |i, _| f(spec.vertex(i))),
            underlying: None,
            tag: "synthetic".into(),
        }
    }

    #[test]
    fn centering_frozen_values() {
        assert!((m_centering(16).unwrap() - 5.2902).abs() < 5e-5);
        assert!((m_centering(256).unwrap() - 10.6621).abs() < 5e-5);
        assert!(m_centering(2).is_err());
        let mut prev = m_centering(8).unwrap();
        for n in 9..=1000 {
            let cur = m_centering(n).unwrap();
            assert!(cur > prev, "not increasing at N = {n}");
            prev = cur;
        }
    }

    #[test]
    fn scale_centering_substitutions() {
        let hom = VarianceProfile::homogeneous();
        let n_side = 64u32; // n = 6
        let n = 6.0f64;
        let got = m_kt(n_side, 0.0, n, 0.0, &hom).unwrap();
        let expected = 2.0 * 64.0f64.ln() - 0.25 * n.ln();
        assert!((got - expected).abs() < 1e-12);

        let got_half = m_kt(n_side, 0.0, n / 2.0, 0.0, &hom).unwrap();
        let expected_half = 64.0f64.ln() - n.ln() / 8.0;
        assert!((got_half - expected_half).abs() < 1e-12);

        // monotone non-decreasing in t for the standard profile
        let prof = VarianceProfile::standard_two_scale();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=24 {
            let t = n * f64::from(i) / 24.0;
            let cur = m_kt(n_side, 0.0, t, 1.0, &prof).unwrap();
            assert!(cur >= prev - 1e-12, "decreased at t = {t}");
            prev = cur;
        }

        assert!(m_kt(n_side, 3.0, 2.0, 0.0, &hom).is_err());
        assert!(m_kt(n_side, 0.0, 2.0, 6.0, &hom).is_err());
    }

    #[test]
    fn spike_and_constant_fields() {
        let spec = GridSpec::new(8).unwrap();
        let spike = v2(3, 5);
        let f = synthetic(spec, |v| if v == spike { 1.0 } else { 0.0 });
        for r in [1, 2, 5] {
            let m = local_maxima(&f, r).unwrap();
            // the spike always qualifies; any other qualifier is a flat-
            // background tie at height zero, per the tie rule
            assert!(m.contains(&(spike, 1.0)));
            assert!(m.iter().all(|&(v, h)| v == spike || h == 0.0));
            assert!(m
                .iter()
                .all(|&(v, _)| v == spike || v.l1(spike) > r));
        }
        // once the window covers the grid from everywhere, the spike is the
        // only maximum
        assert_eq!(local_maxima(&f, 14).unwrap(), vec![(spike, 1.0)]);
        let flat = synthetic(spec, |_| 0.25);
        assert_eq!(local_maxima(&flat, 2).unwrap().len(), 64);
        // the global argmax always qualifies
        let mut stream = RngStream::from_seed(81).derive("extremal-argmax");
        let g = sample_inhomogeneous(&spec, &VarianceProfile::standard_two_scale(), &mut stream)
            .unwrap();
        let (vmax, _) = g.max();
        assert!(local_maxima(&g, 3).unwrap().iter().any(|(v, _)| *v == vmax));
    }

    #[test]
    fn maxima_antitone_and_separated() {
        let spec = GridSpec::new(16).unwrap();
        let mut stream = RngStream::from_seed(82).derive("extremal-antitone");
        let g = sample_inhomogeneous(&spec, &VarianceProfile::standard_two_scale(), &mut stream)
            .unwrap();
        let m2: Vec<Vertex> = local_maxima(&g, 2).unwrap().into_iter().map(|p| p.0).collect();
        let m4: Vec<Vertex> = local_maxima(&g, 4).unwrap().into_iter().map(|p| p.0).collect();
        assert!(m4.iter().all(|v| m2.contains(v)), "Θ not antitone in r");
        for (i, u) in m4.iter().enumerate() {
            for w in &m4[i + 1..] {
                assert!(u.l1(*w) > 4, "maxima {u} and {w} too close");
            }
        }
    }

    #[test]
    fn process_integration_matches_indicator_sum() {
        let spec = GridSpec::new(16).unwrap();
        let mut stream = RngStream::from_seed(83).derive("extremal-integrate");
        let g = sample_inhomogeneous(&spec, &VarianceProfile::standard_two_scale(), &mut stream)
            .unwrap();
        let r = 3;
        let pp = extremal_process(&g, r).unwrap();
        let f = |x1: f64, x2: f64, h: f64| (x1 + 2.0 * x2) * (-h).exp().min(10.0);
        let via_atoms = pp.integrate(f);
        // oracle: indicator sum over the whole grid
        let m_n = m_centering(16).unwrap();
        let maxima = local_maxima(&g, r).unwrap();
        let direct: f64 = spec
            .vertices()
            .filter(|v| maxima.iter().any(|(u, _)| u == v))
            .map(|v| {
                f(
                    v.x as f64 / 16.0,
                    v.y as f64 / 16.0,
                    g.heights[spec.index(v)] - m_n,
                )
            })
            .sum();
        assert!((via_atoms - direct).abs() <= 1e-12);
    }

    #[test]
    fn decoration_and_superposition() {
        let spec = GridSpec::new(8).unwrap();
        let spike = v2(4, 4);
        let f = synthetic(spec, |v| if v == spike { 10.0 } else { 0.0 });
        let cs = full_process(&f, 2, 2).unwrap();
        let i = cs
            .base
            .atoms
            .iter()
            .position(|a| a.source == spike)
            .unwrap();
        assert!(!cs.base.atoms[i].clipped);
        let theta = &cs.thetas[i];
        assert_eq!(theta.len(), 13);
        let zero = theta.iter().find(|(w, _)| *w == v2(0, 0)).unwrap();
        assert_eq!(zero.1, 0.0);
        // gaps are nonnegative inside the maximality window, and every
        // decorated height stays below its parent atom
        for (atom, th) in cs.base.atoms.iter().zip(&cs.thetas) {
            assert!(th.iter().all(|&(_, t)| t >= 0.0), "atom {}", atom.source);
        }
        let flat = superpose(&cs);
        assert_eq!(
            flat.atoms.len(),
            cs.thetas.iter().map(Vec::len).sum::<usize>()
        );
        let top = cs.base.atoms[i].h;
        assert!(flat
            .atoms
            .iter()
            .filter(|a| a.x == cs.base.atoms[i].x)
            .all(|a| a.h <= top));

        // a single atom with flat θ ≡ 0 superposes to 2j²+2j+1 coincident
        // heights
        let lone = ClusteredSample {
            base: PointProcessSample {
                atoms: vec![Atom {
                    x: [0.5, 0.5],
                    h: 1.25,
                    source: spike,
                    clipped: false,
                }],
                side: 8,
                r: 2,
                centering: m_centering(8).unwrap(),
            },
            thetas: vec![l1_neighborhood(v2(0, 0), 2)
                .unwrap()
                .into_iter()
                .map(|w| (w, 0.0))
                .collect()],
        };
        let coincident = superpose(&lone);
        assert_eq!(coincident.atoms.len(), 13);
        assert!(coincident.atoms.iter().all(|a| a.h == 1.25));

        // corner atom gets clipped decorations
        let corner_field = synthetic(spec, |v| if v == v2(0, 0) { 5.0 } else { 0.0 });
        let cc = full_process(&corner_field, 2, 2).unwrap();
        let corner_atom = cc
            .base
            .atoms
            .iter()
            .position(|a| a.source == v2(0, 0))
            .unwrap();
        assert!(cc.base.atoms[corner_atom].clipped);
        assert!(full_process(&f, 2, 3).is_err());
    }

    #[test]
    fn level_sets_are_monotone() {
        let spec = GridSpec::new(16).unwrap();
        let mut stream = RngStream::from_seed(84).derive("extremal-level");
        let g = sample_inhomogeneous(&spec, &VarianceProfile::standard_two_scale(), &mut stream)
            .unwrap();
        let below_min = g.heights.min() - m_centering(16).unwrap() - 1.0;
        assert!(level_set(&g, below_min).unwrap().is_empty());
        let all_nonneg = level_set(&g, m_centering(16).unwrap()).unwrap();
        let direct = spec
            .vertices()
            .filter(|v| g.heights[spec.index(*v)] >= 0.0)
            .count();
        assert_eq!(all_nonneg.len(), direct);
        let g1 = level_set(&g, 0.5).unwrap();
        let g2 = level_set(&g, 1.5).unwrap();
        assert!(g1.iter().all(|v| g2.contains(v)));
    }

    #[test]
    fn region_maxima_split_the_grid() {
        let spec = GridSpec::new(16).unwrap();
        let mut stream = RngStream::from_seed(85).derive("extremal-regions");
        let g = sample_inhomogeneous(&spec, &VarianceProfile::standard_two_scale(), &mut stream)
            .unwrap();
        let whole = ScaledRect::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        let global = joint_region_maxima(&g, &[whole]).unwrap()[0].unwrap();
        assert!((global - (g.max().1 - m_centering(16).unwrap())).abs() < 1e-12);

        let left = ScaledRect::new([0.0, 0.0], [0.5, 1.0]).unwrap();
        let right = ScaledRect::new([0.5, 0.0], [1.0, 1.0]).unwrap();
        let halves = joint_region_maxima(&g, &[left, right]).unwrap();
        assert!(halves.iter().all(|m| m.unwrap() <= global + 1e-12));
        let swapped = joint_region_maxima(&g, &[right, left]).unwrap();
        assert_eq!(halves[0], swapped[1]);
        assert_eq!(halves[1], swapped[0]);

        // empty lattice intersection → missing value
        let sliver = ScaledRect::new([0.001, 0.001], [0.002, 0.002]).unwrap();
        let tiny = joint_region_maxima(&g, &[sliver]).unwrap();
        assert!(tiny[0].is_none());
        assert!(joint_region_maxima(&g, &[whole, left]).is_err());
    }
}
