//! Grid geometry: the square grid V_N = [0,N)² ∩ Z², scale-dependent boxes,
//! ℓ¹ neighborhoods, dyadic box enumeration and boundary-safe interior
//! regions.

use crate::{Error, Result};
use std::collections::HashMap;

/// A lattice point. Coordinates are signed so that offsets and out-of-grid
/// exit sites can be represented with the same type.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Vertex {
    pub x: i64,
    pub y: i64,
}

/// Shorthand constructor.
pub const fn v2(x: i64, y: i64) -> Vertex {
    Vertex { x, y }
}

impl Vertex {
    pub fn l1(self, other: Vertex) -> i64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn l2(self, other: Vertex) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        dx.hypot(dy)
    }

    pub fn offset(self, dx: i64, dy: i64) -> Vertex {
        v2(self.x + dx, self.y + dy)
    }

    /// The four nearest neighbors in the order E, N, W, S.
    pub fn neighbors(self) -> [Vertex; 4] {
        [
            self.offset(1, 0),
            self.offset(0, 1),
            self.offset(-1, 0),
            self.offset(0, -1),
        ]
    }
}

impl std::fmt::Display for Vertex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// The grid V_N = [0,N)² ∩ Z².
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    n: u32,
}

impl GridSpec {
    pub fn new(n: u32) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("grid side must be ≥ 2, got {n}")));
        }
        Ok(GridSpec { n })
    }

    pub fn side(&self) -> u32 {
        self.n
    }

    pub fn nf(&self) -> f64 {
        f64::from(self.n)
    }

    pub fn vertex_count(&self) -> usize {
        (self.n as usize) * (self.n as usize)
    }

    pub fn contains(&self, v: Vertex) -> bool {
        let n = i64::from(self.n);
        v.x >= 0 && v.x < n && v.y >= 0 && v.y < n
    }

    /// Canonical index: row-major with y as the row, x varying fastest.
    /// This order is shared by field vectors, Green tables over V_N and the
    /// on-disk field format.
    pub fn index(&self, v: Vertex) -> usize {
        debug_assert!(self.contains(v));
        (v.y as usize) * (self.n as usize) + v.x as usize
    }

    pub fn vertex(&self, index: usize) -> Vertex {
        let n = self.n as usize;
        debug_assert!(index < n * n);
        v2((index % n) as i64, (index / n) as i64)
    }

    /// All vertices in canonical order.
    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        let n = i64::from(self.n);
        (0..n).flat_map(move |y| (0..n).map(move |x| v2(x, y)))
    }

    pub fn full_rect(&self) -> Rect {
        let n = i64::from(self.n);
        Rect {
            lo: v2(0, 0),
            hi: v2(n - 1, n - 1),
        }
    }
}

/// A closed axis-aligned lattice rectangle, both corners inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub lo: Vertex,
    pub hi: Vertex,
}

impl Rect {
    /// Empty if any axis is inverted.
    pub fn is_empty(&self) -> bool {
        self.lo.x > self.hi.x || self.lo.y > self.hi.y
    }

    pub fn contains(&self, v: Vertex) -> bool {
        v.x >= self.lo.x && v.x <= self.hi.x && v.y >= self.lo.y && v.y <= self.hi.y
    }

    pub fn vertex_count(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            ((self.hi.x - self.lo.x + 1) * (self.hi.y - self.lo.y + 1)) as usize
        }
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        let r = *self;
        (r.lo.y..=r.hi.y).flat_map(move |y| (r.lo.x..=r.hi.x).map(move |x| v2(x, y)))
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        Rect {
            lo: v2(self.lo.x.max(other.lo.x), self.lo.y.max(other.lo.y)),
            hi: v2(self.hi.x.min(other.hi.x), self.hi.y.min(other.hi.y)),
        }
    }

    /// The rectangle shrunk by one layer on every side (the open interior).
    pub fn shrink(&self) -> Rect {
        Rect {
            lo: v2(self.lo.x + 1, self.lo.y + 1),
            hi: v2(self.hi.x - 1, self.hi.y - 1),
        }
    }
}

/// A finite vertex set with O(1) membership lookup and a deterministic
/// (sorted) iteration order.
#[derive(Clone, Debug)]
pub struct Region {
    verts: Vec<Vertex>,
    index: HashMap<Vertex, usize>,
}

impl Region {
    pub fn from_vertices(mut verts: Vec<Vertex>) -> Region {
        verts.sort_unstable();
        verts.dedup();
        let index = verts.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        Region { verts, index }
    }

    pub fn from_rect(rect: &Rect) -> Region {
        Region::from_vertices(rect.vertices().collect())
    }

    pub fn full_grid(spec: &GridSpec) -> Region {
        Region::from_rect(&spec.full_rect())
    }

    pub fn len(&self) -> usize {
        self.verts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verts.is_empty()
    }

    pub fn contains(&self, v: Vertex) -> bool {
        self.index.contains_key(&v)
    }

    pub fn position(&self, v: Vertex) -> Option<usize> {
        self.index.get(&v).copied()
    }

    pub fn vertex(&self, i: usize) -> Vertex {
        self.verts[i]
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.verts
    }

    /// The exterior boundary: vertices outside the region adjacent to it.
    pub fn exterior_boundary(&self) -> Vec<Vertex> {
        let mut out: Vec<Vertex> = self
            .verts
            .iter()
            .flat_map(|v| v.neighbors())
            .filter(|w| !self.contains(*w))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn is_disjoint(&self, other: &Region) -> bool {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.verts.iter().all(|v| !large.contains(*v))
    }
}

/// Round to the nearest integer with ties going up.
fn round_ties_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Half-width of the scale-λ window on V_N for 0 < λ < 1.
pub(crate) fn window_half_width(spec: &GridSpec, lambda: f64) -> i64 {
    round_ties_up(spec.nf().powf(1.0 - lambda) / 2.0)
}

/// The window `[v]_λ`: a box of half-width ½·N^{1−λ} around `v`, clipped to
/// V_N. The endpoints are definitional: λ = 0 is the whole grid and λ = 1 is
/// the singleton {v}; in between the half-width is rounded to the nearest
/// integer with ties up.
pub fn box_around(spec: &GridSpec, v: Vertex, lambda: f64) -> Result<Rect> {
    if !spec.contains(v) {
        return Err(Error::Domain(format!("vertex {v} outside V_{}", spec.side())));
    }
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(Error::Domain(format!("scale λ={lambda} outside [0,1]")));
    }
    if lambda == 0.0 {
        return Ok(spec.full_rect());
    }
    if lambda == 1.0 {
        return Ok(Rect { lo: v, hi: v });
    }
    let h = window_half_width(spec, lambda);
    let rect = Rect {
        lo: v.offset(-h, -h),
        hi: v.offset(h, h),
    };
    Ok(rect.intersect(&spec.full_rect()))
}

/// The ℓ¹ ball Λ_r(v) = {w : ‖v−w‖₁ ≤ r}, unclipped — callers clip to the
/// grid where needed. Contains 2r²+2r+1 vertices.
pub fn l1_neighborhood(v: Vertex, r: i64) -> Result<Vec<Vertex>> {
    if r < 0 {
        return Err(Error::Domain(format!("ℓ¹ radius must be ≥ 0, got {r}")));
    }
    let mut out = Vec::with_capacity((2 * r * r + 2 * r + 1) as usize);
    for dy in -r..=r {
        let rem = r - dy.abs();
        for dx in -rem..=rem {
            out.push(v.offset(dx, dy));
        }
    }
    Ok(out)
}

/// All boxes of side 2^j with lower-left corner in V_N that contain `v`,
/// returned as their corners in sorted order. Boxes may overhang the grid;
/// only the corner is required to lie in V_N.
pub fn dyadic_boxes_containing(spec: &GridSpec, v: Vertex, j: u32) -> Result<Vec<Vertex>> {
    if !spec.contains(v) {
        return Err(Error::Domain(format!("vertex {v} outside V_{}", spec.side())));
    }
    let side = 1i64
        .checked_shl(j)
        .filter(|s| *s <= i64::from(spec.side()))
        .ok_or_else(|| {
            Error::Domain(format!(
                "dyadic level {j} exceeds grid: 2^{j} > {}",
                spec.side()
            ))
        })?;
    let lo_x = (v.x - side + 1).max(0);
    let lo_y = (v.y - side + 1).max(0);
    let mut out = Vec::with_capacity(((v.x - lo_x + 1) * (v.y - lo_y + 1)) as usize);
    for y in lo_y..=v.y {
        for x in lo_x..=v.x {
            out.push(v2(x, y));
        }
    }
    Ok(out)
}

fn check_pow2_divisor(name: &str, value: u32, n: u32) -> Result<()> {
    if value == 0 || !value.is_power_of_two() {
        return Err(Error::Config(format!(
            "{name} = {value} must be a power of two"
        )));
    }
    if n % value != 0 {
        return Err(Error::Config(format!(
            "{name} = {value} does not divide N = {n}"
        )));
    }
    Ok(())
}

/// Distance from `v ∈ rect` to the complement of the closed box `rect`
/// (its exterior boundary): one more than the distance to the nearest edge.
fn dist_to_rect_exterior(rect: &Rect, v: Vertex) -> i64 {
    1 + (v.x - rect.lo.x)
        .min(rect.hi.x - v.x)
        .min(v.y - rect.lo.y)
        .min(rect.hi.y - v.y)
}

/// The boundary-safe vertex set: the intersection, over the four tilings of
/// V_N by boxes of sides N/L, N/(K·L), L and K·L, of the union of the
/// δ-shrunk tiles. A vertex survives iff in every tiling it is at least
/// δ·(tile side) away from the complement of its tile.
pub fn interior_region(
    spec: &GridSpec,
    k: u32,
    l: u32,
    kp: u32,
    lp: u32,
    delta: f64,
) -> Result<Region> {
    let n = spec.side();
    check_pow2_divisor("K", k, n)?;
    check_pow2_divisor("L", l, n)?;
    check_pow2_divisor("K'", kp, n)?;
    check_pow2_divisor("L'", lp, n)?;
    let kl = k
        .checked_mul(l)
        .filter(|kl| n % kl == 0 && *kl <= n)
        .ok_or_else(|| Error::Config(format!("K·L = {k}·{l} does not divide N = {n}")))?;
    if !(0.0..0.5).contains(&delta) || delta <= 0.0 {
        return Err(Error::Config(format!("δ = {delta} outside (0, 1/2)")));
    }
    let sides = [n / l, n / kl, l, kl];
    let verts = spec
        .vertices()
        .filter(|&v| {
            sides.iter().all(|&side| {
                let s = i64::from(side);
                let tile = Rect {
                    lo: v2((v.x / s) * s, (v.y / s) * s),
                    hi: v2((v.x / s) * s + s - 1, (v.y / s) * s + s - 1),
                };
                (dist_to_rect_exterior(&tile, v) as f64) >= delta * side as f64
            })
        })
        .collect();
    Ok(Region::from_vertices(verts))
}
