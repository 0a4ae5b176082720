//! The discrete Gaussian free field on V_N, sampled exactly through the
//! killed-walk factorization.

use super::FieldSample;
use crate::greenfn::{green_table, GreenTable};
use crate::lattice::{GridSpec, Region};
use crate::sampler::RngStream;
use crate::{Error, Result};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Largest grid side for the exact dense sampler.
pub const DGFF_EXACT_CAP: u32 = 64;

/// The Green table of V_N, built once per side length and shared. The
/// factorization is the expensive part of every exact draw, so all
/// samplers go through this cache.
pub fn grid_green(spec: &GridSpec) -> Result<Arc<GreenTable>> {
    if spec.side() > DGFF_EXACT_CAP {
        return Err(Error::Resource(format!(
            "N = {} exceeds the exact dense cap of {DGFF_EXACT_CAP}; use the \
             three-field approximation for larger grids",
            spec.side()
        )));
    }
    static CACHE: OnceLock<Mutex<HashMap<u32, Arc<GreenTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().unwrap().get(&spec.side()) {
        return Ok(Arc::clone(t));
    }
    let table = Arc::new(green_table(Region::full_grid(spec))?);
    cache
        .lock()
        .unwrap()
        .insert(spec.side(), Arc::clone(&table));
    Ok(table)
}

/// One exact draw of the free field on V_N (zero boundary).
pub fn sample_dgff(spec: &GridSpec, stream: &mut RngStream) -> Result<FieldSample> {
    let table = grid_green(spec)?;
    Ok(FieldSample {
        spec: *spec,
        heights: table.sample_zero_mean(stream),
        underlying: None,
        tag: "dgff".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{v2, Rect, Region};
    use crate::testkit::two_sample_ks;
    use std::f64::consts::PI;

    #[test]
    fn center_variance_matches_green() {
        let spec = GridSpec::new(3).unwrap();
        let mut stream = RngStream::from_seed(101).derive("dgff-var");
        let n = 10_000;
        let c = v2(1, 1);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let f = sample_dgff(&spec, &mut stream).unwrap();
            let h = f.height_at(c);
            sum += h;
            sum_sq += h * h;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = sum_sq / nf - mean * mean;
        let exact = 3.0 * PI / 4.0;
        // sample variance of a Gaussian: SE ≈ Var·√(2/n)
        let se = exact * (2.0 / nf).sqrt();
        assert!((var - exact).abs() < 5.0 * se, "var {var} vs {exact}");
        let mean_se = (exact / nf).sqrt();
        assert!(mean.abs() < 5.0 * mean_se, "mean {mean}");
    }

    #[test]
    fn cap_is_enforced() {
        let spec = GridSpec::new(65).unwrap();
        let mut stream = RngStream::from_seed(0);
        assert!(matches!(
            sample_dgff(&spec, &mut stream),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn gibbs_markov_resample_preserves_max_law() {
        // Resampling an inner box conditionally on its boundary values must
        // leave the law of the global maximum unchanged.
        let spec = GridSpec::new(8).unwrap();
        let inner = Region::from_rect(&Rect { lo: v2(2, 2), hi: v2(5, 5) });
        let inner_table = green_table(inner.clone()).unwrap();
        let rows: Vec<_> = inner
            .vertices()
            .iter()
            .map(|&u| crate::greenfn::harmonic_measure(&inner, u).unwrap())
            .collect();

        let mut stream = RngStream::from_seed(2024).derive("gibbs-markov");
        let n = 10_000;
        let mut max_plain = Vec::with_capacity(n);
        let mut max_resampled = Vec::with_capacity(n);
        for _ in 0..n {
            let f = sample_dgff(&spec, &mut stream).unwrap();
            max_plain.push(f.max().1);

            let mut g = f.heights.clone();
            let local = inner_table.sample_zero_mean(&mut stream);
            for (i, &u) in inner.vertices().iter().enumerate() {
                let mut harmonic = 0.0;
                for (b, w) in rows[i].weights() {
                    if spec.contains(*b) {
                        harmonic += w * f.heights[spec.index(*b)];
                    }
                }
                g[spec.index(u)] = harmonic + local[i];
            }
            max_resampled.push(g.max());
        }
        let (d, p) = two_sample_ks(&mut max_plain, &mut max_resampled);
        assert!(p > 0.01, "KS d = {d}, p = {p}");
    }
}
