//! Attractor census from orbit histograms and the expanding-power search.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cones::{estimate_splitting, DEFAULT_SPLITTING_ITERS};
use crate::error::{GmyError, Result};
use crate::hyptimes::walk_cu_stretch;
use crate::rng;
use crate::systems::{Point, System};

pub const DEFAULT_TV_THRESHOLD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaSignature {
    pub start: Point,
    pub g: usize,
    /// Row-major `g x g` occupancy, row index from `y`.
    pub occupancy: Vec<f64>,
}

fn cell_index(p: Point, g: usize) -> usize {
    let i = ((p.y * g as f64) as usize).min(g - 1);
    let j = ((p.x * g as f64) as usize).min(g - 1);
    i * g + j
}

/// Occupancy of the orbit over steps `burn_in + 1 ..= horizon`.
pub fn omega_signature(system: &System, x: Point, burn_in: usize, horizon: usize, g: usize) -> Result<OmegaSignature> {
    if burn_in >= horizon {
        return Err(GmyError::InvalidParameter(format!("burn-in {burn_in} must be below horizon {horizon}")));
    }
    if g == 0 {
        return Err(GmyError::InvalidParameter("grid must be positive".into()));
    }
    let mut p = system.iterate(x, burn_in);
    let mut counts = vec![0u64; g * g];
    for _ in burn_in..horizon {
        p = system.apply(p);
        counts[cell_index(p, g)] += 1;
    }
    let n = (horizon - burn_in) as f64;
    Ok(OmegaSignature {
        start: x,
        g,
        occupancy: counts.iter().map(|c| *c as f64 / n).collect(),
    })
}

pub fn tv_distance(a: &OmegaSignature, b: &OmegaSignature) -> f64 {
    0.5 * a.occupancy.iter().zip(&b.occupancy).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractorRecord {
    pub id: usize,
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
    /// Cells whose centroid mass exceeds half the uniform level.
    pub support: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub records: Vec<AttractorRecord>,
    pub assignment: Vec<usize>,
    pub distances: Vec<Vec<f64>>,
    pub threshold: f64,
}

/// Single-linkage clusters under total-variation distance. Clusters are
/// numbered by their smallest member index.
pub fn cluster_attractors(signatures: &[OmegaSignature], threshold: f64) -> Result<Clustering> {
    let n = signatures.len();
    if n < 2 {
        return Err(GmyError::InvalidParameter("clustering needs at least two signatures".into()));
    }
    let distances: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| tv_distance(&signatures[i], &signatures[j])).collect())
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut k = i;
        while p[k] != r {
            let next = p[k];
            p[k] = r;
            k = next;
        }
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if distances[i][j] <= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut assignment = vec![0; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        let id = match roots.iter().position(|x| *x == r) {
            Some(k) => k,
            None => {
                roots.push(r);
                roots.len() - 1
            }
        };
        assignment[i] = id;
    }
    let cells = signatures[0].occupancy.len();
    let records = (0..roots.len())
        .map(|id| {
            let members: Vec<usize> = (0..n).filter(|i| assignment[*i] == id).collect();
            let mut centroid = vec![0.0; cells];
            for &m in &members {
                for (c, v) in centroid.iter_mut().zip(&signatures[m].occupancy) {
                    *c += v / members.len() as f64;
                }
            }
            let level = 0.5 / cells as f64;
            let support = (0..cells).filter(|c| centroid[*c] > level).collect();
            AttractorRecord {
                id,
                members,
                centroid,
                support,
            }
        })
        .collect();
    Ok(Clustering {
        records,
        assignment,
        distances,
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusReport {
    pub system: String,
    pub starts: Vec<Point>,
    pub burn_in: usize,
    pub horizon: usize,
    pub g: usize,
    pub clusters: usize,
    pub clustering: Clustering,
}

pub fn random_starts(n: usize, seed: u64) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            Point::new(r.gen::<f64>(), r.gen::<f64>())
        })
        .collect()
}

pub fn census(system: &System, starts: &[Point], burn_in: usize, horizon: usize, g: usize, threshold: f64) -> Result<CensusReport> {
    let sigs = starts
        .par_iter()
        .map(|x| omega_signature(system, *x, burn_in, horizon, g))
        .collect::<Result<Vec<_>>>()?;
    let clustering = cluster_attractors(&sigs, threshold)?;
    Ok(CensusReport {
        system: system.name().to_string(),
        starts: starts.to_vec(),
        burn_in,
        horizon,
        g,
        clusters: clustering.records.len(),
        clustering,
    })
}

impl CensusReport {
    pub fn write_assignment_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["start", "x", "y", "cluster"])?;
        for (i, (p, c)) in self.starts.iter().zip(&self.clustering.assignment).enumerate() {
            w.write_record([i.to_string(), format!("{:.12}", p.x), format!("{:.12}", p.y), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_distance_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.clustering.distances {
            w.write_record(row.iter().map(|d| format!("{d:.9e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `log |(Df^N | E^cu)^{-1}|` along orbits.
pub trait CuCocycle: Sync {
    fn log_inverse_norm(&self, x: Point, n: usize) -> Result<f64>;
}

impl CuCocycle for System {
    fn log_inverse_norm(&self, x: Point, n: usize) -> Result<f64> {
        let mut s = 0.0;
        walk_cu_stretch(self, x, n, DEFAULT_SPLITTING_ITERS, |_, _, st| s -= st.ln())?;
        Ok(s)
    }
}

/// `log |Df^N(x) e_cu(x)|` from the explicit matrix product.
pub fn cu_log_norm_product(system: &System, x: Point, n: usize) -> Result<f64> {
    let frame = estimate_splitting(system, x, DEFAULT_SPLITTING_ITERS, f64::INFINITY)?;
    let mut m = crate::systems::Mat2::identity();
    let mut p = x;
    for _ in 0..n {
        m = system.derivative(p) * m;
        p = system.apply(p);
    }
    Ok((m * frame.e_cu).norm().ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandingPower {
    pub n: Option<usize>,
    pub value: Option<f64>,
    /// Weighted average for each tried `N`.
    pub averages: Vec<f64>,
    pub dropped: usize,
}

/// Smallest `N <= n_max` whose weighted average of `log |(Df^N|E^cu)^{-1}|` is negative.
pub fn find_expanding_power<C: CuCocycle>(cocycle: &C, samples: &[(Point, f64)], n_max: usize) -> Result<ExpandingPower> {
    let total: f64 = samples.iter().map(|s| s.1).sum();
    if samples.is_empty() || (total - 1.0).abs() > 1e-9 || samples.iter().any(|s| s.1 < 0.0) {
        return Err(GmyError::InvalidParameter("sample weights must be non-negative and sum to 1".into()));
    }
    let mut averages = Vec::new();
    let mut dropped_max = 0;
    for n in 1..=n_max {
        let vals: Vec<Option<f64>> = samples.par_iter().map(|(p, _)| cocycle.log_inverse_norm(*p, n).ok()).collect();
        let mut w = 0.0;
        let mut acc = 0.0;
        let mut dropped = 0;
        for (v, (_, wt)) in vals.iter().zip(samples) {
            match v {
                Some(v) => {
                    acc += wt * v;
                    w += wt;
                }
                None => dropped += 1,
            }
        }
        dropped_max = dropped_max.max(dropped);
        let avg = if w > 0.0 { acc / w } else { f64::NAN };
        averages.push(avg);
        if avg < 0.0 {
            return Ok(ExpandingPower {
                n: Some(n),
                value: Some(avg),
                averages,
                dropped: dropped_max,
            });
        }
    }
    Ok(ExpandingPower {
        n: None,
        value: None,
        averages,
        dropped: dropped_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::cat_lambda_minus;

    #[test]
    fn fixed_point_one_cell() {
        let s = System::cat();
        let sig = omega_signature(&s, Point::new(0.0, 0.0), 10, 1000, 16).unwrap();
        assert_eq!(sig.occupancy.iter().filter(|v| **v > 0.0).count(), 1);
        assert!((sig.occupancy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(omega_signature(&s, Point::new(0.1, 0.2), 10, 10, 16).is_err());
    }

    fn block(g: usize, lower: bool) -> OmegaSignature {
        let mut occ = vec![0.0; g * g];
        let rows = if lower { 0..g / 2 } else { g / 2..g };
        let k = (g / 2 * g) as f64;
        for i in rows {
            for j in 0..g {
                occ[i * g + j] = 1.0 / k;
            }
        }
        OmegaSignature {
            start: Point::new(0.0, 0.0),
            g,
            occupancy: occ,
        }
    }

    #[test]
    fn synthetic_clusters() {
        let c = cluster_attractors(&[block(8, true), block(8, true)], 0.2).unwrap();
        assert_eq!(c.records.len(), 1);
        let c = cluster_attractors(&[block(8, true), block(8, false), block(8, true), block(8, false)], 0.2).unwrap();
        assert_eq!(c.records.len(), 2);
        assert_eq!(c.assignment, vec![0, 1, 0, 1]);
        assert!(cluster_attractors(&[block(8, true)], 0.2).is_err());
    }

    #[test]
    fn cat_one_cluster() {
        let s = System::cat();
        let starts = random_starts(20, 11);
        let rep = census(&s, &starts, 100, 50_000, 16, DEFAULT_TV_THRESHOLD).unwrap();
        assert_eq!(rep.clusters, 1);
    }

    #[test]
    fn cat_expanding_power() {
        let s = System::cat();
        let samples = vec![(Point::new(0.1, 0.7), 0.5), (Point::new(0.4, 0.2), 0.5)];
        let ep = find_expanding_power(&s, &samples, 5).unwrap();
        assert_eq!(ep.n, Some(1));
        assert!((ep.value.unwrap() - cat_lambda_minus().ln()).abs() < 1e-6);
        assert!((ep.value.unwrap() + 0.962424).abs() < 1e-6);
    }

    struct Isometry;
    impl CuCocycle for Isometry {
        fn log_inverse_norm(&self, _: Point, _: usize) -> Result<f64> {
            Ok(0.0)
        }
    }

    #[test]
    fn zero_expansion_has_no_power() {
        let samples = vec![(Point::new(0.1, 0.7), 1.0)];
        let ep = find_expanding_power(&Isometry, &samples, 20).unwrap();
        assert_eq!(ep.n, None);
        assert_eq!(ep.averages.len(), 20);
    }

    #[test]
    fn product_matches_sum() {
        let s = System::perturbed_cat(0.1).unwrap();
        let x = Point::new(0.23, 0.61);
        for n in [1, 5, 12] {
            let a = -s.log_inverse_norm(x, n).unwrap();
            let b = cu_log_norm_product(&s, x, n).unwrap();
            assert!((a - b).abs() < 1e-8, "{n}: {a} vs {b}");
        }
    }
}
