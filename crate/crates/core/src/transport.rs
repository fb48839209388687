//! Wasserstein-1 distances between equal-weight empirical measures and
//! path-space distances between recorded trajectories.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::ParticleEnsemble;
use crate::numeric::{dist, pairwise_sum};
use crate::record::TrajectoryRecord;
use crate::rng::{self, domain};

/// Largest width accepted by [`w1_exact`].
pub const EXACT_MAX: usize = 2048;

/// W1 between two equal-size samples on the line.
pub fn w1_exact_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("w1_exact_1d sample count", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::param("w1_exact_1d needs nonempty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let gaps: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
    Ok(pairwise_sum(&gaps) / a.len() as f64)
}

/// Exact W1 with Euclidean ground cost, via an optimal assignment.
pub fn w1_exact(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    if n > EXACT_MAX {
        return Err(Error::TooLarge { n, max: EXACT_MAX });
    }
    let mut cost = vec![0.0; n * n];
    for (i, row) in cost.chunks_exact_mut(n).enumerate() {
        let x = a.particle(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = dist(x, b.particle(j));
        }
    }
    let assignment = min_cost_assignment(&cost, n);
    let matched: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .collect();
    Ok(matching_cost(matched))
}

/// Mean of matched costs, summed in sorted order so the value does not
/// depend on which side indexes the rows.
pub fn matching_cost(mut costs: Vec<f64>) -> f64 {
    costs.sort_by(f64::total_cmp);
    pairwise_sum(&costs) / costs.len() as f64
}

fn check_pair(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("W1 sample count", a.len(), b.len()));
    }
    if a.dim() != b.dim() {
        return Err(Error::dim("W1 dimension", a.dim(), b.dim()));
    }
    Ok(())
}

/// Shortest-augmenting-path Hungarian method on a dense `n x n` cost matrix.
/// Returns the column assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    // 1-based potentials; column 0 is the virtual root of each search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let base = (i0 - 1) * n;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[base + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Sliced W1: the average of 1-D W1 over `projections` random unit
/// directions. A lower bound on W1, not an estimate of it.
pub fn w1_sliced(
    a: &ParticleEnsemble,
    b: &ParticleEnsemble,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(a, b)?;
    if projections == 0 {
        return Err(Error::param("sliced W1 needs at least one projection"));
    }
    let p = a.dim();
    let mut values = Vec::with_capacity(projections);
    for l in 0..projections {
        let mut rng = rng::stream(seed, domain::SLICED, l as u64);
        let mut dir: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= len);
        let project = |e: &ParticleEnsemble| -> Vec<f64> {
            e.iter()
                .map(|x| x.iter().zip(&dir).map(|(u, w)| u * w).sum())
                .collect()
        };
        values.push(w1_exact_1d(&project(a), &project(b))?);
    }
    Ok(pairwise_sum(&values) / projections as f64)
}

/// Exact W1 up to [`EXACT_MAX`], sliced W1 with 64 projections beyond.
pub fn w1_auto(a: &ParticleEnsemble, b: &ParticleEnsemble, seed: u64) -> Result<(f64, bool)> {
    if a.len() <= EXACT_MAX {
        Ok((w1_exact(a, b)?, true))
    } else {
        Ok((w1_sliced(a, b, 64, seed)?, false))
    }
}

/// Largest distance between matched tracked particles over all snapshots.
/// `subset` holds positions into the records' tracked lists; `None` uses all.
pub fn path_sup_distance(
    ta: &TrajectoryRecord,
    tb: &TrajectoryRecord,
    subset: Option<&[usize]>,
) -> Result<f64> {
    if ta.snapshots.len() != tb.snapshots.len() {
        return Err(Error::GridMismatch(format!(
            "{} vs {} snapshots",
            ta.snapshots.len(),
            tb.snapshots.len()
        )));
    }
    if ta.tracked_ids != tb.tracked_ids || ta.param_dim != tb.param_dim {
        return Err(Error::GridMismatch("tracked particles differ".into()));
    }
    let all: Vec<usize> = (0..ta.tracked_ids.len()).collect();
    let subset = subset.unwrap_or(&all);
    if let Some(&k) = subset.iter().find(|&&k| k >= all.len()) {
        return Err(Error::param(format!("tracked index {k} out of range")));
    }
    let p = ta.param_dim;
    let mut sup: f64 = 0.0;
    for (sa, sb) in ta.snapshots.iter().zip(&tb.snapshots) {
        if sa.step != sb.step {
            return Err(Error::GridMismatch(format!(
                "snapshot at step {} paired with step {}",
                sa.step, sb.step
            )));
        }
        for &k in subset {
            sup = sup.max(dist(sa.tracked_particle(k, p), sb.tracked_particle(k, p)));
        }
    }
    Ok(sup)
}

/// Root-mean-square particle distance `sqrt((1/n) sum |x^i - y^i|^2)`
/// between two ensembles with matched indices.
pub fn rms_distance(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    check_pair(a, b)?;
    let sq: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = dist(x, y);
            d * d
        })
        .collect();
    Ok((pairwise_sum(&sq) / a.len() as f64).sqrt())
}
