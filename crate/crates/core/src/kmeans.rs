//! k-means++ seeding followed by Lloyd iterations, used to initialize labels
//! from the vectorized observations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sampling::RngState;

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    points.row(i).iter().zip(centers.row(c).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn nearest(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>) -> (usize, f64) {
    (0..centers.nrows())
        .map(|c| (c, sq_dist(points, i, centers, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn seed_plus_plus(points: &DMatrix<f64>, k: usize, rng: &mut RngState) -> DMatrix<f64> {
    let (n, d) = points.shape();
    let mut centers = DMatrix::zeros(k, d);
    let first = (rng.uniform() * n as f64) as usize % n;
    centers.row_mut(0).copy_from(&points.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            (rng.uniform() * n as f64) as usize % n
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

/// Result of one clustering: labels in `0..k` and within-cluster sum of squares.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn lloyd(points: &DMatrix<f64>, mut centers: DMatrix<f64>, max_iter: usize) -> KMeans {
    let (n, d) = points.shape();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (c, _) = nearest(points, i, &centers);
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = DMatrix::zeros(k, d);
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += points.row(i);
        }
        // An emptied cluster takes the point farthest from its current center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points, a, &centers, labels[a]);
                        let db = sq_dist(points, b, &centers, labels[b]);
                        da.total_cmp(&db)
                    })
                    .expect("n >= k guarantees a donor cluster");
                let old = labels[far];
                counts[old] -= 1;
                {
                    let mut row = sums.row_mut(old);
                    row -= points.row(far);
                }
                labels[far] = c;
                counts[c] = 1;
                sums.row_mut(c).copy_from(&points.row(far));
                changed = true;
            }
        }
        for c in 0..k {
            let mean = sums.row(c) / counts[c] as f64;
            centers.row_mut(c).copy_from(&mean);
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points, i, &centers, labels[i])).sum();
    KMeans { labels, inertia }
}

/// Best of `n_init` k-means++/Lloyd runs on the rows of `points`. Every
/// cluster is non-empty on return.
pub fn kmeans(points: &DMatrix<f64>, k: usize, n_init: usize, rng: &mut RngState) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::DegenerateData(format!("{n} observations cannot form {k} clusters")));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..n_init.max(1) {
        let centers = seed_plus_plus(points, k, rng);
        let fit = lloyd(points, centers, 300);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}
