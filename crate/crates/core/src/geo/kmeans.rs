//! Lloyd's k-means on locally projected coordinates.
//!
//! Only used to generate synthetic clusterings of interventional units; real
//! analyses take the clustering as an input.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GeoPoint, LocalProjection};

/// Returns a 0-based cluster label per point. Every label in `0..k` is used
/// when `points.len() >= k`.
pub fn kmeans(points: &[GeoPoint], k: usize, max_iter: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n).max(1);
    if n == 0 {
        return Vec::new();
    }
    let proj = LocalProjection::about_centroid(points);
    let xy: Vec<[f64; 2]> = points.iter().map(|&p| proj.project(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<[f64; 2]> = sample(&mut rng, n, k).iter().map(|i| xy[i]).collect();
    let mut labels = vec![0usize; n];

    let nearest = |c: &[[f64; 2]], p: [f64; 2]| -> usize {
        let d2 = |q: [f64; 2]| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        (0..c.len()).min_by(|&a, &b| d2(c[a]).total_cmp(&d2(c[b]))).unwrap()
    };

    for iter in 0..max_iter.max(1) {
        let new: Vec<usize> = xy.iter().map(|&p| nearest(&centers, p)).collect();
        if iter > 0 && new == labels {
            break;
        }
        labels = new;
        let mut sums = vec![[0.0f64; 3]; k];
        for (p, &l) in xy.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            sums[l][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }

    // reseed empty clusters with the point farthest from its centre
    loop {
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let far = (0..n)
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let d = |i: usize| {
                    let c = centers[labels[i]];
                    (xy[i][0] - c[0]).powi(2) + (xy[i][1] - c[1]).powi(2)
                };
                d(a).total_cmp(&d(b))
            })
            .expect("n >= k guarantees a cluster with two points");
        labels[far] = empty;
        centers[empty] = xy[far];
    }
    labels
}
