use rand::Rng;

use crate::codebook::sq_dist;

/// k-means++ seeding: picks `k` rows of `samples` (`N x dim`) with
/// probability proportional to squared distance from the already chosen set.
pub fn kmeans_plus_plus<R: Rng>(samples: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<f32> {
    let n = samples.len() / dim;
    assert!(n > 0 && dim > 0, "k-means++ needs at least one sample");
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first)) as f64).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.extend_from_slice(row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(pick)) as f64);
        }
    }
    centers
}
