use hrvq::codebook::HierCodebook;
use hrvq::seeded_rng;
use rand::Rng as _;

pub fn random_codebook(n: usize, m: usize, d: usize, seed: u64) -> HierCodebook {
    let mut rng = seeded_rng(seed);
    let tables = (1..=n)
        .map(|i| (0..m.pow(i as u32) * d).map(|_| rng.random_range(-1.0f32..1.0) / i as f32).collect())
        .collect();
    HierCodebook::from_tables(n, m, d, tables).unwrap()
}

pub fn random_vec(d: usize, seed: u64) -> Vec<f32> {
    let mut rng = seeded_rng(seed);
    (0..d).map(|_| rng.random_range(-1.5f32..1.5)).collect()
}

/// Independent greedy descent: at each layer scan the `m` rows of the child
/// table below the running prefix and keep the first minimum, computing
/// distances in f64.
pub fn oracle(cb: &HierCodebook, z: &[f32]) -> (Vec<u32>, Vec<f32>) {
    let (m, d) = (cb.size(), cb.dim());
    let mut r: Vec<f32> = z.to_vec();
    let mut prefix = 0usize;
    let mut path = Vec::new();
    for layer in 0..cb.layers() {
        let table = cb.tables()[layer].data();
        let mut best = (f64::INFINITY, 0usize);
        for k in 0..m {
            let row = &table[(prefix * m + k) * d..(prefix * m + k + 1) * d];
            let dist: f64 = r.iter().zip(row).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
        let row = &table[(prefix * m + best.1) * d..(prefix * m + best.1 + 1) * d];
        r.iter_mut().zip(row).for_each(|(a, &b)| *a -= b);
        path.push(best.1 as u32);
        prefix = prefix * m + best.1;
    }
    (path, r)
}

/// True when some layer's best and second-best distances are too close for
/// f32 and f64 accumulation to be guaranteed to agree.
pub fn near_tie(cb: &HierCodebook, path: &[u32], z: &[f32]) -> bool {
    let (m, d) = (cb.size(), cb.dim());
    let mut r: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    let mut prefix = 0usize;
    for (layer, &k) in path.iter().enumerate() {
        let table = cb.tables()[layer].data();
        let mut dists: Vec<f64> = (0..m)
            .map(|j| {
                let row = &table[(prefix * m + j) * d..(prefix * m + j + 1) * d];
                r.iter().zip(row).map(|(&a, &b)| (a - b as f64).powi(2)).sum()
            })
            .collect();
        let chosen = &table[(prefix * m + k as usize) * d..(prefix * m + k as usize + 1) * d];
        r.iter_mut().zip(chosen).for_each(|(a, &b)| *a -= b as f64);
        prefix = prefix * m + k as usize;
        dists.sort_by(f64::total_cmp);
        if dists[1] - dists[0] < 1e-5 {
            return true;
        }
    }
    false
}
