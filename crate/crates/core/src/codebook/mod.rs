//! The tree of residual codebooks.
//!
//! Layer `i` (1-based) holds `m^(i-1)` codebooks of `m` codewords each. All
//! codebooks of a layer live in one `[m^i, d]` table; the codebook reached by
//! path prefix `(k1, .., k_{i-1})` occupies rows `parent * m .. parent * m + m`
//! where `parent` is the prefix's composite index. The row of the codeword a
//! path selects at layer `i` is therefore the composite index of its length-`i`
//! prefix.

mod kmeans;
mod usage;

pub use kmeans::kmeans_plus_plus;
pub use usage::{usage_stats, LayerUsage, UsageStats};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Laplace smoothing floor for EMA normalisation.
pub const EMA_EPSILON: f32 = 1e-5;

/// Squared Euclidean distance, accumulated left to right in `f32`.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Nearest codeword in a flat `m x d` codebook. Ties go to the lowest index.
/// Returns the index and the number of distance evaluations (always `m`).
pub fn quantize_flat<'a>(z: &[f32], codebook: &'a [f32], dim: usize) -> Result<(usize, &'a [f32], u64)> {
    if dim == 0 || codebook.is_empty() || codebook.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "codebook of {} values is not a non-empty table of {dim}-vectors",
            codebook.len()
        )));
    }
    if z.len() != dim {
        return Err(Error::shape("quantize_flat", format!("vector of {} values, codeword dim {dim}", z.len())));
    }
    let (best, evals) = nearest(z, codebook, dim);
    Ok((best, &codebook[best * dim..(best + 1) * dim], evals))
}

#[inline]
fn nearest(z: &[f32], codebook: &[f32], dim: usize) -> (usize, u64) {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    let mut evals = 0u64;
    for (j, e) in codebook.chunks_exact(dim).enumerate() {
        let d = sq_dist(z, e);
        evals += 1;
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, evals)
}

/// Sequence of per-layer codeword indices chosen for one latent vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodePath {
    indices: Vec<u32>,
}

impl CodePath {
    pub fn new(indices: Vec<u32>, m: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("code path must have at least one layer".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k as usize >= m) {
            return Err(Error::InvalidArgument(format!("code index {bad} outside [0, {m})")));
        }
        Ok(CodePath { indices })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn layers(&self) -> usize {
        self.indices.len()
    }

    /// `sum_i indices[i] * m^(n-1-i)`, a bijection onto `[0, m^n)`.
    pub fn composite(&self, m: usize) -> u64 {
        self.indices.iter().fold(0u64, |acc, &k| acc * m as u64 + k as u64)
    }

    /// Row of the layer-`layer` (1-based) table selected by this path,
    /// i.e. the composite index of the length-`layer` prefix.
    pub fn row(&self, layer: usize, m: usize) -> u64 {
        self.indices[..layer].iter().fold(0u64, |acc, &k| acc * m as u64 + k as u64)
    }

    pub fn from_composite(mut value: u64, n: usize, m: usize) -> Result<Self> {
        let total = (m as u64).checked_pow(n as u32).ok_or_else(|| Error::InvalidArgument("m^n overflows".into()))?;
        if value >= total {
            return Err(Error::InvalidArgument(format!("composite index {value} outside [0, {total})")));
        }
        let mut indices = vec![0u32; n];
        for slot in indices.iter_mut().rev() {
            *slot = (value % m as u64) as u32;
            value /= m as u64;
        }
        Ok(CodePath { indices })
    }
}

/// The discrete latent of one image: a `height x width` grid of code paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    height: usize,
    width: usize,
    layers: usize,
    size: usize,
    /// `height * width * layers` indices, raster order, path-contiguous.
    paths: Vec<u32>,
}

impl IndexMap {
    pub fn new(height: usize, width: usize, layers: usize, size: usize, paths: Vec<u32>) -> Result<Self> {
        if paths.len() != height * width * layers {
            return Err(Error::shape(
                "index_map",
                format!("{} indices for {height}x{width} grid of {layers}-layer paths", paths.len()),
            ));
        }
        if let Some(&bad) = paths.iter().find(|&&k| k as usize >= size) {
            return Err(Error::InvalidArgument(format!("code index {bad} outside [0, {size})")));
        }
        Ok(IndexMap { height, width, layers, size, paths })
    }

    /// Builds a map from composite indices (raster order).
    pub fn from_composites(height: usize, width: usize, layers: usize, size: usize, composites: &[u32]) -> Result<Self> {
        let mut paths = Vec::with_capacity(composites.len() * layers);
        for &c in composites {
            paths.extend(CodePath::from_composite(c as u64, layers, size)?.indices);
        }
        Self::new(height, width, layers, size, paths)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of grid locations.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path_slice(&self, loc: usize) -> &[u32] {
        &self.paths[loc * self.layers..(loc + 1) * self.layers]
    }

    pub fn path(&self, h: usize, w: usize) -> CodePath {
        CodePath {
            indices: self.path_slice(h * self.width + w).to_vec(),
        }
    }

    pub fn raw(&self) -> &[u32] {
        &self.paths
    }

    /// Composite index of every location, raster order.
    pub fn composites(&self) -> Vec<u32> {
        (0..self.len())
            .map(|loc| {
                self.path_slice(loc)
                    .iter()
                    .fold(0u64, |acc, &k| acc * self.size as u64 + k as u64) as u32
            })
            .collect()
    }

    /// Table rows selected at `layer` (1-based), raster order.
    pub fn rows(&self, layer: usize) -> Vec<u32> {
        (0..self.len())
            .map(|loc| {
                self.path_slice(loc)[..layer]
                    .iter()
                    .fold(0u32, |acc, &k| acc * self.size as u32 + k)
            })
            .collect()
    }
}

/// Result of quantizing one vector through the hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct HierQuantized {
    pub path: CodePath,
    /// `n x d`: the codeword chosen at each layer.
    pub codewords: Vec<f32>,
    /// `n x d`: the residual each layer quantized (`xi^0 .. xi^{n-1}`).
    pub inputs: Vec<f32>,
    /// The residual left after the last layer.
    pub residual: Vec<f32>,
    pub distance_evals: u64,
}

/// Quantization of a whole `[B, d, H, W]` latent batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GridQuantization {
    pub maps: Vec<IndexMap>,
    /// Per layer, the table row selected at every location (batch-major raster order).
    pub rows: Vec<Vec<u32>>,
    /// Per layer, the residual quantized at every location (`N x d`).
    pub inputs: Vec<Vec<f32>>,
    pub distance_evals: u64,
}

/// Hierarchical residual codebook with EMA bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct HierCodebook {
    layers: usize,
    size: usize,
    dim: usize,
    tables: Vec<Tensor>,
    ema_counts: Vec<Vec<f32>>,
    ema_sums: Vec<Vec<f32>>,
}

fn layer_rows(m: usize, layer: usize) -> usize {
    m.pow(layer as u32)
}

impl HierCodebook {
    /// Builds a codebook from per-layer tables (`tables[i]` has `m^(i+1) * d`
    /// values). EMA counts start at 1 with sums equal to the codewords.
    pub fn from_tables(layers: usize, size: usize, dim: usize, tables: Vec<Vec<f32>>) -> Result<Self> {
        if layers == 0 || size == 0 || dim == 0 {
            return Err(Error::MalformedCodebook(format!("n={layers}, m={size}, d={dim} must all be positive")));
        }
        if (size as u64).checked_pow(layers as u32).is_none_or(|v| v > u32::MAX as u64) {
            return Err(Error::MalformedCodebook(format!("{size}^{layers} paths do not fit in 32 bits")));
        }
        if tables.len() != layers {
            return Err(Error::MalformedCodebook(format!("{} tables for {layers} layers", tables.len())));
        }
        let mut out = Vec::with_capacity(layers);
        for (i, t) in tables.into_iter().enumerate() {
            let rows = layer_rows(size, i + 1);
            if t.len() != rows * dim {
                return Err(Error::MalformedCodebook(format!(
                    "layer {} holds {} values, expected {} codebooks x {size} codewords x {dim}",
                    i + 1,
                    t.len(),
                    layer_rows(size, i)
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::MalformedCodebook(format!("layer {} has non-finite codewords", i + 1)));
            }
            out.push(Tensor::new([rows, dim], t)?);
        }
        let ema_counts = out.iter().map(|t| vec![1.0; t.shape()[0]]).collect();
        let ema_sums = out.iter().map(|t| t.data().to_vec()).collect();
        Ok(HierCodebook { layers, size, dim, tables: out, ema_counts, ema_sums })
    }

    /// Standard-normal codewords everywhere.
    pub fn random<R: Rng>(layers: usize, size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let tables = (1..=layers)
            .map(|i| {
                (0..layer_rows(size, i) * dim)
                    .map(|_| rng.sample::<f32, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self::from_tables(layers, size, dim, tables)
    }

    /// Root codebook seeded by k-means++ over `samples` (`N x d`); deeper
    /// codebooks drawn from `N(0, (0.01 * root_rms)^2)`.
    pub fn init_from_samples<R: Rng>(layers: usize, size: usize, dim: usize, samples: &[f32], rng: &mut R) -> Result<Self> {
        if samples.is_empty() || samples.len() % dim != 0 {
            return Err(Error::InvalidArgument("codebook initialisation needs whole d-vectors".into()));
        }
        let root = kmeans_plus_plus(samples, dim, size, rng);
        let rms = (root.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / root.len() as f64).sqrt();
        let sigma = (0.01 * rms).max(1e-6) as f32;
        let mut tables = vec![root];
        for i in 2..=layers {
            tables.push(
                (0..layer_rows(size, i) * dim)
                    .map(|_| sigma * rng.sample::<f32, _>(StandardNormal))
                    .collect(),
            );
        }
        Self::from_tables(layers, size, dim, tables)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of distinct code paths, `m^n`.
    pub fn num_paths(&self) -> u64 {
        (self.size as u64).pow(self.layers as u32)
    }

    /// `[m^layer, d]` table of layer `layer` (1-based).
    pub fn table(&self, layer: usize) -> &Tensor {
        &self.tables[layer - 1]
    }

    pub fn tables(&self) -> &[Tensor] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Tensor] {
        &mut self.tables
    }

    pub fn ema_counts(&self) -> &[Vec<f32>] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[Vec<f32>] {
        &self.ema_sums
    }

    /// Restores EMA state, e.g. from a checkpoint.
    pub fn set_ema_state(&mut self, counts: Vec<Vec<f32>>, sums: Vec<Vec<f32>>) -> Result<()> {
        let ok = counts.len() == self.layers
            && sums.len() == self.layers
            && counts.iter().zip(&self.tables).all(|(c, t)| c.len() == t.shape()[0])
            && sums.iter().zip(&self.tables).all(|(s, t)| s.len() == t.numel());
        if !ok {
            return Err(Error::MalformedCodebook("EMA state does not match table sizes".into()));
        }
        self.ema_counts = counts;
        self.ema_sums = sums;
        Ok(())
    }

    /// Codebook consulted at `layer` (1-based) below parent prefix `parent`.
    pub fn codebook(&self, layer: usize, parent: usize) -> &[f32] {
        let span = self.size * self.dim;
        &self.tables[layer - 1].data()[parent * span..(parent + 1) * span]
    }

    /// Greedy layer-wise quantization of one latent vector.
    pub fn quantize(&self, xi0: &[f32]) -> Result<HierQuantized> {
        if xi0.len() != self.dim {
            return Err(Error::shape("quantize_hier", format!("vector of {} values, codeword dim {}", xi0.len(), self.dim)));
        }
        let (n, d) = (self.layers, self.dim);
        let mut residual = xi0.to_vec();
        let mut indices = Vec::with_capacity(n);
        let mut codewords = Vec::with_capacity(n * d);
        let mut inputs = Vec::with_capacity(n * d);
        let mut parent = 0usize;
        let mut evals = 0u64;
        for layer in 1..=n {
            let book = self.codebook(layer, parent);
            let (k, e) = nearest(&residual, book, d);
            evals += e;
            let cw = &book[k * d..(k + 1) * d];
            inputs.extend_from_slice(&residual);
            codewords.extend_from_slice(cw);
            for (r, c) in residual.iter_mut().zip(cw) {
                *r -= c;
            }
            indices.push(k as u32);
            parent = parent * self.size + k;
        }
        Ok(HierQuantized {
            path: CodePath { indices },
            codewords,
            inputs,
            residual,
            distance_evals: evals,
        })
    }

    /// Quantizes every location of a `[B, d, H, W]` latent batch through the hierarchy.
    pub fn quantize_grid(&self, latents: &Tensor) -> Result<GridQuantization> {
        self.quantize_grid_with(latents, false)
    }

    /// Flat nearest-codeword search against the root codebook only
    /// (the single-codebook baseline). Requires `n == 1`.
    pub fn quantize_grid_flat(&self, latents: &Tensor) -> Result<GridQuantization> {
        if self.layers != 1 {
            return Err(Error::InvalidArgument(format!("flat quantization needs a 1-layer codebook, got {}", self.layers)));
        }
        self.quantize_grid_with(latents, true)
    }

    fn quantize_grid_with(&self, latents: &Tensor, flat: bool) -> Result<GridQuantization> {
        let [b, d, h, w] = latents.dims4("quantize_grid")?;
        if d != self.dim {
            return Err(Error::shape("quantize_grid", format!("latent channel axis is {d}, codeword dim {}", self.dim)));
        }
        let hw = h * w;
        let n = self.layers;
        let per_image = exec::map_indexed(b, |bi| {
            let img = &latents.data()[bi * d * hw..(bi + 1) * d * hw];
            let mut paths = Vec::with_capacity(hw * n);
            let mut inputs = vec![Vec::with_capacity(hw * d); n];
            let mut evals = 0u64;
            let mut z = vec![0.0f32; d];
            for s in 0..hw {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = img[j * hw + s];
                }
                if flat {
                    let (k, _, e) = quantize_flat(&z, self.tables[0].data(), d).expect("validated shapes");
                    paths.push(k as u32);
                    inputs[0].extend_from_slice(&z);
                    evals += e;
                } else {
                    let q = self.quantize(&z).expect("validated shapes");
                    paths.extend_from_slice(q.path.indices());
                    for (i, inp) in inputs.iter_mut().enumerate() {
                        inp.extend_from_slice(&q.inputs[i * d..(i + 1) * d]);
                    }
                    evals += q.distance_evals;
                }
            }
            (paths, inputs, evals)
        });
        let mut maps = Vec::with_capacity(b);
        let mut inputs: Vec<Vec<f32>> = vec![Vec::with_capacity(b * hw * d); n];
        let mut evals = 0u64;
        for (paths, inp, e) in per_image {
            maps.push(IndexMap { height: h, width: w, layers: n, size: self.size, paths });
            for (acc, part) in inputs.iter_mut().zip(inp) {
                acc.extend(part);
            }
            evals += e;
        }
        let rows = (1..=n)
            .map(|layer| maps.iter().flat_map(|m| m.rows(layer)).collect())
            .collect();
        Ok(GridQuantization { maps, rows, inputs, distance_evals: evals })
    }

    /// Per-layer codeword grids `[B, d, H, W]` for a batch of index maps.
    pub fn lookup(&self, maps: &[IndexMap]) -> Result<Vec<Tensor>> {
        let first = maps.first().ok_or_else(|| Error::InvalidArgument("lookup needs at least one index map".into()))?;
        let (h, w) = (first.height, first.width);
        for m in maps {
            if m.layers != self.layers || m.size != self.size || m.height != h || m.width != w {
                return Err(Error::InvalidArgument("index map does not match codebook shape".into()));
            }
        }
        let (d, hw) = (self.dim, h * w);
        (1..=self.layers)
            .map(|layer| {
                let table = self.tables[layer - 1].data();
                let mut data = vec![0.0f32; maps.len() * d * hw];
                for (bi, m) in maps.iter().enumerate() {
                    for (s, row) in m.rows(layer).into_iter().enumerate() {
                        let cw = &table[row as usize * d..(row as usize + 1) * d];
                        for (j, &v) in cw.iter().enumerate() {
                            data[(bi * d + j) * hw + s] = v;
                        }
                    }
                }
                Tensor::new([maps.len(), d, h, w], data)
            })
            .collect()
    }

    /// Exponential-moving-average codebook refit.
    ///
    /// `rows[i]` lists the layer-`i+1` table row chosen at each location and
    /// `inputs[i]` the residual (`N x d`) it quantized. Every row is decayed;
    /// selected rows also absorb their assigned inputs.
    pub fn ema_update(&mut self, rows: &[Vec<u32>], inputs: &[Vec<f32>], decay: f32) -> Result<()> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("EMA decay {decay} outside (0, 1)")));
        }
        if rows.len() != self.layers || inputs.len() != self.layers {
            return Err(Error::InvalidArgument(format!(
                "EMA update for {} layers received {} row lists and {} input lists",
                self.layers,
                rows.len(),
                inputs.len()
            )));
        }
        let d = self.dim;
        for layer in 0..self.layers {
            let (r, x) = (&rows[layer], &inputs[layer]);
            if x.len() != r.len() * d {
                return Err(Error::shape("ema_update", format!("{} rows but {} input values", r.len(), x.len())));
            }
            let nrows = self.ema_counts[layer].len();
            let mut hits = vec![0.0f64; nrows];
            let mut sums = vec![0.0f64; nrows * d];
            for (loc, &row) in r.iter().enumerate() {
                let row = row as usize;
                if row >= nrows {
                    return Err(Error::InvalidArgument(format!("row {row} outside layer {} table", layer + 1)));
                }
                hits[row] += 1.0;
                for j in 0..d {
                    sums[row * d + j] += x[loc * d + j] as f64;
                }
            }
            let keep = decay as f64;
            let counts = &mut self.ema_counts[layer];
            let ema_sums = &mut self.ema_sums[layer];
            let table = self.tables[layer].data_mut();
            for row in 0..nrows {
                let c = keep * counts[row] as f64 + (1.0 - keep) * hits[row];
                counts[row] = c as f32;
                let denom = (c as f32).max(EMA_EPSILON) as f64;
                for j in 0..d {
                    let i = row * d + j;
                    let s = keep * ema_sums[i] as f64 + (1.0 - keep) * sums[i];
                    ema_sums[i] = s as f32;
                    table[i] = (s / denom) as f32;
                }
            }
        }
        Ok(())
    }

    /// Overwrites root codeword `row` with `value`, resetting its EMA state.
    pub fn reset_root_codeword(&mut self, row: usize, value: &[f32]) {
        let d = self.dim;
        self.tables[0].data_mut()[row * d..(row + 1) * d].copy_from_slice(value);
        self.ema_sums[0][row * d..(row + 1) * d].copy_from_slice(value);
        self.ema_counts[0][row] = 1.0;
    }
}

/// `e_C = sum_i e^i` over per-layer codeword grids. `expected_layers` guards
/// against a missing layer.
pub fn combine(layers: &[Tensor], expected_layers: usize) -> Result<Tensor> {
    if layers.len() != expected_layers || layers.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "combine needs all {expected_layers} layers, got {}",
            layers.len()
        )));
    }
    partial_combine(layers, 1)
}

/// Sum of layers `from_layer..=n` (1-based). `from_layer == 1` is [`combine`].
pub fn partial_combine(layers: &[Tensor], from_layer: usize) -> Result<Tensor> {
    let n = layers.len();
    if from_layer < 1 || from_layer > n {
        return Err(Error::InvalidArgument(format!("from_layer {from_layer} outside 1..={n}")));
    }
    let mut acc = layers[from_layer - 1].clone();
    for t in &layers[from_layer..] {
        if t.shape() != acc.shape() {
            return Err(Error::shape("combine", format!("{:?} vs {:?}", t.shape(), acc.shape())));
        }
        for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    Ok(acc)
}
