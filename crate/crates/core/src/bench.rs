//! Experiment drivers: depth ablation, codebook-collapse study and decode
//! timing, with CSV output.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec;
use crate::io::{write_atomic, Dataset};
use crate::model::{evaluate, HrvqModel, TrainConfig, Trainer};
use crate::tensor::Tensor;

/// Mean squared difference over every value of two equally shaped batches.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::InvalidArgument("mse of empty batches".into()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// Fixed-header table rendered as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Column `name` of every row.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

/// Training data shared by the experiments.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub train: &'a Dataset,
    pub heldout: &'a Dataset,
}

/// A trained configuration and its held-out evaluation.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub label: String,
    pub layers: usize,
    pub size: usize,
    pub heldout_mse: f64,
    /// Perplexity per layer on the held-out set.
    pub perplexity: Vec<f64>,
    /// Used fraction per layer on the held-out set.
    pub used_fraction: Vec<f64>,
    pub epochs: usize,
    pub wall_ms: f64,
    pub model: HrvqModel,
}

/// Trains `config` on `data.train` and evaluates on `data.heldout`.
pub fn train_and_evaluate(label: &str, config: TrainConfig, data: Split<'_>) -> Result<RunResult> {
    let t0 = Instant::now();
    let mut t = Trainer::new(config)?;
    t.fit(data.train, data.heldout, |_, _| Ok(()))?;
    let report = evaluate(&t.model, data.heldout, t.config.batch_size)?;
    Ok(RunResult {
        label: label.to_string(),
        layers: t.config.model.layers,
        size: t.config.model.size,
        heldout_mse: report.mse,
        perplexity: report.usage.layers.iter().map(|l| l.perplexity).collect(),
        used_fraction: report.usage.layers.iter().map(|l| l.used_fraction).collect(),
        epochs: t.config.epochs,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        model: t.model,
    })
}

/// Integer `n`-th root of `leaf`, if exact.
pub fn exact_root(leaf: usize, n: usize) -> Option<usize> {
    if n == 0 {
        return None;
    }
    let guess = (leaf as f64).powf(1.0 / n as f64).round() as usize;
    (guess.saturating_sub(1)..=guess + 1).find(|&m| m >= 2 && m.checked_pow(n as u32) == Some(leaf))
}

/// Depth ablation at a fixed final-layer resolution.
#[derive(Clone, Debug)]
pub struct DepthReport {
    pub runs: Vec<RunResult>,
    /// Held-out MSE never increases with depth.
    pub non_increasing: bool,
}

impl DepthReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["layers", "codebook_size", "leaf_codewords", "heldout_mse", "final_perplexity", "wall_ms"]);
        for r in &self.runs {
            t.push(vec![
                r.layers.to_string(),
                r.size.to_string(),
                r.size.pow(r.layers as u32).to_string(),
                format!("{:.6}", r.heldout_mse),
                format!("{:.3}", r.perplexity.last().copied().unwrap_or(0.0)),
                format!("{:.0}", r.wall_ms),
            ]);
        }
        t
    }
}

/// Trains one model per depth in `layer_counts`, each with `m = leaf^(1/n)`
/// codewords per codebook, under an identical budget. Depth 1 is the flat
/// single-codebook baseline.
pub fn depth_ablation(data: Split<'_>, base: &TrainConfig, layer_counts: &[usize], leaf: usize) -> Result<DepthReport> {
    let mut configs = Vec::with_capacity(layer_counts.len());
    for &n in layer_counts {
        let m = exact_root(leaf, n).ok_or_else(|| {
            Error::Config(format!("{leaf} leaf codewords cannot be split evenly over {n} layers"))
        })?;
        configs.push(if n == 1 { base.clone().flat(leaf) } else { base.clone().hierarchy(n, m) });
    }
    let runs = configs
        .into_iter()
        .map(|c| train_and_evaluate(&format!("n{}", c.model.layers), c, data))
        .collect::<Result<Vec<_>>>()?;
    let non_increasing = runs.windows(2).all(|w| w[1].heldout_mse <= w[0].heldout_mse);
    Ok(DepthReport { runs, non_increasing })
}

/// Flat versus hierarchical models at matched codeword budgets.
#[derive(Clone, Debug)]
pub struct CollapseReport {
    pub budgets: Vec<usize>,
    pub flat: Vec<RunResult>,
    pub hierarchical: Vec<RunResult>,
    /// Hierarchical held-out MSE never increases with the budget.
    pub hier_non_increasing: bool,
    /// Flat held-out MSE rises at some budget step.
    pub flat_worsens: bool,
}

impl CollapseReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "budget",
            "model",
            "layers",
            "codebook_size",
            "heldout_mse",
            "layer1_perplexity",
            "final_used_fraction",
            "wall_ms",
        ]);
        for (i, &b) in self.budgets.iter().enumerate() {
            for (kind, r) in [("flat", &self.flat[i]), ("hierarchical", &self.hierarchical[i])] {
                t.push(vec![
                    b.to_string(),
                    kind.into(),
                    r.layers.to_string(),
                    r.size.to_string(),
                    format!("{:.6}", r.heldout_mse),
                    format!("{:.3}", r.perplexity[0]),
                    format!("{:.4}", r.used_fraction.last().copied().unwrap_or(0.0)),
                    format!("{:.0}", r.wall_ms),
                ]);
            }
        }
        t
    }
}

/// For each budget `M`, trains a flat codebook of `M` codewords and an
/// `n`-layer hierarchy with `m^n = M`.
pub fn collapse_study(data: Split<'_>, base: &TrainConfig, budgets: &[usize], layers: usize) -> Result<CollapseReport> {
    let mut flat = Vec::with_capacity(budgets.len());
    let mut hierarchical = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let m = exact_root(b, layers)
            .ok_or_else(|| Error::Config(format!("budget {b} is not a {layers}-th power")))?;
        flat.push(train_and_evaluate(&format!("flat{b}"), base.clone().flat(b), data)?);
        hierarchical.push(train_and_evaluate(&format!("hier{b}"), base.clone().hierarchy(layers, m), data)?);
    }
    let hier_non_increasing = hierarchical.windows(2).all(|w| w[1].heldout_mse <= w[0].heldout_mse);
    let flat_worsens = flat.windows(2).any(|w| w[1].heldout_mse > w[0].heldout_mse);
    Ok(CollapseReport { budgets: budgets.to_vec(), flat, hierarchical, hier_non_increasing, flat_worsens })
}

/// Timing of one model in [`decode_timing`].
#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub label: String,
    pub layers: usize,
    pub size: usize,
    pub samples: usize,
    /// Exact count of codeword distance evaluations.
    pub distance_evals: u64,
    pub evals_per_location: f64,
    pub encode_ms: f64,
    pub search_ms: f64,
    pub decode_ms: f64,
}

impl TimingRow {
    pub fn total_ms(&self) -> f64 {
        self.encode_ms + self.search_ms + self.decode_ms
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    /// Columns other than the `*_ms` ones are deterministic.
    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "model",
            "layers",
            "codebook_size",
            "samples",
            "distance_evals",
            "evals_per_location",
            "encode_ms",
            "search_ms",
            "decode_ms",
            "total_ms",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.label.clone(),
                r.layers.to_string(),
                r.size.to_string(),
                r.samples.to_string(),
                r.distance_evals.to_string(),
                format!("{}", r.evals_per_location),
                format!("{:.1}", r.encode_ms),
                format!("{:.1}", r.search_ms),
                format!("{:.1}", r.decode_ms),
                format!("{:.1}", r.total_ms()),
            ]);
        }
        t
    }

    /// `distance_evals(a) / distance_evals(b)`.
    pub fn counter_ratio(&self, a: usize, b: usize) -> Option<f64> {
        let (x, y) = (self.rows.get(a)?, self.rows.get(b)?);
        (y.distance_evals > 0).then(|| x.distance_evals as f64 / y.distance_evals as f64)
    }
}

/// Reconstructs the first `sample_count` images of `images` with each
/// model, timing encoder, code search and decoder separately. Code search
/// runs single-threaded unless `parallel_search` is set.
pub fn decode_timing(
    models: &[(&str, &HrvqModel)],
    images: &Tensor,
    sample_count: usize,
    batch_size: usize,
    parallel_search: bool,
) -> Result<TimingReport> {
    if sample_count == 0 {
        return Ok(TimingReport::default());
    }
    let available = images.dims4("decode_timing")?[0];
    if sample_count > available {
        return Err(Error::InvalidArgument(format!("{sample_count} samples requested, {available} images given")));
    }
    let was_parallel = exec::is_parallel();
    let mut rows = Vec::with_capacity(models.len());
    for &(label, model) in models {
        let mut row = TimingRow {
            label: label.to_string(),
            layers: model.config().layers,
            size: model.config().size,
            samples: sample_count,
            distance_evals: 0,
            evals_per_location: 0.0,
            encode_ms: 0.0,
            search_ms: 0.0,
            decode_ms: 0.0,
        };
        // One untimed batch so allocation and cache warm-up stay out of the figures.
        let warm = images.slice_batch(0, batch_size.max(1).min(sample_count))?;
        model.decode_codes(&model.quantize(&model.encode(&warm)?)?.maps, 1)?;
        let mut locations = 0u64;
        for start in (0..sample_count).step_by(batch_size.max(1)) {
            let len = batch_size.max(1).min(sample_count - start);
            let batch = images.slice_batch(start, len)?;
            let t0 = Instant::now();
            let latent = model.encode(&batch)?;
            row.encode_ms += t0.elapsed().as_secs_f64() * 1e3;

            exec::set_parallel(parallel_search && was_parallel);
            let t0 = Instant::now();
            let q = model.quantize(&latent);
            row.search_ms += t0.elapsed().as_secs_f64() * 1e3;
            exec::set_parallel(was_parallel);
            let q = q?;
            row.distance_evals += q.distance_evals;
            locations += q.maps.iter().map(|m| m.len() as u64).sum::<u64>();

            let t0 = Instant::now();
            model.decode_codes(&q.maps, 1)?;
            row.decode_ms += t0.elapsed().as_secs_f64() * 1e3;
        }
        row.evals_per_location = row.distance_evals as f64 / locations.max(1) as f64;
        rows.push(row);
    }
    Ok(TimingReport { rows })
}
