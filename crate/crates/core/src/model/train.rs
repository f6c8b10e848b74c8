use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::{HrvqModel, LossBreakdown, LossWeights, ModelConfig, Quantizer};
use crate::codebook::{usage_stats, IndexMap, UsageStats};
use crate::error::{Error, Result};
use crate::io::{ConfigFile, Dataset};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};
use crate::{seeded_rng, Rng};

/// How codewords learn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    /// Per-layer exponential moving averages of assigned residuals.
    Ema,
    /// Adam on the codebook terms of the loss.
    Gradient,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub ema_decay: f32,
    pub beta0: f32,
    pub betas: Vec<f32>,
    /// Include the combined-representation terms in the loss.
    pub combined_terms: bool,
    pub update: UpdateMode,
    pub seed: u64,
    /// Fraction of the training images held out for evaluation.
    pub holdout: f64,
    /// Train on at most this many images.
    pub train_limit: Option<usize>,
    /// Evaluate on at most this many held-out images.
    pub eval_limit: Option<usize>,
    /// Re-seed root codewords unused for this many steps (flat quantizer only).
    pub dead_restart: Option<u64>,
}

impl TrainConfig {
    pub fn mnist() -> Self {
        let model = ModelConfig::mnist();
        TrainConfig {
            betas: vec![0.25; model.layers],
            model,
            dataset: "mnist".into(),
            batch_size: 128,
            epochs: 20,
            lr: 3e-3,
            ema_decay: 0.9,
            beta0: 0.25,
            combined_terms: true,
            update: UpdateMode::Ema,
            seed: 0,
            holdout: 0.1,
            train_limit: None,
            eval_limit: None,
            dead_restart: None,
        }
    }

    /// Single flat codebook of `codewords` entries, same pipeline otherwise.
    pub fn flat(mut self, codewords: usize) -> Self {
        self.model.layers = 1;
        self.model.size = codewords;
        self.model.quantizer = Quantizer::Flat;
        self.betas = vec![self.betas.first().copied().unwrap_or(0.25)];
        self.combined_terms = false;
        self
    }

    /// `n` layers of `m` codewords with uniform commitment weights.
    pub fn hierarchy(mut self, layers: usize, size: usize) -> Self {
        let beta = self.betas.first().copied().unwrap_or(0.25);
        self.model.layers = layers;
        self.model.size = size;
        self.model.quantizer = Quantizer::Hierarchical;
        self.betas = vec![beta; layers];
        self
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { beta0: self.beta0, betas: self.betas.clone(), combined: self.combined_terms }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("EMA decay {} outside (0, 1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", self.holdout)));
        }
        if self.dead_restart.is_some() && self.model.quantizer != Quantizer::Flat {
            return Err(Error::Config("dead-codeword restarts apply to the flat quantizer only".into()));
        }
        if self.dead_restart == Some(0) {
            return Err(Error::Config("dead_restart_steps must be positive".into()));
        }
        self.weights().check(self.model.layers)
    }

    /// Applies `key = value` overrides, consuming the keys it knows.
    pub fn apply(&mut self, cfg: &mut ConfigFile) -> Result<()> {
        if let Some(ds) = cfg.take::<String>("dataset")? {
            let base = match ds.as_str() {
                "mnist" => ModelConfig::mnist(),
                "cifar10" => ModelConfig::cifar10(),
                _ => self.model.clone(),
            };
            self.model = base;
            self.dataset = ds;
        }
        let m = &mut self.model;
        cfg.take_into("channels", &mut m.channels)?;
        cfg.take_into("height", &mut m.height)?;
        cfg.take_into("width", &mut m.width)?;
        cfg.take_into("hidden", &mut m.hidden)?;
        cfg.take_into("residual_hidden", &mut m.residual_hidden)?;
        cfg.take_into("residual_blocks", &mut m.residual_blocks)?;
        cfg.take_into("layers", &mut m.layers)?;
        cfg.take_into("codebook_size", &mut m.size)?;
        cfg.take_into("dim", &mut m.dim)?;
        cfg.take_into("latent", &mut m.latent)?;
        if let Some(q) = cfg.take::<String>("quantizer")? {
            m.quantizer = match q.as_str() {
                "hierarchical" => Quantizer::Hierarchical,
                "flat" => Quantizer::Flat,
                other => return Err(Error::Config(format!("quantizer `{other}` is not hierarchical|flat"))),
            };
        }
        cfg.take_into("batch_size", &mut self.batch_size)?;
        cfg.take_into("epochs", &mut self.epochs)?;
        cfg.take_into("lr", &mut self.lr)?;
        cfg.take_into("ema_decay", &mut self.ema_decay)?;
        cfg.take_into("beta0", &mut self.beta0)?;
        let beta: Option<f32> = cfg.take("beta")?;
        match (cfg.take_list::<f32>("betas")?, beta) {
            (Some(list), _) => self.betas = list,
            (None, Some(b)) => self.betas = vec![b; self.model.layers],
            (None, None) => {
                let b = self.betas.first().copied().unwrap_or(0.25);
                self.betas.resize(self.model.layers, b);
            }
        }
        cfg.take_into("combined_terms", &mut self.combined_terms)?;
        if let Some(u) = cfg.take::<String>("update")? {
            self.update = match u.as_str() {
                "ema" => UpdateMode::Ema,
                "gradient" => UpdateMode::Gradient,
                other => return Err(Error::Config(format!("update `{other}` is not ema|gradient"))),
            };
        }
        cfg.take_into("seed", &mut self.seed)?;
        cfg.take_into("holdout", &mut self.holdout)?;
        if let Some(v) = cfg.take::<usize>("train_limit")? {
            self.train_limit = (v > 0).then_some(v);
        }
        if let Some(v) = cfg.take::<usize>("eval_limit")? {
            self.eval_limit = (v > 0).then_some(v);
        }
        if let Some(v) = cfg.take::<u64>("dead_restart_steps")? {
            self.dead_restart = (v > 0).then_some(v);
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::parse(text)?;
        let mut c = TrainConfig::mnist();
        c.apply(&mut cfg)?;
        cfg.finish()?;
        c.validate()?;
        Ok(c)
    }

    /// Canonical `key = value` rendering; [`from_text`](Self::from_text) inverts it.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut c = ConfigFile::default();
        c.set("dataset", &self.dataset);
        c.set("channels", m.channels);
        c.set("height", m.height);
        c.set("width", m.width);
        c.set("hidden", m.hidden);
        c.set("residual_hidden", m.residual_hidden);
        c.set("residual_blocks", m.residual_blocks);
        c.set("layers", m.layers);
        c.set("codebook_size", m.size);
        c.set("dim", m.dim);
        c.set("latent", m.latent);
        c.set("quantizer", if m.quantizer == Quantizer::Flat { "flat" } else { "hierarchical" });
        c.set("batch_size", self.batch_size);
        c.set("epochs", self.epochs);
        c.set("lr", self.lr);
        c.set("ema_decay", self.ema_decay);
        c.set("beta0", self.beta0);
        c.set("betas", self.betas.iter().map(f32::to_string).collect::<Vec<_>>().join(", "));
        c.set("combined_terms", self.combined_terms);
        c.set("update", if self.update == UpdateMode::Ema { "ema" } else { "gradient" });
        c.set("seed", self.seed);
        c.set("holdout", self.holdout);
        c.set("train_limit", self.train_limit.unwrap_or(0));
        c.set("eval_limit", self.eval_limit.unwrap_or(0));
        c.set("dead_restart_steps", self.dead_restart.unwrap_or(0));
        c.to_text()
    }

    /// Training and held-out sets from `data`: the tail `holdout` fraction
    /// is held out, then `train_limit` and `eval_limit` truncate each part.
    pub fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        let (train, held) = data.split_holdout(self.holdout)?;
        let train = match self.train_limit {
            Some(k) if k < train.len() => train.take(k)?,
            _ => train,
        };
        let held = match self.eval_limit {
            Some(k) if k < held.len() => held.take(k)?,
            _ => held,
        };
        Ok((train, held))
    }
}

/// Held-out evaluation of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean squared error of clamped reconstructions over all pixels.
    pub mse: f64,
    pub usage: UsageStats,
    pub distance_evals: u64,
    pub images: usize,
}

/// Reconstructs `data` in batches and measures error and codeword usage.
pub fn evaluate(model: &HrvqModel, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut sq = 0.0f64;
    let mut count = 0usize;
    let mut maps: Vec<IndexMap> = Vec::with_capacity(data.len());
    let mut evals = 0u64;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let len = batch_size.min(data.len() - start);
        let images = data.images.slice_batch(start, len)?;
        let q = model.quantize(&model.encode(&images)?)?;
        evals += q.distance_evals;
        let recon = model.decode_codes(&q.maps, 1)?;
        for (a, b) in recon.data().iter().zip(images.data()) {
            let d = (a - b) as f64;
            sq += d * d;
        }
        count += images.numel();
        maps.extend(q.maps);
    }
    Ok(EvalReport { mse: sq / count as f64, usage: usage_stats(&maps)?, distance_evals: evals, images: data.len() })
}

/// One finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean of each loss term over the epoch's batches.
    pub train_loss: LossBreakdown,
    pub heldout: EvalReport,
    pub wall_ms: f64,
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Set when this step completed an epoch: the epoch's mean loss and time.
    pub finished_epoch: Option<(usize, LossBreakdown, f64)>,
}

/// Optimizer state plus position in the data stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: HrvqModel,
    pub config: TrainConfig,
    pub(crate) adam: AdamState,
    pub(crate) table_adam: Option<AdamState>,
    pub(crate) step: u64,
    pub(crate) epoch: usize,
    pub(crate) cursor: usize,
    pub(crate) codebook_ready: bool,
    pub(crate) rng: Rng,
    pub(crate) last_used: Vec<u64>,
    /// Running sums of the loss terms over the current epoch, in
    /// [`LossBreakdown`] field order.
    pub(crate) epoch_sums: Vec<f64>,
    pub(crate) epoch_batches: u64,
    pub(crate) epoch_wall_ms: f64,
    order_cache: Option<(usize, usize, Vec<usize>)>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic shuffle of `0..n` for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(mix(seed, 1 + epoch as u64)));
    idx
}

fn terms(loss: &LossBreakdown) -> Vec<f64> {
    let mut v = vec![loss.reconstruction as f64, loss.combined_codebook as f64, loss.combined_commitment as f64];
    v.extend(loss.layer_codebook.iter().map(|&x| x as f64));
    v.extend(loss.layer_commitment.iter().map(|&x| x as f64));
    v.push(loss.total as f64);
    v
}

fn from_terms(v: &[f64], n: usize, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        reconstruction: v[0] as f32,
        combined_codebook: v[1] as f32,
        combined_commitment: v[2] as f32,
        layer_codebook: v[3..3 + n].iter().map(|&x| x as f32).collect(),
        layer_commitment: v[3 + n..3 + 2 * n].iter().map(|&x| x as f32).collect(),
        total: v[3 + 2 * n] as f32,
        weights,
    }
}

/// `[B, d, h, w]` to row-major `N x d`.
fn to_rows(t: &Tensor) -> Vec<f32> {
    let s = t.shape();
    let (b, d, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(t.numel());
    for bi in 0..b {
        for p in 0..hw {
            out.extend((0..d).map(|j| t.data()[(bi * d + j) * hw + p]));
        }
    }
    out
}

impl Trainer {
    /// Fresh model and optimizer, all randomness derived from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = seeded_rng(mix(config.seed, 0));
        let model = HrvqModel::new(config.model.clone(), &mut init_rng)?;
        Self::with_model(model, config)
    }

    /// Trains an existing model (its codebook is kept as is).
    pub fn with_model(model: HrvqModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config("model architecture differs from the training config".into()));
        }
        let adam_cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
        let adam = AdamState::for_store(adam_cfg, model.params());
        let table_adam =
            (config.update == UpdateMode::Gradient).then(|| AdamState::new(adam_cfg, model.codebook().tables()));
        let n = config.model.layers;
        Ok(Trainer {
            adam,
            table_adam,
            step: 0,
            epoch: 0,
            cursor: 0,
            codebook_ready: false,
            rng: seeded_rng(mix(config.seed, u64::MAX)),
            last_used: vec![0; if config.dead_restart.is_some() { config.model.size } else { 0 }],
            epoch_sums: vec![0.0; 4 + 2 * n],
            epoch_batches: 0,
            epoch_wall_ms: 0.0,
            order_cache: None,
            model,
            config,
        })
    }

    /// Skips data-driven codebook initialisation and trains the current codebook.
    pub fn keep_codebook(mut self) -> Self {
        self.codebook_ready = true;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Batches already consumed in the current epoch.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn batch_indices(&mut self, n: usize) -> Vec<usize> {
        let bs = self.config.batch_size;
        let stale = !matches!(&self.order_cache, Some((e, len, _)) if *e == self.epoch && *len == n);
        if stale {
            self.order_cache = Some((self.epoch, n, epoch_order(self.config.seed, self.epoch, n)));
        }
        let order = &self.order_cache.as_ref().expect("filled above").2;
        let start = self.cursor * bs;
        order[start..(start + bs).min(n)].to_vec()
    }

    /// One optimizer step on the next batch of `train`.
    ///
    /// A non-finite loss returns an error before any state changes.
    pub fn step(&mut self, train: &Dataset) -> Result<StepOutcome> {
        let t0 = Instant::now();
        let n = train.len();
        if n == 0 {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let per_epoch = n.div_ceil(self.config.batch_size);
        let images = train.images.select_batch(&self.batch_indices(n))?;

        let mut model = self.model.clone();
        let mut rng = self.rng.clone();
        if !self.codebook_ready {
            model.init_codebook_from(&images, &mut rng)?;
        }
        let weights = self.config.weights();
        let gradient_tables = self.config.update == UpdateMode::Gradient;
        let mut g = Graph::new();
        let pass = model.build(&mut g, &images, None, &weights, gradient_tables)?;
        let loss = pass.loss.breakdown(&g);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step + 1)));
        }
        let grads = g.backward(pass.loss.total)?;
        let param_grads: Vec<Vec<f32>> = pass
            .params
            .vars()
            .iter()
            .zip(model.params().tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
            .collect();

        let mut adam = self.adam.clone();
        adam.step_store(model.params_mut(), &param_grads)?;
        let mut table_adam = self.table_adam.clone();
        match (&mut table_adam, self.config.update) {
            (Some(ta), UpdateMode::Gradient) => {
                let tg: Vec<Vec<f32>> = pass
                    .tables
                    .iter()
                    .zip(model.codebook().tables())
                    .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
                    .collect();
                let names: Vec<String> = (1..=tg.len()).map(|i| format!("codebook.layer{i}")).collect();
                ta.apply(model.codebook_mut().tables_mut(), &names, &tg)?;
            }
            _ => {
                let rows: Vec<Vec<u32>> = (1..=self.config.model.layers)
                    .map(|layer| pass.maps.iter().flat_map(|m| m.rows(layer)).collect())
                    .collect();
                let inputs: Vec<Vec<f32>> = pass.residuals[..self.config.model.layers]
                    .iter()
                    .map(|&v| to_rows(g.value(v)))
                    .collect();
                model.codebook_mut().ema_update(&rows, &inputs, self.config.ema_decay)?;
            }
        }
        let mut last_used = self.last_used.clone();
        if let Some(limit) = self.config.dead_restart {
            let now = self.step + 1;
            for m in &pass.maps {
                for &r in m.raw() {
                    last_used[r as usize] = now;
                }
            }
            let latent = g.value(pass.latent).clone();
            for row in 0..last_used.len() {
                if now - last_used[row] >= limit {
                    model.restart_codeword(row, &latent, &mut rng)?;
                    last_used[row] = now;
                }
            }
        }

        // Commit.
        self.model = model;
        self.rng = rng;
        self.adam = adam;
        self.table_adam = table_adam;
        self.last_used = last_used;
        self.codebook_ready = true;
        self.step += 1;
        self.cursor += 1;
        for (s, v) in self.epoch_sums.iter_mut().zip(terms(&loss)) {
            *s += v;
        }
        self.epoch_batches += 1;
        self.epoch_wall_ms += t0.elapsed().as_secs_f64() * 1e3;
        let mut finished_epoch = None;
        if self.cursor == per_epoch {
            let k = self.epoch_batches.max(1) as f64;
            let means: Vec<f64> = self.epoch_sums.iter().map(|s| s / k).collect();
            self.epoch += 1;
            finished_epoch = Some((
                self.epoch,
                from_terms(&means, self.config.model.layers, weights),
                self.epoch_wall_ms,
            ));
            self.cursor = 0;
            self.epoch_sums.iter_mut().for_each(|s| *s = 0.0);
            self.epoch_batches = 0;
            self.epoch_wall_ms = 0.0;
        }
        Ok(StepOutcome { loss, finished_epoch })
    }

    /// Trains until `config.epochs` epochs are complete, evaluating on
    /// `heldout` after each one and handing the record to `on_epoch`.
    pub fn fit(
        &mut self,
        train: &Dataset,
        heldout: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while !self.is_done() {
            let out = self.step(train)?;
            if let Some((epoch, train_loss, wall_ms)) = out.finished_epoch {
                let t0 = Instant::now();
                let report = evaluate(&self.model, heldout, self.config.batch_size)?;
                let rec = EpochRecord {
                    epoch,
                    train_loss,
                    heldout: report,
                    wall_ms: wall_ms + t0.elapsed().as_secs_f64() * 1e3,
                };
                on_epoch(self, &rec)?;
                records.push(rec);
            }
        }
        Ok(records)
    }
}

/// Append-only per-epoch CSV:
/// `epoch,total_loss,recon_mse,perplexity_1..perplexity_n,wall_ms`.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    layers: usize,
}

impl MetricsLog {
    pub fn header(layers: usize) -> String {
        let mut h = String::from("epoch,total_loss,recon_mse");
        for i in 1..=layers {
            h.push_str(&format!(",perplexity_{i}"));
        }
        h.push_str(",wall_ms");
        h
    }

    /// Opens `path`, writing the header if the file is new or empty.
    pub fn open(path: &Path, layers: usize) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if fresh {
            let mut f = File::create(path)?;
            writeln!(f, "{}", Self::header(layers))?;
        } else {
            let text = std::fs::read_to_string(path)?;
            if text.lines().next() != Some(Self::header(layers).as_str()) {
                return Err(Error::Config(format!("{} has a different metrics header", path.display())));
            }
        }
        Ok(MetricsLog { path: path.to_path_buf(), layers })
    }

    pub fn row(rec: &EpochRecord) -> String {
        let mut r = format!("{},{},{}", rec.epoch, rec.train_loss.total, rec.heldout.mse);
        for l in &rec.heldout.usage.layers {
            r.push_str(&format!(",{}", l.perplexity));
        }
        r.push_str(&format!(",{:.1}", rec.wall_ms));
        r
    }

    pub fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        debug_assert_eq!(rec.heldout.usage.layers.len(), self.layers);
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{}", Self::row(rec))?;
        Ok(())
    }
}
