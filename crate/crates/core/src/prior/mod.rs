//! Autoregressive prior over composite code paths.
//!
//! A masked-convolution network predicts, at every raster position of an
//! `H x W` index grid, a categorical distribution over the `V = m^n`
//! composite path indices given the positions before it. The first layer's
//! mask excludes the centre tap (type A) and later masks include it
//! (type B), so the logits at position `p` depend only on positions `< p`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::codebook::IndexMap;
use crate::error::{Error, Result};
use crate::io::checkpoint::{Decoder, Encoder};
use crate::io::ConfigFile;
use crate::model::HrvqModel;
use crate::tensor::{softmax_channels, AdamConfig, AdamState, Bound, Conv, ConvKind, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{seeded_rng, Rng};

/// Architecture and training settings of the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    /// `V`, the number of composite path indices.
    pub vocab: usize,
    pub height: usize,
    pub width: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Residual type-B masked layers after the type-A input layer.
    pub blocks: usize,
    /// Odd kernel side of the masked convolutions.
    pub kernel: usize,
    /// Number of class labels for conditioning; 0 disables it.
    pub classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl PriorConfig {
    pub fn new(vocab: usize, height: usize, width: usize) -> Self {
        PriorConfig {
            vocab,
            height,
            width,
            embed: 16,
            hidden: 32,
            blocks: 3,
            kernel: 5,
            classes: 0,
            batch_size: 32,
            epochs: 10,
            lr: 3e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.vocab > u32::MAX as usize {
            return Err(Error::Config(format!("prior vocabulary {} must be at least 2", self.vocab)));
        }
        if [self.height, self.width, self.embed, self.hidden, self.batch_size, self.epochs].contains(&0) {
            return Err(Error::Config("prior sizes, batch size and epochs must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("prior kernel {} must be odd", self.kernel)));
        }
        if self.classes > 256 {
            return Err(Error::Config(format!("{} classes exceed the 8-bit label range", self.classes)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("prior learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// Consumes the `prior_*` keys of `cfg`.
    pub fn apply(&mut self, cfg: &mut ConfigFile) -> Result<()> {
        cfg.take_into("prior_vocab", &mut self.vocab)?;
        cfg.take_into("prior_height", &mut self.height)?;
        cfg.take_into("prior_width", &mut self.width)?;
        cfg.take_into("prior_embed", &mut self.embed)?;
        cfg.take_into("prior_hidden", &mut self.hidden)?;
        cfg.take_into("prior_blocks", &mut self.blocks)?;
        cfg.take_into("prior_kernel", &mut self.kernel)?;
        cfg.take_into("prior_classes", &mut self.classes)?;
        cfg.take_into("prior_batch_size", &mut self.batch_size)?;
        cfg.take_into("prior_epochs", &mut self.epochs)?;
        cfg.take_into("prior_lr", &mut self.lr)?;
        cfg.take_into("prior_seed", &mut self.seed)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut c = ConfigFile::default();
        c.set("prior_vocab", self.vocab);
        c.set("prior_height", self.height);
        c.set("prior_width", self.width);
        c.set("prior_embed", self.embed);
        c.set("prior_hidden", self.hidden);
        c.set("prior_blocks", self.blocks);
        c.set("prior_kernel", self.kernel);
        c.set("prior_classes", self.classes);
        c.set("prior_batch_size", self.batch_size);
        c.set("prior_epochs", self.epochs);
        c.set("prior_lr", self.lr);
        c.set("prior_seed", self.seed);
        c.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::parse(text)?;
        let mut c = PriorConfig::new(2, 1, 1);
        c.apply(&mut cfg)?;
        cfg.finish()?;
        c.validate()?;
        Ok(c)
    }
}

/// `[out, in, k, k]` raster-causal mask; `centre` keeps the centre tap.
pub fn causal_mask(out_c: usize, in_c: usize, k: usize, centre: bool) -> Tensor {
    let c = k / 2;
    Tensor::from_fn([out_c, in_c, k, k], |i| {
        let (y, x) = ((i / k) % k, i % k);
        let keep = y < c || (y == c && (x < c || (centre && x == c)));
        keep as u8 as f32
    })
}

/// Index grids with optional class labels, in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorData {
    pub height: usize,
    pub width: usize,
    /// `count * height * width` symbols.
    pub symbols: Vec<u32>,
    /// Empty, or one label per grid.
    pub labels: Vec<u8>,
}

impl PriorData {
    pub fn new(height: usize, width: usize, symbols: Vec<u32>, labels: Vec<u8>) -> Result<Self> {
        let hw = height * width;
        if hw == 0 || symbols.len() % hw != 0 {
            return Err(Error::shape("prior data", format!("{} symbols for {height}x{width} grids", symbols.len())));
        }
        if !labels.is_empty() && labels.len() != symbols.len() / hw {
            return Err(Error::shape("prior data", format!("{} labels for {} grids", labels.len(), symbols.len() / hw)));
        }
        Ok(PriorData { height, width, symbols, labels })
    }

    /// Composite path indices of quantized images.
    pub fn from_index_maps(maps: &[IndexMap], labels: Vec<u8>) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::InvalidArgument("no index maps".into()))?;
        let symbols = maps.iter().flat_map(IndexMap::composites).collect();
        Self::new(first.height(), first.width(), symbols, labels)
    }

    pub fn len(&self) -> usize {
        self.symbols.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PriorData {
        let hw = self.height * self.width;
        let symbols = idx.iter().flat_map(|&i| self.symbols[i * hw..(i + 1) * hw].iter().copied()).collect();
        let labels = if self.labels.is_empty() { Vec::new() } else { idx.iter().map(|&i| self.labels[i]).collect() };
        PriorData { height: self.height, width: self.width, symbols, labels }
    }

    /// Last `fraction` of the grids held out.
    pub fn split_holdout(&self, fraction: f64) -> (PriorData, PriorData) {
        let n = self.len();
        let held = ((n as f64) * fraction).round() as usize;
        let keep: Vec<usize> = (0..n - held).collect();
        let rest: Vec<usize> = (n - held..n).collect();
        (self.select(&keep), self.select(&rest))
    }

    pub fn max_symbol(&self) -> Option<u32> {
        self.symbols.iter().copied().max()
    }
}

/// Masked-convolution prior network.
#[derive(Clone, Debug)]
pub struct PriorModel {
    config: PriorConfig,
    params: ParamStore,
    embedding: ParamId,
    class_embedding: Option<ParamId>,
    input: Conv,
    blocks: Vec<Conv>,
    head: Conv,
    logits: Conv,
}

impl PriorModel {
    pub fn new(config: PriorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut p = ParamStore::new();
        let std = ConvKind::Standard;
        let embedding = p.add("prior.embed", Tensor::from_fn([c.vocab, c.embed], |_| rng.random_range(-1.0..1.0)));
        let class_embedding = (c.classes > 0)
            .then(|| p.add("prior.class_embed", Tensor::from_fn([c.classes, c.hidden], |_| rng.random_range(-0.1..0.1))));
        let (k, pad) = (c.kernel, c.kernel / 2);
        let input = Conv::new(&mut p, "prior.in", std, c.embed, c.hidden, k, 1, pad, rng)
            .with_mask(causal_mask(c.hidden, c.embed, k, false));
        let blocks = (0..c.blocks)
            .map(|i| {
                Conv::new(&mut p, &format!("prior.block{i}"), std, c.hidden, c.hidden, k, 1, pad, rng)
                    .with_mask(causal_mask(c.hidden, c.hidden, k, true))
            })
            .collect();
        let head = Conv::new(&mut p, "prior.head", std, c.hidden, c.hidden, 1, 1, 0, rng);
        let logits = Conv::new(&mut p, "prior.logits", std, c.hidden, c.vocab, 1, 1, 0, rng);
        Ok(PriorModel { config, params: p, embedding, class_embedding, input, blocks, head, logits })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Opens the centre tap of the input mask so each position sees its own
    /// symbol. Breaks causality; exists to exercise [`causality_check`].
    pub fn open_centre_tap(&mut self) {
        let c = &self.config;
        let k = c.kernel;
        if let Some(mask) = self.input.mask.as_mut() {
            for o in 0..c.hidden {
                for i in 0..c.embed {
                    mask.data_mut()[((o * c.embed + i) * k + k / 2) * k + k / 2] = 1.0;
                }
            }
        }
    }

    fn check_data(&self, data: &PriorData) -> Result<()> {
        let c = &self.config;
        if (data.height, data.width) != (c.height, c.width) {
            return Err(Error::shape(
                "prior",
                format!("{}x{} grids, prior expects {}x{}", data.height, data.width, c.height, c.width),
            ));
        }
        if let Some(m) = data.max_symbol() {
            if m as usize >= c.vocab {
                return Err(Error::InvalidArgument(format!("symbol {m} outside the prior vocabulary {}", c.vocab)));
            }
        }
        if c.classes > 0 {
            if data.labels.len() != data.len() {
                return Err(Error::InvalidArgument("class-conditional prior needs one label per grid".into()));
            }
            if let Some(&l) = data.labels.iter().find(|&&l| l as usize >= c.classes) {
                return Err(Error::InvalidArgument(format!("label {l} outside {} classes", c.classes)));
            }
        }
        Ok(())
    }

    fn logits_graph(&self, g: &mut Graph, p: &Bound, data: &PriorData) -> Result<Var> {
        let (b, h, w) = (data.len(), self.config.height, self.config.width);
        let x = g.gather(p.var(self.embedding), &data.symbols, [b, h, w])?;
        let mut x = self.input.forward(g, p, x)?;
        if let Some(ce) = self.class_embedding {
            let labels: Vec<u32> = data.labels.iter().map(|&l| l as u32).collect();
            let c = g.gather(p.var(ce), &labels, [b, 1, 1])?;
            x = g.add_spatial_broadcast(x, c)?;
        }
        for blk in &self.blocks {
            let r = g.relu(x)?;
            let r = blk.forward(g, p, r)?;
            x = g.add(x, r)?;
        }
        let x = g.relu(x)?;
        let x = self.head.forward(g, p, x)?;
        let x = g.relu(x)?;
        self.logits.forward(g, p, x)
    }

    /// `[B, V, H, W]` logits.
    pub fn logits(&self, data: &PriorData) -> Result<Tensor> {
        self.check_data(data)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let y = self.logits_graph(&mut g, &p, data)?;
        Ok(g.value(y).clone())
    }

    /// Mean negative log-likelihood in nats per location.
    pub fn nll(&self, data: &PriorData) -> Result<f64> {
        self.check_data(data)?;
        let bs = self.config.batch_size;
        let mut total = 0.0f64;
        for start in (0..data.len()).step_by(bs) {
            let idx: Vec<usize> = (start..(start + bs).min(data.len())).collect();
            let batch = data.select(&idx);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let y = self.logits_graph(&mut g, &p, &batch)?;
            let l = g.softmax_cross_entropy(y, &batch.symbols)?;
            total += g.value(l).item() as f64 * batch.symbols.len() as f64;
        }
        Ok(total / data.symbols.len().max(1) as f64)
    }

    pub fn to_section(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str(&self.config.to_text()).params(&self.params);
        e.finish()
    }

    /// Restores a prior and verifies its causal masking.
    pub fn from_section(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes);
        let config = PriorConfig::from_text(&d.str()?)?;
        let mut prior = PriorModel::new(config, &mut seeded_rng(0))?;
        prior.params.load_from(&d.params()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let report = causality_check(&prior)?;
        if !report.violations.is_empty() {
            return Err(Error::Checkpoint(format!("prior violates causality at {} positions", report.violations.len())));
        }
        Ok(prior)
    }
}

/// One epoch of prior training.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorEpoch {
    /// 1-based.
    pub epoch: usize,
    pub train_nll: f64,
    pub heldout_nll: f64,
    pub wall_ms: f64,
}

/// Fits `prior` by maximum likelihood, reporting held-out NLL per epoch.
pub fn prior_train(
    prior: &mut PriorModel,
    train: &PriorData,
    heldout: &PriorData,
    mut on_epoch: impl FnMut(&PriorEpoch) -> Result<()>,
) -> Result<Vec<PriorEpoch>> {
    prior.check_data(train)?;
    prior.check_data(heldout)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("prior training set is empty".into()));
    }
    let cfg = prior.config.clone();
    let mut adam = AdamState::for_store(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &prior.params);
    let mut shuffle = seeded_rng(cfg.seed);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.select(idx);
            let mut g = Graph::new();
            let p = prior.params.bind(&mut g, true);
            let y = prior.logits_graph(&mut g, &p, &batch)?;
            let loss = g.softmax_cross_entropy(y, &batch.symbols)?;
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("prior loss in epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            let gs: Vec<Vec<f32>> = p
                .vars()
                .iter()
                .zip(prior.params.tensors())
                .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
                .collect();
            adam.step_store(&mut prior.params, &gs)?;
            sum += l as f64 * batch.symbols.len() as f64;
            count += batch.symbols.len();
        }
        let heldout_nll = if heldout.is_empty() { f64::NAN } else { prior.nll(heldout)? };
        let rec = PriorEpoch {
            epoch,
            train_nll: sum / count as f64,
            heldout_nll,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

/// What to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub count: usize,
    pub temperature: f32,
    pub seed: u64,
    pub label: Option<u8>,
}

/// Sampled grids plus the distribution each symbol was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub grids: PriorData,
    /// `count * H * W * V`: the tempered distribution at each position.
    pub probs: Vec<f32>,
}

/// Per-image generator for image `index` of a request seeded with `seed`.
pub fn image_rng(seed: u64, index: usize) -> Rng {
    use rand::SeedableRng;
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

/// Ancestral sampling in raster order, one forward pass per position.
pub fn sample_codes(prior: &PriorModel, req: &SampleRequest) -> Result<Samples> {
    if !(req.temperature > 0.0 && req.temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {} must be positive", req.temperature)));
    }
    let c = &prior.config;
    let (hw, v) = (c.height * c.width, c.vocab);
    let labels = match (c.classes, req.label) {
        (0, None) => Vec::new(),
        (0, Some(_)) => return Err(Error::InvalidArgument("prior is not class-conditional".into())),
        (_, Some(l)) => vec![l; req.count],
        (_, None) => return Err(Error::InvalidArgument("class-conditional prior needs a label".into())),
    };
    let mut grids = PriorData::new(c.height, c.width, vec![0; req.count * hw], labels)?;
    let mut probs = vec![0.0f32; req.count * hw * v];
    if req.count == 0 {
        return Ok(Samples { grids, probs });
    }
    let mut rngs: Vec<Rng> = (0..req.count).map(|i| image_rng(req.seed, i)).collect();
    let inv_t = 1.0 / req.temperature as f64;
    for pos in 0..hw {
        let logits = prior.logits(&grids)?;
        for (i, rng) in rngs.iter_mut().enumerate() {
            let at = |k: usize| logits.data()[(i * v + k) * hw + pos] as f64 * inv_t;
            let max = (0..v).map(at).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..v).map(|k| (at(k) - max).exp()).collect();
            let z: f64 = weights.iter().sum();
            let u = rng.random::<f64>() * z;
            let mut acc = 0.0;
            let mut pick = v - 1;
            for (k, &wk) in weights.iter().enumerate() {
                acc += wk;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            grids.symbols[i * hw + pos] = pick as u32;
            let dst = &mut probs[(i * hw + pos) * v..(i * hw + pos + 1) * v];
            for (d, &wk) in dst.iter_mut().zip(&weights) {
                *d = (wk / z) as f32;
            }
        }
    }
    Ok(Samples { grids, probs })
}

/// Samples index grids and decodes them to images in `[0, 1]`.
pub fn sample(prior: &PriorModel, model: &HrvqModel, req: &SampleRequest) -> Result<(Tensor, Samples)> {
    let mc = model.config();
    let c = &prior.config;
    if c.vocab as u64 != mc.num_leaves() {
        return Err(Error::InvalidArgument(format!(
            "prior vocabulary {} does not match the codebook's {} paths",
            c.vocab,
            mc.num_leaves()
        )));
    }
    if (c.height, c.width) != (mc.latent, mc.latent) {
        return Err(Error::InvalidArgument(format!(
            "prior grid {}x{} does not match the {}x{} latent",
            c.height, c.width, mc.latent, mc.latent
        )));
    }
    let samples = sample_codes(prior, req)?;
    if req.count == 0 {
        return Ok((Tensor::zeros([0, mc.channels, mc.height, mc.width]), samples));
    }
    let hw = c.height * c.width;
    let maps = samples
        .grids
        .symbols
        .chunks(hw)
        .map(|s| IndexMap::from_composites(c.height, c.width, mc.layers, mc.size, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((model.decode_codes(&maps, 1)?, samples))
}

/// Outcome of [`causality_check`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CausalityReport {
    /// `(perturbed, affected)` raster position pairs with `affected <= perturbed`.
    pub violations: Vec<(usize, usize)>,
    pub positions_checked: usize,
}

/// Perturbs each raster position of two random grids in turn and lists
/// every position at or before it whose logits changed.
pub fn causality_check(prior: &PriorModel) -> Result<CausalityReport> {
    let c = &prior.config;
    let (hw, v) = (c.height * c.width, c.vocab);
    let mut rng = seeded_rng(0xC0FFEE);
    let mut report = CausalityReport { positions_checked: hw, ..Default::default() };
    for _ in 0..2 {
        let base: Vec<u32> = (0..hw).map(|_| rng.random_range(0..v as u32)).collect();
        let mut symbols = base.clone();
        for p in 0..hw {
            let mut s = base.clone();
            s[p] = (s[p] + 1 + rng.random_range(0..v as u32 - 1)) % v as u32;
            symbols.extend(s);
        }
        let labels = if c.classes > 0 { vec![0; hw + 1] } else { Vec::new() };
        let logits = prior.logits(&PriorData::new(c.height, c.width, symbols, labels)?)?;
        let img = |i: usize, k: usize, q: usize| logits.data()[(i * v + k) * hw + q];
        for p in 0..hw {
            for q in 0..=p {
                if (0..v).any(|k| img(p + 1, k, q).to_bits() != img(0, k, q).to_bits())
                    && !report.violations.contains(&(p, q))
                {
                    report.violations.push((p, q));
                }
            }
        }
    }
    report.violations.sort_unstable();
    Ok(report)
}

/// Per-location softmax of the prior's logits.
pub fn probabilities(prior: &PriorModel, data: &PriorData) -> Result<Tensor> {
    softmax_channels(&prior.logits(data)?)
}
