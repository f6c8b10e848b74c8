//! Encoder, hierarchical quantizer and decoder, plus the training loop.
//!
//! The encoder maps `[B, C, H, W]` images to a `[B, d, h, w]` latent grid
//! with a single stride-2 convolution followed by residual blocks; the
//! decoder mirrors it with a stride-2 transposed convolution. Both share the
//! model's one [`HierCodebook`].

mod loss;
mod persist;
mod train;

pub use loss::{LossBreakdown, LossWeights};
pub use train::{evaluate, EpochRecord, EvalReport, MetricsLog, TrainConfig, Trainer, UpdateMode};

use rand::Rng as _;

use crate::codebook::{partial_combine, GridQuantization, HierCodebook, IndexMap};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Conv, ConvKind, Graph, ParamStore, ResidualBlock, Tensor, Var};
use crate::Rng;

/// Which search assigns codes: the residual hierarchy or a single flat codebook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantizer {
    Hierarchical,
    /// One codebook of `m` codewords (`n` must be 1).
    Flat,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub residual_hidden: usize,
    pub residual_blocks: usize,
    /// `n`.
    pub layers: usize,
    /// `m`.
    pub size: usize,
    /// `d`.
    pub dim: usize,
    /// Latent grid side; the grid is `latent x latent`.
    pub latent: usize,
    pub quantizer: Quantizer,
}

impl ModelConfig {
    /// 28x28 grayscale, three layers of four codewords, 16x16x8 latent,
    /// 64 hidden and 64 residual units.
    pub fn mnist() -> Self {
        ModelConfig {
            channels: 1,
            height: 28,
            width: 28,
            hidden: 64,
            residual_hidden: 64,
            residual_blocks: 2,
            layers: 3,
            size: 4,
            dim: 8,
            latent: 16,
            quantizer: Quantizer::Hierarchical,
        }
    }

    /// 32x32 RGB with the `{8, 64, 512}` hierarchy and `d = 16`.
    pub fn cifar10() -> Self {
        ModelConfig { channels: 3, height: 32, width: 32, size: 8, dim: 16, ..Self::mnist() }
    }

    /// Padding of the stride-2, kernel-4 resampling convolutions that maps
    /// the image side onto the latent side.
    fn resample_pad(&self, side: usize) -> Result<usize> {
        // out = (side + 2p - 4) / 2 + 1  =>  2p = 2(out - 1) + 4 - side
        let twice = 2 * (self.latent as i64 - 1) + 4 - side as i64;
        if twice < 0 || twice % 2 != 0 || self.latent == 0 {
            return Err(Error::Config(format!(
                "image side {side} cannot be resampled to a {0}x{0} latent by a stride-2 kernel-4 convolution",
                self.latent
            )));
        }
        Ok((twice / 2) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("hidden", self.hidden),
            ("residual_hidden", self.residual_hidden),
            ("dim", self.dim),
            ("latent", self.latent),
            ("layers", self.layers),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.size < 2 {
            return Err(Error::Config(format!("codebook size m = {} must be at least 2", self.size)));
        }
        if self.quantizer == Quantizer::Flat && self.layers != 1 {
            return Err(Error::Config(format!("a flat codebook has one layer, not {}", self.layers)));
        }
        let ph = self.resample_pad(self.height)?;
        let pw = self.resample_pad(self.width)?;
        if ph != pw {
            return Err(Error::Config(format!("{}x{} images need unequal padding", self.height, self.width)));
        }
        Ok(())
    }

    pub fn num_leaves(&self) -> u64 {
        (self.size as u64).pow(self.layers as u32)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    down: Conv,
    mid: Conv,
    blocks: Vec<ResidualBlock>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Decoder {
    inp: Conv,
    blocks: Vec<ResidualBlock>,
    up: Conv,
}

/// Graph handles for one pass through the model and its loss.
#[derive(Debug)]
pub struct Pass {
    pub params: Bound,
    /// One table handle per codebook layer.
    pub tables: Vec<Var>,
    pub latent: Var,
    /// `e^i` for each layer, `[B, d, h, w]`.
    pub codewords: Vec<Var>,
    /// `xi^0 .. xi^n`.
    pub residuals: Vec<Var>,
    pub combined: Var,
    pub reconstruction: Var,
    pub loss: loss::LossVars,
    pub maps: Vec<IndexMap>,
    /// Distance evaluations spent assigning codes (0 when codes were given).
    pub distance_evals: u64,
}

/// Encoder, decoder and the shared codebook.
#[derive(Clone, Debug)]
pub struct HrvqModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: HierCodebook,
}

impl HrvqModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let pad = config.resample_pad(config.height)?;
        let c = &config;
        let mut p = ParamStore::new();
        let std = ConvKind::Standard;
        let encoder = Encoder {
            down: Conv::new(&mut p, "enc.down", std, c.channels, c.hidden, 4, 2, pad, rng),
            mid: Conv::new(&mut p, "enc.mid", std, c.hidden, c.hidden, 3, 1, 1, rng),
            blocks: (0..c.residual_blocks)
                .map(|i| ResidualBlock::new(&mut p, &format!("enc.res{i}"), c.hidden, c.residual_hidden, rng))
                .collect(),
            out: Conv::new(&mut p, "enc.out", std, c.hidden, c.dim, 1, 1, 0, rng),
        };
        let decoder = Decoder {
            inp: Conv::new(&mut p, "dec.in", std, c.dim, c.hidden, 3, 1, 1, rng),
            blocks: (0..c.residual_blocks)
                .map(|i| ResidualBlock::new(&mut p, &format!("dec.res{i}"), c.hidden, c.residual_hidden, rng))
                .collect(),
            up: Conv::new(&mut p, "dec.up", ConvKind::Transpose, c.hidden, c.channels, 4, 2, pad, rng),
        };
        let codebook = HierCodebook::random(c.layers, c.size, c.dim, rng)?;
        Ok(HrvqModel { config, params: p, encoder, decoder, codebook })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook(&self) -> &HierCodebook {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut HierCodebook {
        &mut self.codebook
    }

    /// Replaces the codebook after checking it matches `n`, `m` and `d`.
    pub fn set_codebook(&mut self, codebook: HierCodebook) -> Result<()> {
        let c = &self.config;
        if (codebook.layers(), codebook.size(), codebook.dim()) != (c.layers, c.size, c.dim) {
            return Err(Error::MalformedCodebook(format!(
                "codebook is n={}, m={}, d={}; model expects n={}, m={}, d={}",
                codebook.layers(),
                codebook.size(),
                codebook.dim(),
                c.layers,
                c.size,
                c.dim
            )));
        }
        self.codebook = codebook;
        Ok(())
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let [b, c, h, w] = images.dims4("model input")?;
        let cfg = &self.config;
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::shape(
                "model input",
                format!("images are {c}x{h}x{w}, model expects {}x{}x{}", cfg.channels, cfg.height, cfg.width),
            ));
        }
        Ok(b)
    }

    fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let e = &self.encoder;
        let h = e.down.forward(g, p, x)?;
        let h = g.relu(h)?;
        let mut h = e.mid.forward(g, p, h)?;
        for b in &e.blocks {
            h = b.forward(g, p, h)?;
        }
        let h = g.relu(h)?;
        e.out.forward(g, p, h)
    }

    fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let d = &self.decoder;
        let mut h = d.inp.forward(g, p, z)?;
        for b in &d.blocks {
            h = b.forward(g, p, h)?;
        }
        let h = g.relu(h)?;
        d.up.forward(g, p, h)
    }

    /// Encoder output `xi^0`, `[B, d, h, w]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let z = self.encode_graph(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    /// Decoder output for a latent grid, unclamped.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let [_, d, h, w] = latent.dims4("decode")?;
        if (d, h, w) != (self.config.dim, self.config.latent, self.config.latent) {
            return Err(Error::shape("decode", format!("latent {:?} does not match the model", latent.shape())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latent.clone());
        let y = self.decode_graph(&mut g, &p, z)?;
        Ok(g.value(y).clone())
    }

    /// Assigns codes to a latent batch with this model's quantizer.
    pub fn quantize(&self, latent: &Tensor) -> Result<GridQuantization> {
        match self.config.quantizer {
            Quantizer::Hierarchical => self.codebook.quantize_grid(latent),
            Quantizer::Flat => self.codebook.quantize_grid_flat(latent),
        }
    }

    /// Encodes and quantizes, returning one index map per image.
    pub fn encode_codes(&self, images: &Tensor) -> Result<Vec<IndexMap>> {
        Ok(self.quantize(&self.encode(images)?)?.maps)
    }

    /// Decodes the sum of layers `from_layer..=n` of the given codes and
    /// clamps the result to `[0, 1]`.
    pub fn decode_codes(&self, maps: &[IndexMap], from_layer: usize) -> Result<Tensor> {
        let layers = self.codebook.lookup(maps)?;
        let latent = partial_combine(&layers, from_layer)?;
        Ok(self.decode(&latent)?.clamp(0.0, 1.0))
    }

    /// Reconstructs `images` from layers `from_layer..=n` (1 is the full
    /// reconstruction), clamped to `[0, 1]`.
    pub fn reconstruct(&self, images: &Tensor, from_layer: usize) -> Result<Tensor> {
        if from_layer < 1 || from_layer > self.config.layers {
            return Err(Error::InvalidArgument(format!(
                "from_layer {from_layer} outside 1..={}",
                self.config.layers
            )));
        }
        let maps = self.encode_codes(images)?;
        self.decode_codes(&maps, from_layer)
    }

    /// Builds the full forward pass and loss on `g`.
    ///
    /// `codes` pins the code assignment instead of searching for it.
    /// `train_tables` makes the codebook tables trainable leaves.
    pub fn build(
        &self,
        g: &mut Graph,
        images: &Tensor,
        codes: Option<&[IndexMap]>,
        weights: &LossWeights,
        train_tables: bool,
    ) -> Result<Pass> {
        self.check_images(images)?;
        let params = self.params.bind(g, true);
        let x = g.constant(images.clone());
        let latent = self.encode_graph(g, &params, x)?;
        self.build_from_latent(g, params, latent, x, codes, weights, train_tables)
    }

    /// Like [`build`](Self::build) with the encoder replaced by the given
    /// latent (a trainable leaf).
    pub fn build_with_latent(
        &self,
        g: &mut Graph,
        latent: &Tensor,
        images: &Tensor,
        codes: Option<&[IndexMap]>,
        weights: &LossWeights,
    ) -> Result<Pass> {
        self.check_images(images)?;
        let params = self.params.bind(g, true);
        let x = g.constant(images.clone());
        let z = g.param(latent.clone());
        self.build_from_latent(g, params, z, x, codes, weights, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_from_latent(
        &self,
        g: &mut Graph,
        params: Bound,
        latent: Var,
        x: Var,
        codes: Option<&[IndexMap]>,
        weights: &LossWeights,
        train_tables: bool,
    ) -> Result<Pass> {
        let n = self.config.layers;
        weights.check(n)?;
        let [b, d, h, w] = g.value(latent).dims4("latent")?;
        if (d, h, w) != (self.config.dim, self.config.latent, self.config.latent) {
            return Err(Error::shape("latent", format!("{:?} does not match the model", g.shape(latent))));
        }
        let (maps, distance_evals) = match codes {
            Some(m) => {
                if m.len() != b {
                    return Err(Error::shape("codes", format!("{} index maps for a batch of {b}", m.len())));
                }
                (m.to_vec(), 0)
            }
            None => {
                let q = self.quantize(g.value(latent))?;
                (q.maps, q.distance_evals)
            }
        };
        let tables: Vec<Var> = self
            .codebook
            .tables()
            .iter()
            .map(|t| if train_tables { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();

        let mut codewords = Vec::with_capacity(n);
        let mut residuals = vec![latent];
        let mut layer_terms = Vec::with_capacity(n);
        for (layer, &table) in (1..=n).zip(&tables) {
            let rows: Vec<u32> = maps.iter().flat_map(|m| m.rows(layer)).collect();
            let e = g.gather(table, &rows, [b, h, w])?;
            let prev = residuals[layer - 1];
            let sg_prev = g.stop_gradient(prev)?;
            let sg_e = g.stop_gradient(e)?;
            let codebook_term = g.mse(sg_prev, e)?;
            let commitment_term = g.mse(sg_e, prev)?;
            // Residuals pass encoder gradient only; codewords learn from their own terms.
            residuals.push(g.sub(prev, sg_e)?);
            codewords.push(e);
            layer_terms.push((codebook_term, commitment_term));
        }
        let mut combined = codewords[0];
        for &e in &codewords[1..] {
            combined = g.add(combined, e)?;
        }
        let sg_latent = g.stop_gradient(latent)?;
        let sg_combined = g.stop_gradient(combined)?;
        let combined_terms = (g.mse(sg_latent, combined)?, g.mse(sg_combined, latent)?);

        let decoder_in = g.straight_through(latent, combined)?;
        let reconstruction = self.decode_graph(g, &params, decoder_in)?;
        let recon_term = g.mse(reconstruction, x)?;
        let loss = loss::assemble(g, weights, recon_term, combined_terms, &layer_terms)?;
        Ok(Pass {
            params,
            tables,
            latent,
            codewords,
            residuals,
            combined,
            reconstruction,
            loss,
            maps,
            distance_evals,
        })
    }

    /// Loss and outputs for a batch without touching any state.
    pub fn forward(&self, images: &Tensor, weights: &LossWeights) -> Result<Forward> {
        let mut g = Graph::new();
        let pass = self.build(&mut g, images, None, weights, false)?;
        Forward::collect(&g, pass)
    }

    /// Like [`forward`](Self::forward) with the code assignment pinned.
    pub fn forward_with_codes(&self, images: &Tensor, codes: &[IndexMap], weights: &LossWeights) -> Result<Forward> {
        let mut g = Graph::new();
        let pass = self.build(&mut g, images, Some(codes), weights, false)?;
        Forward::collect(&g, pass)
    }

    /// Reinitialises the codebook from encoder outputs: k-means++ for the
    /// root, small Gaussian noise below it.
    pub fn init_codebook_from(&mut self, images: &Tensor, rng: &mut Rng) -> Result<()> {
        let z = self.encode(images)?;
        let [b, d, h, w] = z.dims4("latent")?;
        let hw = h * w;
        let mut samples = Vec::with_capacity(b * hw * d);
        for bi in 0..b {
            for s in 0..hw {
                samples.extend((0..d).map(|j| z.data()[(bi * d + j) * hw + s]));
            }
        }
        let c = &self.config;
        self.codebook = HierCodebook::init_from_samples(c.layers, c.size, c.dim, &samples, rng)?;
        Ok(())
    }

    /// Replaces root codeword `row` with the latent vector at a random
    /// location of `latent`.
    pub(crate) fn restart_codeword(&mut self, row: usize, latent: &Tensor, rng: &mut Rng) -> Result<()> {
        let [b, d, h, w] = latent.dims4("latent")?;
        let hw = h * w;
        let pick = rng.random_range(0..b * hw);
        let (bi, s) = (pick / hw, pick % hw);
        let v: Vec<f32> = (0..d).map(|j| latent.data()[(bi * d + j) * hw + s]).collect();
        self.codebook.reset_root_codeword(row, &v);
        Ok(())
    }
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Decoder output, unclamped.
    pub reconstruction: Tensor,
    /// `e_C`.
    pub combined: Tensor,
    pub maps: Vec<IndexMap>,
    /// `xi^0 .. xi^n`.
    pub residuals: Vec<Tensor>,
    pub loss: LossBreakdown,
    pub distance_evals: u64,
}

impl Forward {
    fn collect(g: &Graph, pass: Pass) -> Result<Self> {
        Ok(Forward {
            reconstruction: g.value(pass.reconstruction).clone(),
            combined: g.value(pass.combined).clone(),
            residuals: pass.residuals.iter().map(|&v| g.value(v).clone()).collect(),
            loss: pass.loss.breakdown(g),
            maps: pass.maps,
            distance_evals: pass.distance_evals,
        })
    }
}
