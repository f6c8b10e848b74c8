use std::cell::RefCell;

use hrvq::codebook::HierCodebook;
use hrvq::model::{HrvqModel, LossWeights, ModelConfig, Quantizer};
use hrvq::seeded_rng;
use hrvq::tensor::{Graph, Tensor};
use rand::Rng as _;

pub fn tiny(layers: usize, quantizer: Quantizer) -> ModelConfig {
    ModelConfig {
        channels: 1,
        height: 8,
        width: 8,
        hidden: 4,
        residual_hidden: 3,
        residual_blocks: 1,
        layers,
        size: if quantizer == Quantizer::Flat { 6 } else { 3 },
        dim: 2,
        latent: 4,
        quantizer,
    }
}

pub fn images(seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn([2, 1, 8, 8], |_| rng.random::<f32>())
}

/// Model whose codebook is scaled so every quantization term is non-trivial.
/// Every weight and bias is jittered: zero biases over zero patches would put
/// ReLU inputs exactly on the kink, where central differences see half a slope.
pub fn model(cfg: ModelConfig, seed: u64) -> HrvqModel {
    let mut rng = seeded_rng(seed);
    let mut m = HrvqModel::new(cfg.clone(), &mut rng).unwrap();
    for t in m.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1f32..0.1));
    }
    let tables = (0..cfg.layers)
        .map(|i| {
            let rows = cfg.size.pow(i as u32 + 1);
            (0..rows * cfg.dim).map(|_| rng.random_range(-1.0f32..1.0) / (i + 1) as f32).collect()
        })
        .collect();
    m.set_codebook(HierCodebook::from_tables(cfg.layers, cfg.size, cfg.dim, tables).unwrap()).unwrap();
    m
}

/// Dense f64 activations, `[B, C, H, W]`.
#[derive(Clone)]
struct T {
    d: Vec<f64>,
    s: [usize; 4],
}

impl T {
    fn of(t: &Tensor) -> T {
        T { d: t.data().iter().map(|&v| v as f64).collect(), s: t.dims4("t").unwrap() }
    }

    fn zip(&self, o: &T, f: impl Fn(f64, f64) -> f64) -> T {
        assert_eq!(self.s, o.s);
        T { d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect(), s: self.s }
    }

    fn mse(&self, o: &T) -> f64 {
        self.zip(o, |a, b| (a - b) * (a - b)).d.iter().sum::<f64>() / self.d.len() as f64
    }
}

/// Reference forward pass of the whole model in f64, written from the
/// architecture rather than from the graph ops.
struct Reference {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    pad: usize,
    blocks: usize,
    x: T,
    /// Gathered rows per layer, image-major then location.
    rows: Vec<Vec<u32>>,
    dim: usize,
    weights: LossWeights,
    /// Sign of every ReLU input seen by the last [`Reference::loss`] call.
    pattern: RefCell<Vec<bool>>,
}

/// Values behind every stop-gradient, frozen at the analysed point.
struct Frozen {
    latent: T,
    codewords: Vec<T>,
}

impl Frozen {
    fn combined(&self) -> T {
        self.codewords[1..].iter().fold(self.codewords[0].clone(), |a, e| a.zip(e, |p, q| p + q))
    }
}

impl Reference {
    fn relu(&self, x: &T) -> T {
        self.pattern.borrow_mut().extend(x.d.iter().map(|&v| v > 0.0));
        T { d: x.d.iter().map(|&v| v.max(0.0)).collect(), s: x.s }
    }

    fn param<'a>(&self, p: &'a [Vec<f64>], name: &str) -> (&'a [f64], &[usize]) {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
        (&p[i], &self.shapes[i])
    }

    fn conv(&self, p: &[Vec<f64>], name: &str, x: &T, stride: usize, pad: usize) -> T {
        let (w, ws) = self.param(p, &format!("{name}.weight"));
        let (bias, _) = self.param(p, &format!("{name}.bias"));
        let [b, c, h, wd] = x.s;
        let (o, k) = (ws[0], ws[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut d = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = bias[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.d[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        d[((bi * o + oc) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        T { d, s: [b, o, oh, ow] }
    }

    fn conv_transpose(&self, p: &[Vec<f64>], name: &str, x: &T, stride: usize, pad: usize) -> T {
        let (w, ws) = self.param(p, &format!("{name}.weight"));
        let (bias, _) = self.param(p, &format!("{name}.bias"));
        let [b, c, h, wd] = x.s;
        let (o, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let mut d = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                d[(bi * o + oc) * oh * ow..(bi * o + oc + 1) * oh * ow].fill(bias[oc]);
            }
            for ic in 0..c {
                for y in 0..h {
                    for xx in 0..wd {
                        let xv = x.d[((bi * c + ic) * h + y) * wd + xx];
                        for oc in 0..o {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (y * stride + ky) as isize - pad as isize;
                                    let ox = (xx * stride + kx) as isize - pad as isize;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    d[((bi * o + oc) * oh + oy as usize) * ow + ox as usize] +=
                                        xv * w[((ic * o + oc) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        T { d, s: [b, o, oh, ow] }
    }

    fn residual(&self, p: &[Vec<f64>], name: &str, x: &T) -> T {
        let h = self.conv(p, &format!("{name}.conv3"), &self.relu(x), 1, 1);
        let h = self.conv(p, &format!("{name}.conv1"), &self.relu(&h), 1, 0);
        x.zip(&h, |a, b| a + b)
    }

    fn encode(&self, p: &[Vec<f64>]) -> T {
        let down = self.conv(p, "enc.down", &self.x, 2, self.pad);
        let mut h = self.conv(p, "enc.mid", &self.relu(&down), 1, 1);
        for i in 0..self.blocks {
            h = self.residual(p, &format!("enc.res{i}"), &h);
        }
        self.conv(p, "enc.out", &self.relu(&h), 1, 0)
    }

    fn decode(&self, p: &[Vec<f64>], z: &T) -> T {
        let mut h = self.conv(p, "dec.in", z, 1, 1);
        for i in 0..self.blocks {
            h = self.residual(p, &format!("dec.res{i}"), &h);
        }
        self.conv_transpose(p, "dec.up", &self.relu(&h), 2, self.pad)
    }

    fn gather(&self, table: &[f64], layer: usize, like: &T) -> T {
        let [b, d, h, w] = like.s;
        let hw = h * w;
        let mut out = vec![0.0; b * d * hw];
        for bi in 0..b {
            for s in 0..hw {
                let row = self.rows[layer][bi * hw + s] as usize;
                for j in 0..d {
                    out[(bi * d + j) * hw + s] = table[row * self.dim + j];
                }
            }
        }
        T { d: out, s: like.s }
    }

    fn freeze(&self, p: &[Vec<f64>], tables: &[Vec<f64>]) -> Frozen {
        let latent = self.encode(p);
        let codewords = tables.iter().enumerate().map(|(i, t)| self.gather(t, i, &latent)).collect();
        Frozen { latent, codewords }
    }

    /// The surrogate whose gradient autodiff computes: every stop-gradient
    /// argument is replaced by its frozen value.
    fn loss(&self, p: &[Vec<f64>], tables: &[Vec<f64>], fz: &Frozen) -> f64 {
        self.pattern.borrow_mut().clear();
        let w = &self.weights;
        let latent = self.encode(p);
        let e: Vec<T> = tables.iter().enumerate().map(|(i, t)| self.gather(t, i, &latent)).collect();
        let mut total = 0.0;
        let mut prev = latent.clone();
        let mut frozen_prev = fz.latent.clone();
        for (i, ei) in e.iter().enumerate() {
            total += frozen_prev.mse(ei) + w.betas[i] as f64 * fz.codewords[i].mse(&prev);
            prev = prev.zip(&fz.codewords[i], |a, b| a - b);
            frozen_prev = frozen_prev.zip(&fz.codewords[i], |a, b| a - b);
        }
        let combined = e[1..].iter().fold(e[0].clone(), |a, x| a.zip(x, |p, q| p + q));
        let fz_combined = fz.combined();
        if w.combined {
            total += fz.latent.mse(&combined) + w.beta0 as f64 * fz_combined.mse(&latent);
        }
        let shift = fz_combined.zip(&fz.latent, |a, b| a - b);
        let decoder_in = latent.zip(&shift, |a, b| a + b);
        total + self.decode(p, &decoder_in).mse(&self.x)
    }
}

fn rel_err(ad: &[f32], fd: &[f64]) -> f64 {
    let diff = ad.iter().zip(fd).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>().sqrt();
    let na = ad.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nf = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na.max(nf) < 1e-9 {
        diff
    } else {
        diff / na.max(nf)
    }
}

const STEP: f64 = 1e-3;

/// Central difference at [`STEP`], shrunk tenfold while the stencil crosses
/// a ReLU kink of the reference; a difference across a kink averages two
/// one-sided slopes.
fn central(r: &Reference, v: &mut [Vec<f64>], i: usize, j: usize, f: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    f(v);
    let at = r.pattern.borrow().clone();
    let orig = v[i][j];
    let mut h = STEP;
    loop {
        v[i][j] = orig + h;
        let up = f(v);
        let smooth_up = *r.pattern.borrow() == at;
        v[i][j] = orig - h;
        let down = f(v);
        let smooth = smooth_up && *r.pattern.borrow() == at;
        v[i][j] = orig;
        if smooth || h < 1e-7 {
            return (up - down) / (2.0 * h);
        }
        h /= 10.0;
    }
}

/// Central differences of the f64 reference loss against autodiff of the
/// graph loss, for every network parameter and every codebook table, with
/// codes fixed at the analysed point. Returns the relative error per tensor.
pub fn full_loss_errors(cfg: ModelConfig, weights: LossWeights, seed: u64) -> Vec<(String, f64)> {
    let m = model(cfg.clone(), seed);
    let x = images(seed + 100);
    let mut g = Graph::new();
    let pass = m.build(&mut g, &x, None, &weights, true).unwrap();
    let grads = g.backward(pass.loss.total).unwrap();
    let at = pass.loss.breakdown(&g);
    at.check(1e-6).unwrap();

    let params = m.params();
    let r = Reference {
        names: params.names().to_vec(),
        shapes: params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        pad: (2 * (cfg.latent - 1) + 4 - cfg.height) / 2,
        blocks: cfg.residual_blocks,
        x: T::of(&x),
        rows: (1..=cfg.layers).map(|l| pass.maps.iter().flat_map(|mp| mp.rows(l)).collect()).collect(),
        dim: cfg.dim,
        weights,
        pattern: RefCell::new(Vec::new()),
    };
    let mut p: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let mut tables: Vec<Vec<f64>> =
        m.codebook().tables().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let fz = r.freeze(&p, &tables);
    let base = r.loss(&p, &tables, &fz);
    let want = at.recomputed_total();
    assert!((base - want).abs() < 1e-5 * want.abs(), "seed {seed}: reference loss {base} vs graph loss {want}");

    let mut out = Vec::new();
    for i in 0..p.len() {
        let ad = grads.get_or_zeros(pass.params.vars()[i], p[i].len());
        let fd: Vec<f64> = (0..p[i].len()).map(|j| central(&r, &mut p, i, j, |q| r.loss(q, &tables, &fz))).collect();
        out.push((r.names[i].clone(), rel_err(&ad, &fd)));
    }
    for i in 0..tables.len() {
        let ad = grads.get_or_zeros(pass.tables[i], tables[i].len());
        let fd: Vec<f64> = (0..tables[i].len()).map(|j| central(&r, &mut tables, i, j, |t| r.loss(&p, t, &fz))).collect();
        out.push((format!("codebook layer {}", i + 1), rel_err(&ad, &fd)));
    }
    out
}


/// Gradient of one loss term with respect to the encoder output and to
/// each codebook table.
pub fn term_grads(term: impl Fn(&hrvq::model::Pass) -> hrvq::tensor::Var) -> (Option<Vec<f32>>, Vec<Option<Vec<f32>>>) {
    let m = model(tiny(3, Quantizer::Hierarchical), 3);
    let mut g = Graph::new();
    let pass = m.build(&mut g, &images(4), None, &LossWeights::uniform(3, 0.25), true).unwrap();
    let root = term(&pass);
    let grads = g.backward(root).unwrap();
    let z = grads.get(pass.latent).map(<[f32]>::to_vec);
    let tables = pass.tables.iter().map(|&v| grads.get(v).map(<[f32]>::to_vec)).collect();
    (z, tables)
}

pub fn is_zero(g: &Option<Vec<f32>>) -> bool {
    g.as_ref().is_none_or(|v| v.iter().all(|&x| x == 0.0))
}


/// Every way a loss term's gradient reaches a side its stop-gradients
/// should block, or misses the side it should train.
pub fn routing_violations() -> Vec<String> {
    let mut bad = Vec::new();
    let mut expect = |ok: bool, what: String| {
        if !ok {
            bad.push(what);
        }
    };
    // Codebook terms never move the encoder output.
    for i in 0..3 {
        let (z, t) = term_grads(|p| p.loss.layer_codebook[i]);
        expect(is_zero(&z), format!("layer {} codebook term reached the latent", i + 1));
        expect(!is_zero(&t[i]), format!("layer {} codebook term missed its table", i + 1));
        expect(t.iter().enumerate().all(|(j, g)| j == i || is_zero(g)), format!("layer {} codebook term leaked", i + 1));
    }
    let (z, t) = term_grads(|p| p.loss.combined_codebook);
    expect(is_zero(&z), "combined codebook term reached the latent".into());
    expect(t.iter().all(|g| !is_zero(g)), "combined codebook term missed a table".into());

    // Commitment terms never move the codewords.
    for i in 0..3 {
        let (z, t) = term_grads(|p| p.loss.layer_commitment[i]);
        expect(!is_zero(&z), format!("layer {} commitment term missed the latent", i + 1));
        expect(t.iter().all(is_zero), format!("layer {} commitment term reached a table", i + 1));
    }
    let (z, t) = term_grads(|p| p.loss.combined_commitment);
    expect(!is_zero(&z), "combined commitment term missed the latent".into());
    expect(t.iter().all(is_zero), "combined commitment term reached a table".into());

    // Reconstruction reaches the encoder only through the straight-through path.
    let (z, t) = term_grads(|p| p.loss.reconstruction);
    expect(!is_zero(&z), "reconstruction missed the latent".into());
    expect(t.iter().all(is_zero), "reconstruction reached a table".into());
    bad
}
