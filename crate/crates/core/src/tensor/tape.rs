//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order. [`Graph::backward`] walks that record once in reverse; afterwards the
//! graph is spent and a new one is built for the next step.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sum(Var),
    Conv2d { input: Var, weight: Var, stride: usize, pad: usize },
    ConvTranspose2d { input: Var, weight: Var, stride: usize, pad: usize },
    ChannelBias { x: Var, bias: Var },
    SpatialBroadcast { x: Var, y: Var },
    MatMul { x: Var, w: Var },
    Mse { a: Var, b: Var },
    StraightThrough { continuous: Var },
    Gather { table: Var, rows: Vec<u32> },
    MulConst { x: Var, factor: Vec<f32> },
    SoftmaxXent { logits: Var, probs: Vec<f32>, targets: Vec<u32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Values cut by `stop_gradient` / `straight_through`, in call order.
///
/// Recording them on one pass and replaying them on another freezes every
/// stop-gradient branch at the recorded point, which turns a finite-difference
/// probe of the loss into a probe of exactly the function autodiff sees.
#[derive(Debug, Default)]
pub enum StopLog {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay { values: Vec<Tensor>, cursor: usize },
}

/// Gradient tape for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    stops: StopLog,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when no path
    /// carrying gradient reaches `v`.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but materialises zeros for unreached values.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f32> {
        self.get(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: impl IntoIterator<Item = f32>, len: usize) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    for (s, c) in slot.iter_mut().zip(contribution) {
        *s += c;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts recording stop-gradient values.
    pub fn record_stops(mut self) -> Self {
        self.stops = StopLog::Record(Vec::new());
        self
    }

    /// Replays values captured by an earlier recording pass.
    pub fn replay_stops(mut self, values: Vec<Tensor>) -> Self {
        self.stops = StopLog::Replay { values, cursor: 0 };
        self
    }

    /// Values captured so far in recording mode.
    pub fn take_stops(&mut self) -> Vec<Tensor> {
        match std::mem::take(&mut self.stops) {
            StopLog::Record(v) => v,
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(format!("forward output of {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("add", a, b, |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * k).collect())?;
        let rg = self.needs(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect())?;
        let rg = self.needs(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let t = kernels::conv2d_forward(self.value(input), self.value(weight), stride, pad)?;
        let rg = self.needs(input) || self.needs(weight);
        self.push(t, Op::Conv2d { input, weight, stride, pad }, rg)
    }

    pub fn conv2d_transpose(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let t = kernels::conv2d_transpose_forward(self.value(input), self.value(weight), stride, pad)?;
        let rg = self.needs(input) || self.needs(weight);
        self.push(t, Op::ConvTranspose2d { input, weight, stride, pad }, rg)
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[B, C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.ndim() < 2 || tb.ndim() != 1 || tx.shape()[1] != tb.numel() {
            return Err(Error::shape(
                "add_channel_bias",
                format!("x {:?} axis 1 vs bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let c = tb.numel();
        let inner: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % c];
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(bias);
        self.push(t, Op::ChannelBias { x, bias }, rg)
    }

    /// Adds `y` (`[B, C, 1, 1]`) to every spatial position of `x` (`[B, C, H, W]`).
    pub fn add_spatial_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let [b, c, h, w] = tx.dims4("add_spatial_broadcast")?;
        if ty.shape() != [b, c, 1, 1] {
            return Err(Error::shape(
                "add_spatial_broadcast",
                format!("x {:?} vs y {:?}", tx.shape(), ty.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += ty.data()[i / (h * w)];
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(y);
        self.push(t, Op::SpatialBroadcast { x, y }, rg)
    }

    /// `[B, in] x [in, out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let t = kernels::matmul(self.value(x), self.value(w))?;
        let rg = self.needs(x) || self.needs(w);
        self.push(t, Op::MatMul { x, w }, rg)
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mse", ta, tb)?;
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar((s / n) as f32), Op::Mse { a, b }, rg)
    }

    fn stop_value(&mut self, fresh: Tensor) -> Result<Tensor> {
        match &mut self.stops {
            StopLog::Off => Ok(fresh),
            StopLog::Record(log) => {
                log.push(fresh.clone());
                Ok(fresh)
            }
            StopLog::Replay { values, cursor } => {
                let v = values
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument("stop-gradient replay log exhausted".into()))?;
                *cursor += 1;
                same_shape("stop_gradient replay", &v, &fresh)?;
                Ok(v)
            }
        }
    }

    /// Identity forward; contributes no gradient to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let fresh = self.value(a).clone();
        let t = self.stop_value(fresh)?;
        self.push(t, Op::Leaf, false)
    }

    /// Forward value is `quantized`; the incoming gradient goes to
    /// `continuous` unchanged. Computed as `continuous + sg(quantized - continuous)`.
    pub fn straight_through(&mut self, continuous: Var, quantized: Var) -> Result<Var> {
        let (tc, tq) = (self.value(continuous), self.value(quantized));
        same_shape("straight_through", tc, tq)?;
        let offset = Tensor::new(
            tc.shape().to_vec(),
            tq.data().iter().zip(tc.data()).map(|(q, c)| q - c).collect(),
        )?;
        let offset = self.stop_value(offset)?;
        let tc = self.value(continuous);
        let t = Tensor::new(
            tc.shape().to_vec(),
            tc.data().iter().zip(offset.data()).map(|(c, o)| c + o).collect(),
        )?;
        let rg = self.needs(continuous);
        self.push(t, Op::StraightThrough { continuous }, rg)
    }

    /// Looks up `rows[i]` of `table` (`[K, D]`) for every position of a
    /// `[B, H, W]` grid and lays the result out as `[B, D, H, W]`.
    pub fn gather(&mut self, table: Var, rows: &[u32], grid: [usize; 3]) -> Result<Var> {
        let tt = self.value(table);
        let (k, d) = match *tt.shape() {
            [k, d] => (k, d),
            _ => return Err(Error::shape("gather", format!("table must be [K,D], got {:?}", tt.shape()))),
        };
        let [b, h, w] = grid;
        if rows.len() != b * h * w {
            return Err(Error::shape("gather", format!("{} rows for grid {:?}", rows.len(), grid)));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r as usize >= k) {
            return Err(Error::shape("gather", format!("row {bad} out of table size {k}")));
        }
        let hw = h * w;
        let mut data = vec![0.0f32; b * d * hw];
        for (pos, &r) in rows.iter().enumerate() {
            let (bi, s) = (pos / hw, pos % hw);
            let src = &tt.data()[r as usize * d..(r as usize + 1) * d];
            for (j, &v) in src.iter().enumerate() {
                data[(bi * d + j) * hw + s] = v;
            }
        }
        let t = Tensor::new([b, d, h, w], data)?;
        let rg = self.needs(table);
        self.push(t, Op::Gather { table, rows: rows.to_vec() }, rg)
    }

    /// Elementwise product with a constant tensor (masks).
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        same_shape("mul_const", tx, factor)?;
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect(),
        )?;
        let rg = self.needs(x);
        self.push(t, Op::MulConst { x, factor: factor.data().to_vec() }, rg)
    }

    /// Mean negative log-likelihood of `targets` (`[B, H, W]` raster order)
    /// under per-position softmax over axis 1 of `logits` (`[B, V, H, W]`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let tl = self.value(logits);
        let [b, v, h, w] = tl.dims4("softmax_cross_entropy")?;
        let hw = h * w;
        if targets.len() != b * hw {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), tl.shape()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::shape("softmax_cross_entropy", format!("target {bad} >= vocabulary {v}")));
        }
        let probs = softmax_axis1(tl);
        let mut nll = 0.0f64;
        for (pos, &t) in targets.iter().enumerate() {
            let (bi, s) = (pos / hw, pos % hw);
            let p = probs[(bi * v + t as usize) * hw + s] as f64;
            nll -= p.max(1e-30).ln();
        }
        let loss = (nll / targets.len().max(1) as f64) as f32;
        let rg = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, probs, targets: targets.to_vec() },
            rg,
        )
    }

    /// Reverse pass from the scalar `root`. Consumes the tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        self.consumed = true;
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        accumulate(grads, v, g.iter().copied(), numel(v));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.iter().copied(), numel(*a));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().map(|x| -x), numel(*b));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, g.iter().zip(tb.data()).map(|(g, y)| g * y), ta.numel());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().zip(ta.data()).map(|(g, x)| g * x), tb.numel());
                }
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.iter().map(|x| x * k), numel(*a)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                accumulate(
                    grads,
                    *a,
                    g.iter().zip(ta.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                    ta.numel(),
                );
            }
            Op::Sum(a) => {
                let n = numel(*a);
                accumulate(grads, *a, std::iter::repeat_n(g[0], n), n);
            }
            Op::Conv2d { input, weight, stride, pad } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                    self.needs(*input),
                )?;
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx, numel(*input));
                }
                if self.needs(*weight) {
                    accumulate(grads, *weight, dw, numel(*weight));
                }
            }
            Op::ConvTranspose2d { input, weight, stride, pad } => {
                let (dx, dw) = kernels::conv2d_transpose_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                    self.needs(*input),
                )?;
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx, numel(*input));
                }
                if self.needs(*weight) {
                    accumulate(grads, *weight, dw, numel(*weight));
                }
            }
            Op::ChannelBias { x, bias } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.iter().copied(), numel(*x));
                }
                if self.needs(*bias) {
                    let shape = self.shape(*x);
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut db = vec![0.0f64; c];
                    for (idx, &gv) in g.iter().enumerate() {
                        db[(idx / inner) % c] += gv as f64;
                    }
                    accumulate(grads, *bias, db.into_iter().map(|v| v as f32), c);
                }
            }
            Op::SpatialBroadcast { x, y } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.iter().copied(), numel(*x));
                }
                if self.needs(*y) {
                    let ny = numel(*y);
                    let hw = g.len() / ny.max(1);
                    let dy: Vec<f32> = g
                        .chunks(hw.max(1))
                        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                        .collect();
                    accumulate(grads, *y, dy, ny);
                }
            }
            Op::MatMul { x, w } => {
                let (dx, dw) = kernels::matmul_backward(self.value(*x), self.value(*w), g)?;
                if self.needs(*x) {
                    accumulate(grads, *x, dx, numel(*x));
                }
                if self.needs(*w) {
                    accumulate(grads, *w, dw, numel(*w));
                }
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[0] as f64 / ta.numel().max(1) as f64;
                let diff: Vec<f32> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| (k * (x as f64 - y as f64)) as f32)
                    .collect();
                if self.needs(*a) {
                    accumulate(grads, *a, diff.iter().copied(), ta.numel());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, diff.iter().map(|d| -d), tb.numel());
                }
            }
            Op::StraightThrough { continuous } => {
                accumulate(grads, *continuous, g.iter().copied(), numel(*continuous));
            }
            Op::Gather { table, rows } => {
                let d = self.shape(*table)[1];
                let [_, _, h, w] = node.value.dims4("gather")?;
                let hw = h * w;
                let mut dt = vec![0.0f64; numel(*table)];
                for (pos, &r) in rows.iter().enumerate() {
                    let (bi, s) = (pos / hw, pos % hw);
                    for j in 0..d {
                        dt[r as usize * d + j] += g[(bi * d + j) * hw + s] as f64;
                    }
                }
                accumulate(grads, *table, dt.into_iter().map(|v| v as f32), numel(*table));
            }
            Op::MulConst { x, factor } => {
                accumulate(grads, *x, g.iter().zip(factor).map(|(g, f)| g * f), numel(*x));
            }
            Op::SoftmaxXent { logits, probs, targets } => {
                let [_, v, h, w] = self.value(*logits).dims4("softmax_cross_entropy")?;
                let hw = h * w;
                let scale = g[0] / targets.len().max(1) as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (pos, &t) in targets.iter().enumerate() {
                    let (bi, s) = (pos / hw, pos % hw);
                    d[(bi * v + t as usize) * hw + s] -= scale;
                }
                accumulate(grads, *logits, d, probs.len());
            }
        }
        Ok(())
    }
}

/// Softmax over axis 1 of a `[B, V, H, W]` tensor.
pub(crate) fn softmax_axis1(t: &Tensor) -> Vec<f32> {
    let [b, v, h, w] = match *t.shape() {
        [b, v, h, w] => [b, v, h, w],
        _ => unreachable!("caller checked rank"),
    };
    let hw = h * w;
    let x = t.data();
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..b {
        for s in 0..hw {
            let at = |k: usize| (bi * v + k) * hw + s;
            let max = (0..v).map(|k| x[at(k)]).fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = (0..v).map(|k| ((x[at(k)] - max) as f64).exp()).sum();
            for k in 0..v {
                out[at(k)] = (((x[at(k)] - max) as f64).exp() / z) as f32;
            }
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Sum(..) => "sum",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv2d_transpose",
        Op::ChannelBias { .. } => "add_channel_bias",
        Op::SpatialBroadcast { .. } => "add_spatial_broadcast",
        Op::MatMul { .. } => "matmul",
        Op::Mse { .. } => "mse",
        Op::StraightThrough { .. } => "straight_through",
        Op::Gather { .. } => "gather",
        Op::MulConst { .. } => "mul_const",
        Op::SoftmaxXent { .. } => "softmax_cross_entropy",
    }
}
