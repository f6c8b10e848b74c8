use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// The [`Var`]s a [`ParamStore`] was bound to on one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Records every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        )
    }

    /// Replaces the contents with `other` after checking names and shapes agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::InvalidArgument(format!(
                "parameter names differ: expected {} entries, found {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{name}: {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        ParamStore { names, tensors }
    }
}

/// He-normal initialisation: `N(0, 2 / fan_in)`.
pub fn he_normal<R: Rng>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Transpose,
}

/// Convolution layer with optional bias and optional fixed weight mask.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub kind: ConvKind,
    pub mask: Option<Tensor>,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: ConvKind,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let (shape, fan_in) = match kind {
            ConvKind::Standard => ([out_c, in_c, k, k], in_c * k * k),
            // Each transpose output sees about in_c * k^2 / stride^2 inputs.
            ConvKind::Transpose => ([in_c, out_c, k, k], (in_c * k * k / (stride * stride)).max(1)),
        };
        let weight = store.add(format!("{name}.weight"), he_normal(shape, fan_in, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([out_c])));
        Conv { weight, bias, stride, pad, kind, mask: None }
    }

    pub fn with_mask(mut self, mask: Tensor) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut w = p.var(self.weight);
        if let Some(mask) = &self.mask {
            w = g.mul_const(w, mask)?;
        }
        let y = match self.kind {
            ConvKind::Standard => g.conv2d(x, w, self.stride, self.pad)?,
            ConvKind::Transpose => g.conv2d_transpose(x, w, self.stride, self.pad)?,
        };
        match self.bias {
            Some(b) => g.add_channel_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// `x + conv1x1(relu(conv3x3(relu(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub inner: Conv,
    pub outer: Conv,
}

impl ResidualBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut R) -> Self {
        ResidualBlock {
            inner: Conv::new(store, &format!("{name}.conv3"), ConvKind::Standard, channels, hidden, 3, 1, 1, rng),
            outer: Conv::new(store, &format!("{name}.conv1"), ConvKind::Standard, hidden, channels, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.relu(x)?;
        let h = self.inner.forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.outer.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Fully connected layer on `[B, in]` inputs.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Dense {
            weight: store.add(format!("{name}.weight"), he_normal([n_in, n_out], n_in, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([n_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_channel_bias(y, p.var(self.bias))
    }
}
