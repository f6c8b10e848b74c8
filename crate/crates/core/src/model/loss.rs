use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Weights of the quantization terms.
///
/// With `combined` off and `n = 1` the objective is the single-codebook
/// loss `recon + |sg z - e|^2 + beta |sg e - z|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Commitment weight on the combined representation.
    pub beta0: f32,
    /// Per-layer commitment weights, one per layer.
    pub betas: Vec<f32>,
    /// Whether the combined-representation terms enter the total.
    pub combined: bool,
}

impl LossWeights {
    pub fn uniform(layers: usize, beta: f32) -> Self {
        LossWeights { beta0: beta, betas: vec![beta; layers], combined: true }
    }

    /// The single-codebook objective: layer terms only.
    pub fn flat(beta: f32) -> Self {
        LossWeights { beta0: beta, betas: vec![beta], combined: false }
    }

    pub(crate) fn check(&self, layers: usize) -> Result<()> {
        if self.betas.len() != layers {
            return Err(Error::Config(format!("{} per-layer betas for {layers} layers", self.betas.len())));
        }
        if std::iter::once(&self.beta0).chain(&self.betas).any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config("commitment weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Graph handles of every loss term.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub reconstruction: Var,
    pub combined_codebook: Var,
    pub combined_commitment: Var,
    pub layer_codebook: Vec<Var>,
    pub layer_commitment: Vec<Var>,
    pub total: Var,
    weights: LossWeights,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        LossBreakdown {
            reconstruction: v(self.reconstruction),
            combined_codebook: v(self.combined_codebook),
            combined_commitment: v(self.combined_commitment),
            layer_codebook: self.layer_codebook.iter().map(|&x| v(x)).collect(),
            layer_commitment: self.layer_commitment.iter().map(|&x| v(x)).collect(),
            total: v(self.total),
            weights: self.weights.clone(),
        }
    }
}

/// Sums the terms left to right: reconstruction, combined codebook,
/// weighted combined commitment, then each layer's codebook and weighted
/// commitment term.
pub(crate) fn assemble(
    g: &mut Graph,
    weights: &LossWeights,
    reconstruction: Var,
    combined: (Var, Var),
    layers: &[(Var, Var)],
) -> Result<LossVars> {
    let mut total = reconstruction;
    if weights.combined {
        total = g.add(total, combined.0)?;
        let c = g.scale(combined.1, weights.beta0)?;
        total = g.add(total, c)?;
    }
    for (&(cb, cm), &beta) in layers.iter().zip(&weights.betas) {
        total = g.add(total, cb)?;
        let c = g.scale(cm, beta)?;
        total = g.add(total, c)?;
    }
    Ok(LossVars {
        reconstruction,
        combined_codebook: combined.0,
        combined_commitment: combined.1,
        layer_codebook: layers.iter().map(|t| t.0).collect(),
        layer_commitment: layers.iter().map(|t| t.1).collect(),
        total,
        weights: weights.clone(),
    })
}

/// Every term of the objective, unweighted, plus the weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f32,
    pub combined_codebook: f32,
    pub combined_commitment: f32,
    pub layer_codebook: Vec<f32>,
    pub layer_commitment: Vec<f32>,
    pub total: f32,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Weighted sum of the parts, in f64.
    pub fn recomputed_total(&self) -> f64 {
        let w = &self.weights;
        let mut t = self.reconstruction as f64;
        if w.combined {
            t += self.combined_codebook as f64 + w.beta0 as f64 * self.combined_commitment as f64;
        }
        for ((&cb, &cm), &beta) in self.layer_codebook.iter().zip(&self.layer_commitment).zip(&w.betas) {
            t += cb as f64 + beta as f64 * cm as f64;
        }
        t
    }

    /// Checks `total` against [`recomputed_total`](Self::recomputed_total).
    pub fn check(&self, tol: f64) -> Result<()> {
        let r = self.recomputed_total();
        if (self.total as f64 - r).abs() > tol * r.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "loss total {} disagrees with recomputed sum {r}",
                self.total
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.reconstruction.is_finite()
            && self.combined_codebook.is_finite()
            && self.combined_commitment.is_finite()
            && self.layer_codebook.iter().chain(&self.layer_commitment).all(|v| v.is_finite())
    }

    /// Every quantization term, combined and per-layer.
    pub fn quantization_terms(&self) -> impl Iterator<Item = f32> + '_ {
        [self.combined_codebook, self.combined_commitment]
            .into_iter()
            .chain(self.layer_codebook.iter().copied())
            .chain(self.layer_commitment.iter().copied())
    }
}
