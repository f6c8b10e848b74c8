use super::IndexMap;
use crate::error::{Error, Result};

/// Selection statistics for one codebook layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerUsage {
    /// Selection count for each of the layer's codewords (`m^layer` of them).
    pub histogram: Vec<u64>,
    pub perplexity: f64,
    pub used_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsageStats {
    pub layers: Vec<LayerUsage>,
    pub total: u64,
}

impl LayerUsage {
    fn from_histogram(histogram: Vec<u64>) -> Self {
        let total: u64 = histogram.iter().sum();
        let entropy: f64 = histogram
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        let used = histogram.iter().filter(|&&c| c > 0).count();
        LayerUsage {
            used_fraction: used as f64 / histogram.len() as f64,
            perplexity: entropy.exp(),
            histogram,
        }
    }
}

/// Per-layer codeword usage over a set of index maps. Layer `i` (1-based)
/// histograms all `m^i` codewords of that layer.
pub fn usage_stats(maps: &[IndexMap]) -> Result<UsageStats> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("usage_stats needs at least one index map".into()))?;
    let (n, m) = (first.layers(), first.size());
    let mut hist: Vec<Vec<u64>> = (1..=n).map(|i| vec![0u64; m.pow(i as u32)]).collect();
    let mut total = 0u64;
    for map in maps {
        if map.layers() != n || map.size() != m {
            return Err(Error::InvalidArgument("index maps come from different codebook shapes".into()));
        }
        for loc in 0..map.len() {
            let path = map.path_slice(loc);
            let mut row = 0usize;
            for (i, &k) in path.iter().enumerate() {
                row = row * m + k as usize;
                hist[i][row] += 1;
            }
            total += 1;
        }
    }
    Ok(UsageStats {
        layers: hist.into_iter().map(LayerUsage::from_histogram).collect(),
        total,
    })
}
