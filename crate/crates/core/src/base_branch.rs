//! Embedding layer plus the class-agnostic attention (CA) and multiple
//! instance learning (MIL) heads.
//!
//! TCAM columns `0..C` are the action classes and column `C` is background.

use rand::Rng;

use crate::params::{fan_in_uniform, BoundParams};
use crate::tensor::{Graph, ParamStore, ReduceKind, Result, Tensor, Var};

pub const EMBED_WEIGHT: &str = "embed.weight";
pub const EMBED_BIAS: &str = "embed.bias";

/// Parameter names of one classification head (CA + MIL).
#[derive(Clone, Debug)]
pub struct HeadNames {
    pub ca_weight: String,
    pub ca_bias: String,
    pub mil_weight: String,
    pub mil_bias: String,
}

impl HeadNames {
    pub fn new(prefix: &str) -> Self {
        HeadNames {
            ca_weight: format!("{prefix}.ca.weight"),
            ca_bias: format!("{prefix}.ca.bias"),
            mil_weight: format!("{prefix}.mil.weight"),
            mil_bias: format!("{prefix}.mil.bias"),
        }
    }

    pub fn base() -> Self {
        Self::new("head")
    }

    /// Separate head for the refined branches when heads are not shared.
    pub fn pseudo() -> Self {
        Self::new("pseudo_head")
    }
}

pub fn init_embedding<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) {
    store.insert(EMBED_WEIGHT, fan_in_uniform(rng, &[3, dim, dim], 3 * dim));
    store.insert(EMBED_BIAS, Tensor::zeros(&[dim]));
}

pub fn init_head<R: Rng + ?Sized>(store: &mut ParamStore, names: &HeadNames, dim: usize, classes: usize, rng: &mut R) {
    store.insert(names.ca_weight.clone(), fan_in_uniform(rng, &[dim, 1], dim));
    store.insert(names.ca_bias.clone(), Tensor::zeros(&[1]));
    store.insert(names.mil_weight.clone(), fan_in_uniform(rng, &[dim, classes + 1], dim));
    store.insert(names.mil_bias.clone(), Tensor::zeros(&[classes + 1]));
}

/// Temporal convolution (kernel 3, padding 1) followed by ReLU; `T×D → T×D`.
pub fn embed(g: &mut Graph, p: &BoundParams, features: Var) -> Result<Var> {
    let conv = g.conv1d(features, p.get(EMBED_WEIGHT)?)?;
    let biased = g.add_row(conv, p.get(EMBED_BIAS)?)?;
    g.relu(biased)
}

/// Foreground probability per snippet, `T×1`, strictly inside (0, 1).
pub fn ca_attention(g: &mut Graph, p: &BoundParams, head: &HeadNames, embedded: Var) -> Result<Var> {
    let logit = g.matmul(embedded, p.get(&head.ca_weight)?)?;
    let logit = g.add_row(logit, p.get(&head.ca_bias)?)?;
    g.sigmoid(logit)
}

/// Per-snippet class logits, `T×(C+1)`.
pub fn mil_tcam(g: &mut Graph, p: &BoundParams, head: &HeadNames, embedded: Var) -> Result<Var> {
    let logits = g.matmul(embedded, p.get(&head.mil_weight)?)?;
    g.add_row(logits, p.get(&head.mil_bias)?)
}

/// Pooled video-level logits (`C+1` each) of the three streams.
#[derive(Clone, Copy, Debug)]
pub struct VideoScores {
    /// Top-k mean of the raw TCAM.
    pub mil: Var,
    /// Top-k mean of the attention-suppressed TCAM `λ·T`.
    pub ca: Var,
    /// Top-k mean of the complement `(1-λ)·T`, which should look like background.
    pub ca_background: Var,
}

impl VideoScores {
    pub fn mil_probs(&self, g: &mut Graph) -> Result<Vec<f64>> {
        let p = g.softmax(self.mil, 0)?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn ca_probs(&self, g: &mut Graph) -> Result<Vec<f64>> {
        let p = g.softmax(self.ca, 0)?;
        Ok(g.value(p).data().to_vec())
    }
}

/// Top-k temporal mean pooling of the TCAM streams, `k = pool_k`.
pub fn video_scores(g: &mut Graph, tcam: Var, attention: Var, pool_k: usize) -> Result<VideoScores> {
    let mil = g.reduce(tcam, 0, ReduceKind::TopKMean(pool_k))?;
    let suppressed = g.mul_col(tcam, attention)?;
    let ca = g.reduce(suppressed, 0, ReduceKind::TopKMean(pool_k))?;
    let complement = g.affine(attention, -1.0, 1.0)?;
    let background = g.mul_col(tcam, complement)?;
    let ca_background = g.reduce(background, 0, ReduceKind::TopKMean(pool_k))?;
    Ok(VideoScores { mil, ca, ca_background })
}
