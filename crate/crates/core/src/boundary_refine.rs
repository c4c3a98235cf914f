//! Channel-wise and temporal interaction units and the salient / non-salient
//! fusion.

use rand::Rng;

use crate::config::FusionMode;
use crate::params::{fan_in_uniform, BoundParams};
use crate::saliency::SaliencyPartition;
use crate::tensor::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Parameter names of one channel unit `θ = FC(W₁)-ReLU-FC(W₂)`.
#[derive(Clone, Debug)]
pub struct ChannelUnitNames {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl ChannelUnitNames {
    pub fn new(prefix: &str) -> Self {
        ChannelUnitNames {
            w1: format!("{prefix}.fc1.weight"),
            b1: format!("{prefix}.fc1.bias"),
            w2: format!("{prefix}.fc2.weight"),
            b2: format!("{prefix}.fc2.bias"),
        }
    }

    pub fn salient() -> Self {
        Self::new("brm.salient")
    }

    pub fn non_salient() -> Self {
        Self::new("brm.non_salient")
    }
}

pub fn init_channel_unit<R: Rng + ?Sized>(
    store: &mut ParamStore,
    names: &ChannelUnitNames,
    dim: usize,
    r: usize,
    rng: &mut R,
) -> Result<()> {
    if r == 0 || !dim.is_multiple_of(r) {
        return Err(TensorError::Argument {
            op: "channel_unit",
            detail: format!("feature dim {dim} is not divisible by r = {r}"),
        });
    }
    let hidden = dim / r;
    store.insert(names.w1.clone(), fan_in_uniform(rng, &[dim, hidden], dim));
    store.insert(names.b1.clone(), Tensor::zeros(&[hidden]));
    store.insert(names.w2.clone(), fan_in_uniform(rng, &[hidden, dim], hidden));
    store.insert(names.b2.clone(), Tensor::zeros(&[dim]));
    Ok(())
}

/// `X̂ = softmax_channels(θ(X)) ⊗ X + X`, shape preserved.
pub fn channel_interact(g: &mut Graph, p: &BoundParams, names: &ChannelUnitNames, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.get(&names.w1)?)?;
    let h = g.add_row(h, p.get(&names.b1)?)?;
    let h = g.relu(h)?;
    let theta = g.matmul(h, p.get(&names.w2)?)?;
    let theta = g.add_row(theta, p.get(&names.b2)?)?;
    let gate = g.softmax(theta, 1)?;
    let gated = g.mul(gate, x)?;
    g.add(gated, x)
}

/// Row-stochastic affinity `softmax(query·keysᵀ)`, optionally scaled by `1/√D`.
pub fn affinity(g: &mut Graph, query: Var, keys: Var, scaled: bool) -> Result<Var> {
    let kt = g.transpose(keys)?;
    let mut logits = g.matmul(query, kt)?;
    if scaled {
        let dim = g.value(query).cols() as f64;
        logits = g.scale(logits, 1.0 / dim.sqrt())?;
    }
    g.softmax(logits, 1)
}

/// `softmax(query·keysᵀ)·keys`; output has the query's row count.
pub fn temporal_interact(g: &mut Graph, query: Var, keys: Var, scaled: bool) -> Result<Var> {
    let a = affinity(g, query, keys, scaled)?;
    g.matmul(a, keys)
}

/// Everything the refinement needs besides the features and the partition.
#[derive(Clone, Debug)]
pub struct RefineSettings {
    pub sigma: f64,
    pub mode: FusionMode,
    pub scaled: bool,
    pub salient: ChannelUnitNames,
    pub non_salient: ChannelUnitNames,
}

impl RefineSettings {
    pub fn new(sigma: f64, mode: FusionMode, scaled: bool) -> Self {
        RefineSettings {
            sigma,
            mode,
            scaled,
            salient: ChannelUnitNames::salient(),
            non_salient: ChannelUnitNames::non_salient(),
        }
    }
}

fn path(
    g: &mut Graph,
    p: &BoundParams,
    names: &ChannelUnitNames,
    features: Var,
    rows: &[usize],
    channel: bool,
    scaled: bool,
) -> Result<Var> {
    let subset = g.gather_rows(features, rows)?;
    let keys = if channel {
        channel_interact(g, p, names, subset)?
    } else {
        subset
    };
    temporal_interact(g, features, keys, scaled)
}

/// Fuses the salient-path and non-salient-path enhancements of `features`
/// (`T×D`) into `F̃` (`T×D`). An empty side falls back to the other path.
pub fn refine_boundaries(
    g: &mut Graph,
    p: &BoundParams,
    features: Var,
    partition: &SaliencyPartition,
    s: &RefineSettings,
) -> Result<Var> {
    let t = g.value(features).rows();
    if partition.len() != t {
        return Err(TensorError::Dimension {
            op: "refine_boundaries",
            detail: format!("partition covers {} snippets, features {t}", partition.len()),
        });
    }
    if s.mode == FusionMode::SelfAttention {
        return temporal_interact(g, features, features, s.scaled);
    }
    let salient = partition.salient();
    let non_salient = partition.non_salient();
    let channel = s.mode != FusionMode::TemporalOnly;
    let (want_a, want_b) = match s.mode {
        FusionMode::AOnly => (true, false),
        FusionMode::BOnly => (false, true),
        FusionMode::WeightedSum => (s.sigma > 0.0, s.sigma < 1.0),
        _ => (true, true),
    };
    let use_a = want_a && !salient.is_empty();
    let use_b = want_b && !non_salient.is_empty();
    let fa = if use_a {
        Some(path(g, p, &s.salient, features, &salient, channel, s.scaled)?)
    } else {
        None
    };
    let fb = if use_b {
        Some(path(g, p, &s.non_salient, features, &non_salient, channel, s.scaled)?)
    } else {
        None
    };
    match (fa, fb) {
        (Some(fa), Some(fb)) => match s.mode {
            FusionMode::Add => g.add(fa, fb),
            _ => {
                let wa = g.scale(fa, s.sigma)?;
                let wb = g.scale(fb, 1.0 - s.sigma)?;
                g.add(wa, wb)
            }
        },
        (Some(f), None) | (None, Some(f)) => Ok(f),
        (None, None) => {
            // the requested side is empty: use whichever side exists
            log::debug!("refinement path empty, falling back to the other path");
            if !salient.is_empty() {
                path(g, p, &s.salient, features, &salient, channel, s.scaled)
            } else {
                path(g, p, &s.non_salient, features, &non_salient, channel, s.scaled)
            }
        }
    }
}
