//! The full network: parameters, memory bank and the per-video forward pass
//! shared by training and inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::base_branch::{self, HeadNames, VideoScores};
use crate::boundary_refine::{self, ChannelUnitNames, RefineSettings};
use crate::config::{ConfigError, RunConfig, SaliencySource, TcamSource};
use crate::dataset::{DatasetError, VideoRecord};
use crate::discrim_enhance::{memory_interact, MemoryBank, MemoryError};
use crate::params::BoundParams;
use crate::pseudo_supervision::pseudo_tcams;
use crate::saliency::{self, SaliencyPartition};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("model mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Predicted classes whose video score reaches this value take part in
/// memory interaction at inference.
pub const INFERENCE_MEMORY_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub dim: usize,
    pub params: ParamStore,
    pub memory: Option<MemoryBank>,
}

impl Model {
    /// Seeded initialization; the parameter set depends only on the module
    /// switches, `D` and `C`.
    pub fn init(config: &RunConfig, class_names: &[String], dim: usize) -> Result<Model> {
        config.validate_for_dim(dim)?;
        let classes = class_names.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        base_branch::init_embedding(&mut params, dim, &mut rng);
        base_branch::init_head(&mut params, &HeadNames::base(), dim, classes, &mut rng);
        if config.modules.has_brm() {
            boundary_refine::init_channel_unit(&mut params, &ChannelUnitNames::salient(), dim, config.r, &mut rng)?;
            boundary_refine::init_channel_unit(&mut params, &ChannelUnitNames::non_salient(), dim, config.r, &mut rng)?;
            if !config.shared_head {
                base_branch::init_head(&mut params, &HeadNames::pseudo(), dim, classes, &mut rng);
            }
        }
        let memory = config
            .modules
            .has_dem()
            .then(|| MemoryBank::new(classes, config.memory_slots, dim));
        Ok(Model {
            config: config.clone(),
            class_names: class_names.to_vec(),
            dim,
            params,
            memory,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pseudo_head(&self) -> HeadNames {
        if self.config.shared_head {
            HeadNames::base()
        } else {
            HeadNames::pseudo()
        }
    }

    pub fn refine_settings(&self) -> RefineSettings {
        RefineSettings::new(self.config.sigma, self.config.fusion_mode, self.config.attention_scale)
    }

    /// Inference over one video with frozen parameters and memory.
    pub fn predict(&self, video: &VideoRecord) -> Result<VideoPrediction> {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &self.params, false);
        let x = g.constant(features_tensor(video)?);
        let base = forward_base(&mut g, &p, &self.config, x)?;
        let class_probs = base.scores.ca_probs(&mut g)?[..self.num_classes()].to_vec();
        let attention = g.value(base.attention).data().to_vec();
        let distribution = match self.config.tcam_source {
            TcamSource::Base => {
                let sm = g.softmax(base.tcam, 1)?;
                g.value(sm).clone()
            }
            TcamSource::Pseudo if self.config.modules.has_brm() => {
                let predicted: Vec<usize> = (0..self.num_classes())
                    .filter(|&c| class_probs[c] >= INFERENCE_MEMORY_THRESHOLD)
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_1f3e);
                let partition = select_partition(&g, &self.config, &base, &mut rng)?;
                let branches = forward_pseudo(&mut g, &p, self, base.embedded, &partition, &predicted)?;
                let tcams: Vec<Var> = branches.iter().map(|b| b.tcam).collect();
                pseudo_tcams(&g, &tcams)?
            }
            TcamSource::Pseudo => {
                let sm = g.softmax(base.tcam, 1)?;
                g.value(sm).clone()
            }
        };
        let classes = self.num_classes();
        let t = video.num_snippets();
        let mut activation = vec![0.0; t * classes];
        for s in 0..t {
            for c in 0..classes {
                activation[s * classes + c] = attention[s] * distribution.at(s, c);
            }
        }
        Ok(VideoPrediction {
            class_probs,
            attention,
            activation,
            classes,
        })
    }
}

/// Per-video inference output used by localization.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    /// Video-level probability per action class.
    pub class_probs: Vec<f64>,
    /// Foreground attention per snippet.
    pub attention: Vec<f64>,
    /// Row-major `T×C` action activation `λ_t·p_t(c)`.
    pub activation: Vec<f64>,
    pub classes: usize,
}

impl VideoPrediction {
    pub fn snippets(&self) -> usize {
        self.attention.len()
    }

    pub fn class_activation(&self, class: usize) -> Vec<f64> {
        self.activation.chunks(self.classes).map(|row| row[class]).collect()
    }

    /// Best action activation per snippet.
    pub fn action_score(&self) -> Vec<f64> {
        self.activation
            .chunks(self.classes)
            .map(|row| row.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

pub fn features_tensor(video: &VideoRecord) -> std::result::Result<Tensor, TensorError> {
    Tensor::matrix(video.num_snippets(), video.features.dim(), video.features.to_f64())
}

/// Base-branch outputs of one video.
#[derive(Clone, Copy, Debug)]
pub struct BaseForward {
    pub embedded: Var,
    pub attention: Var,
    pub tcam: Var,
    pub scores: VideoScores,
}

pub fn forward_base(g: &mut Graph, p: &BoundParams, cfg: &RunConfig, x: Var) -> Result<BaseForward> {
    let head = HeadNames::base();
    let embedded = base_branch::embed(g, p, x)?;
    let attention = base_branch::ca_attention(g, p, &head, embedded)?;
    let tcam = base_branch::mil_tcam(g, p, &head, embedded)?;
    let k = cfg.pool_k(g.value(x).rows());
    let scores = base_branch::video_scores(g, tcam, attention, k)?;
    Ok(BaseForward {
        embedded,
        attention,
        tcam,
        scores,
    })
}

/// Salient / non-salient split of the embedded features under the
/// configured source.
pub fn select_partition<R: Rng + ?Sized>(
    g: &Graph,
    cfg: &RunConfig,
    base: &BaseForward,
    rng: &mut R,
) -> Result<SaliencyPartition> {
    let e = g.value(base.embedded);
    let t = e.rows();
    Ok(match cfg.diff {
        SaliencySource::Random => saliency::random_partition(t, cfg.salient_ratio, rng),
        SaliencySource::Classification => {
            let tcam = g.value(base.tcam);
            let classes = tcam.cols() - 1;
            let scores: Vec<f64> = (0..t)
                .map(|s| {
                    let row = tcam.row(s);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    row[..classes].iter().map(|v| (v - m).exp() / z).fold(0.0, f64::max)
                })
                .collect();
            saliency::score_partition(&scores, cfg.salient_ratio)
        }
        source => {
            let metric = source.metric().expect("difference source");
            let tau = saliency::diff_values(e.data(), e.cols(), metric).ok_or_else(|| {
                ModelError::Tensor(TensorError::Argument {
                    op: "saliency",
                    detail: format!("needs at least 2 snippets, got {t}"),
                })
            })?;
            saliency::assign_labels_with(&tau, cfg.salient_ratio, cfg.pair_mark)
        }
    })
}

/// Head outputs on refined (`F̃`) or enhanced (`F̂`) features.
#[derive(Clone, Copy, Debug)]
pub struct PseudoBranch {
    pub features: Var,
    pub attention: Var,
    pub tcam: Var,
    pub scores: VideoScores,
}

fn head_branch(g: &mut Graph, p: &BoundParams, model: &Model, features: Var) -> Result<PseudoBranch> {
    let head = model.pseudo_head();
    let attention = base_branch::ca_attention(g, p, &head, features)?;
    let tcam = base_branch::mil_tcam(g, p, &head, features)?;
    let k = model.config.pool_k(g.value(features).rows());
    let scores = base_branch::video_scores(g, tcam, attention, k)?;
    Ok(PseudoBranch {
        features,
        attention,
        tcam,
        scores,
    })
}

/// Refinement branch, then the memory branch when the model has one.
/// `classes` selects the memory rows used as keys.
pub fn forward_pseudo(
    g: &mut Graph,
    p: &BoundParams,
    model: &Model,
    embedded: Var,
    partition: &SaliencyPartition,
    classes: &[usize],
) -> Result<Vec<PseudoBranch>> {
    let refined = boundary_refine::refine_boundaries(g, p, embedded, partition, &model.refine_settings())?;
    let mut out = vec![head_branch(g, p, model, refined)?];
    if let Some(bank) = &model.memory {
        let enhanced = memory_interact(g, refined, bank, classes, model.config.attention_scale)?;
        out.push(head_branch(g, p, model, enhanced)?);
    }
    Ok(out)
}
