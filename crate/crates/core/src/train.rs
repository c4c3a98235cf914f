//! Training loop: base-only warm-up, memory initialization, then joint
//! training with pseudo-label supervision.
//!
//! One step is forward over a batch, backward, Adam, then the memory update
//! with `momentum_eta(e)`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MemoryMode, RunConfig};
use crate::dataset::{Dataset, Split, VideoRecord};
use crate::discrim_enhance::{momentum_eta, random_candidates, top_candidates, Candidate, MemoryBank};
use crate::model::{
    features_tensor, forward_base, forward_pseudo, select_partition, BaseForward, Model, ModelError, Result,
};
use crate::params::BoundParams;
use crate::pseudo_supervision::{loss_att, loss_cls, loss_kd, pseudo_tcams, total_loss, LossParts};
use crate::saliency::SaliencyPartition;
use crate::tensor::{Adam, Graph, Tensor, TensorError, Var};

/// Mean loss terms over the training videos of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_kd: f64,
    /// `λ·L_att`.
    pub l_att_weighted: f64,
    pub total: f64,
    /// Memory momentum used this epoch; 0 without a memory bank.
    pub eta: f64,
}

pub const LOG_HEADER: &str = "epoch,l_cls,l_kd,l_att_weighted,total,eta,config_hash";

/// CSV with [`LOG_HEADER`]; every row carries the config hash.
pub fn write_log_csv<W: Write>(w: &mut W, log: &[EpochLog], config_hash: &str) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    write_log_rows(w, log, config_hash)
}

/// Rows only, for appending to an existing log.
pub fn write_log_rows<W: Write>(w: &mut W, log: &[EpochLog], config_hash: &str) -> std::io::Result<()> {
    for e in log {
        writeln!(
            w,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            e.epoch, e.l_cls, e.l_kd, e.l_att_weighted, e.total, e.eta, config_hash
        )?;
    }
    Ok(())
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(TensorError) -> ModelError {
    move |e| match e {
        TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. } | TensorError::Contract(_) => {
            ModelError::Diverged {
                epoch,
                batch,
                detail: e.to_string(),
            }
        }
        other => ModelError::Tensor(other),
    }
}

/// Salient snippets of `video` offered to the memory of each labeled class,
/// scored by the base TCAM's class probability.
fn memory_candidates(
    g: &Graph,
    base: &BaseForward,
    partition: &SaliencyPartition,
    video: &VideoRecord,
    out: &mut BTreeMap<usize, Vec<Candidate>>,
) {
    let tcam = g.value(base.tcam);
    let e = g.value(base.embedded);
    for c in video.label_classes() {
        for t in partition.salient() {
            let row = tcam.row(t);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out.entry(c).or_default().push(Candidate {
                feature: e.row(t).to_vec(),
                score: (row[c] - m).exp() / z,
                video: video.id.clone(),
                snippet: t,
            });
        }
    }
}

/// Fills the memory from the current base branch over all training videos.
pub fn init_memory(model: &mut Model, videos: &[&VideoRecord], rng: &mut ChaCha8Rng) -> Result<()> {
    let Some(mut bank) = model.memory.take() else {
        return Ok(());
    };
    let mut candidates: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
    for video in videos {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &model.params, false);
        let x = g.constant(features_tensor(video)?);
        let base = forward_base(&mut g, &p, &model.config, x)?;
        let partition = select_partition(&g, &model.config, &base, rng)?;
        memory_candidates(&g, &base, &partition, video, &mut candidates);
    }
    for c in 0..bank.classes() {
        bank.init_class(c, candidates.remove(&c).unwrap_or_default())?;
    }
    model.memory = Some(bank);
    Ok(())
}

fn update_memory(
    bank: &mut MemoryBank,
    candidates: BTreeMap<usize, Vec<Candidate>>,
    eta: f64,
    mode: MemoryMode,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = bank.slots();
    for (c, cands) in candidates {
        let chosen = match mode {
            MemoryMode::MomentumAll => random_candidates(cands, n, rng),
            MemoryMode::Ours | MemoryMode::Direct => top_candidates(cands, n),
        };
        bank.update_class(c, &chosen, eta, mode)?;
    }
    Ok(())
}

#[derive(Default)]
struct Sums {
    cls: f64,
    kd: f64,
    att: f64,
    total: f64,
    videos: usize,
}

/// Stop-gradient inputs of the distillation term: the saliency partition
/// and the pseudo label `T^p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTarget {
    pub partition: SaliencyPartition,
    pub target: Tensor,
}

/// Loss terms of one video, built on a shared graph.
pub struct VideoLoss {
    pub total: Var,
    pub cls: Var,
    pub kd: Option<Var>,
    /// Unweighted `L_att`.
    pub att: Var,
    pub base: BaseForward,
    /// Present in joint epochs.
    pub pseudo: Option<PseudoTarget>,
}

enum Pseudo<'a, R: ?Sized> {
    Off,
    Compute(&'a mut R),
    Fixed(&'a PseudoTarget),
}

/// Training objective of one video. Outside joint epochs only the base
/// branch terms are built.
pub fn video_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &BoundParams,
    model: &Model,
    video: &VideoRecord,
    joint: bool,
    rng: &mut R,
) -> Result<VideoLoss> {
    let pseudo = if joint { Pseudo::Compute(rng) } else { Pseudo::Off };
    build_loss(g, p, model, video, pseudo)
}

/// Joint objective with the partition and pseudo label held fixed.
pub fn video_loss_fixed(
    g: &mut Graph,
    p: &BoundParams,
    model: &Model,
    video: &VideoRecord,
    fixed: &PseudoTarget,
) -> Result<VideoLoss> {
    build_loss::<ChaCha8Rng>(g, p, model, video, Pseudo::Fixed(fixed))
}

fn build_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &BoundParams,
    model: &Model,
    video: &VideoRecord,
    pseudo: Pseudo<'_, R>,
) -> Result<VideoLoss> {
    let cfg = &model.config;
    let x = g.constant(features_tensor(video)?);
    let base = forward_base(g, p, cfg, x)?;
    let mut cls = loss_cls(g, &base.scores, &video.label, cfg.theta_mil)?.total;
    let att = loss_att(g, base.attention, cfg.att_k(video.num_snippets()))?;
    let (partition, fixed_target) = match pseudo {
        Pseudo::Off => return finish(g, cfg, base, cls, None, att, None),
        Pseudo::Compute(rng) => (select_partition(g, cfg, &base, rng)?, None),
        Pseudo::Fixed(f) => (f.partition.clone(), Some(f.target.clone())),
    };
    let labels = video.label_classes();
    let branches = forward_pseudo(g, p, model, base.embedded, &partition, &labels)?;
    let target = match fixed_target {
        Some(t) => t,
        None => {
            let tcams: Vec<Var> = branches.iter().map(|b| b.tcam).collect();
            pseudo_tcams(g, &tcams)?
        }
    };
    let kd = loss_kd(g, base.tcam, &target)?;
    if cfg.refined_cls_loss {
        for b in &branches {
            let extra = loss_cls(g, &b.scores, &video.label, cfg.theta_mil)?;
            cls = g.add(cls, extra.total)?;
        }
    }
    finish(
        g,
        cfg,
        base,
        cls,
        Some(kd),
        att,
        Some(PseudoTarget { partition, target }),
    )
}

fn finish(
    g: &mut Graph,
    cfg: &RunConfig,
    base: BaseForward,
    cls: Var,
    kd: Option<Var>,
    att: Var,
    pseudo: Option<PseudoTarget>,
) -> Result<VideoLoss> {
    let total = total_loss(g, &LossParts { cls, kd, att }, cfg.lambda_att)?;
    Ok(VideoLoss {
        total,
        cls,
        kd,
        att,
        base,
        pseudo,
    })
}

/// Trains a fresh model on the training split.
pub fn train(dataset: &Dataset, config: &RunConfig) -> Result<(Model, Vec<EpochLog>)> {
    train_with(dataset, config, |_| {})
}

/// As [`train`], reporting each finished epoch to `progress`.
pub fn train_with(
    dataset: &Dataset,
    config: &RunConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = Model::init(config, &dataset.class_names, dataset.feature_dim)?;
    let videos: Vec<&VideoRecord> = dataset.split(Split::Train).collect();
    if config.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if videos.is_empty() {
        return Err(ModelError::Mismatch("dataset has no training videos".into()));
    }
    let cfg = config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.lr);
    let warmup = cfg.warmup_epochs();
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let joint = epoch >= warmup && cfg.modules.has_brm();
        if joint && epoch == warmup {
            init_memory(&mut model, &videos, &mut rng)?;
        }
        let eta = if model.memory.is_some() {
            momentum_eta(cfg.eta0, epoch, cfg.epochs)
        } else {
            0.0
        };
        order.shuffle(&mut rng);
        let mut sums = Sums::default();
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let to_err = diverged(epoch, batch);
            let mut g = Graph::new();
            let p = BoundParams::bind(&mut g, &model.params, true);
            let mut totals: Vec<Var> = Vec::with_capacity(chunk.len());
            let mut candidates: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
            for &i in chunk {
                let video = videos[i];
                let vl = video_loss(&mut g, &p, &model, video, joint, &mut rng).map_err(|e| match e {
                    ModelError::Tensor(t) => to_err(t),
                    other => other,
                })?;
                if let (Some(pseudo), true) = (&vl.pseudo, model.memory.is_some()) {
                    memory_candidates(&g, &vl.base, &pseudo.partition, video, &mut candidates);
                }
                sums.cls += g.value(vl.cls).item();
                sums.kd += vl.kd.map_or(0.0, |v| g.value(v).item());
                sums.att += cfg.lambda_att * g.value(vl.att).item();
                sums.total += g.value(vl.total).item();
                sums.videos += 1;
                totals.push(vl.total);
            }
            let mut loss = totals[0];
            for &v in &totals[1..] {
                loss = g.add(loss, v).map_err(&to_err)?;
            }
            let loss = g.scale(loss, 1.0 / totals.len() as f64).map_err(&to_err)?;
            let mut grads = g.backward(loss).map_err(&to_err)?;
            let grads = p.collect(&g, &mut grads);
            adam.step(&mut model.params, &grads).map_err(&to_err)?;
            if let Some(bank) = model.memory.as_mut() {
                if joint {
                    update_memory(bank, candidates, eta, cfg.memory_mode, &mut rng)?;
                }
            }
        }
        let n = sums.videos as f64;
        let entry = EpochLog {
            epoch,
            l_cls: sums.cls / n,
            l_kd: sums.kd / n,
            l_att_weighted: sums.att / n,
            total: sums.total / n,
            eta,
        };
        log::debug!(
            "epoch {epoch}: total {:.6} (cls {:.6}, kd {:.6}, att {:.6})",
            entry.total,
            entry.l_cls,
            entry.l_kd,
            entry.l_att_weighted
        );
        progress(&entry);
        log.push(entry);
    }
    Ok((model, log))
}
