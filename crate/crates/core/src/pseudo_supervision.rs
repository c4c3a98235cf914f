//! Pseudo-label TCAMs and the training losses.
//!
//! `L = L_cls + L_kd + λ·L_att`, with `L_cls = L_CA + θ_mil·L_MIL`.

use crate::base_branch::VideoScores;
use crate::tensor::{Graph, ReduceKind, Result, Tensor, TensorError, Var};

/// `-Σ target·log_softmax(logits)` for one pooled score vector.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: &[f64]) -> Result<Var> {
    let logp = g.log_softmax(logits, 0)?;
    let t = g.constant(Tensor::vector(target.to_vec())?);
    let prod = g.mul(logp, t)?;
    let s = g.sum_all(prod)?;
    g.scale(s, -1.0)
}

/// Normalized label over the `C+1` columns; `None` for an all-zero label.
pub fn foreground_target(label: &[bool]) -> Option<Vec<f64>> {
    let n = label.iter().filter(|&&b| b).count();
    if n == 0 {
        return None;
    }
    let mut t: Vec<f64> = label.iter().map(|&b| if b { 1.0 / n as f64 } else { 0.0 }).collect();
    t.push(0.0);
    Some(t)
}

/// Everything-background target over the `C+1` columns.
pub fn background_target(classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes + 1];
    t[classes] = 1.0;
    t
}

/// The two classification terms, kept apart for logging.
#[derive(Clone, Copy, Debug)]
pub struct ClsParts {
    pub ca: Var,
    pub mil: Var,
    pub total: Var,
}

/// `L_CA + θ_mil·L_MIL`. The CA term pairs the attention-suppressed stream
/// with the label and the complement stream with the background class.
pub fn loss_cls(g: &mut Graph, scores: &VideoScores, label: &[bool], theta_mil: f64) -> Result<ClsParts> {
    let fg = foreground_target(label).ok_or_else(|| TensorError::Contract("all-zero video label".into()))?;
    let bg = background_target(label.len());
    let ca_fg = cross_entropy(g, scores.ca, &fg)?;
    let ca_bg = cross_entropy(g, scores.ca_background, &bg)?;
    let ca = g.add(ca_fg, ca_bg)?;
    let mil = cross_entropy(g, scores.mil, &fg)?;
    let weighted = g.scale(mil, theta_mil)?;
    let total = g.add(ca, weighted)?;
    Ok(ClsParts { ca, mil, total })
}

/// Mean over snippets of `KL(target_t ‖ softmax(tcam_t))`. `target` is a
/// constant, so no gradient reaches whatever produced it.
pub fn loss_kd(g: &mut Graph, tcam: Var, target: &Tensor) -> Result<Var> {
    let shape = g.value(tcam).shape().to_vec();
    if target.shape() != shape.as_slice() {
        return Err(TensorError::Dimension {
            op: "loss_kd",
            detail: format!("target {:?} vs tcam {:?}", target.shape(), shape),
        });
    }
    let rows = shape[0] as f64;
    let neg_entropy: f64 = target.data().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let logq = g.log_softmax(tcam, 1)?;
    let t = g.constant(target.clone());
    let cross = g.mul(logq, t)?;
    let cross = g.sum_all(cross)?;
    g.affine(cross, -1.0 / rows, neg_entropy / rows)
}

/// `-mean(top-s λ) + mean(bottom-s λ)` for a `T×1` attention column.
pub fn loss_att(g: &mut Graph, attention: Var, s: usize) -> Result<Var> {
    let top = g.reduce(attention, 0, ReduceKind::TopKMean(s))?;
    let neg = g.scale(attention, -1.0)?;
    let neg_bottom = g.reduce(neg, 0, ReduceKind::TopKMean(s))?;
    let sum = g.add(top, neg_bottom)?;
    g.scale(sum, -1.0)
}

/// Per-snippet class distributions of each TCAM summed and renormalized
/// to rows summing to one. Returned as a detached constant.
pub fn pseudo_tcams(g: &Graph, tcams: &[Var]) -> Result<Tensor> {
    let first = tcams
        .first()
        .ok_or_else(|| TensorError::Contract("pseudo labels need at least one TCAM".into()))?;
    let shape = g.value(*first).shape().to_vec();
    let cols = shape[1];
    let mut sum = vec![0.0; shape[0] * cols];
    for &v in tcams {
        let t = g.value(v);
        if t.shape() != shape.as_slice() {
            return Err(TensorError::Dimension {
                op: "pseudo_tcams",
                detail: format!("{:?} vs {:?}", t.shape(), shape),
            });
        }
        for (s, row) in sum.chunks_mut(cols).zip(t.data().chunks(cols)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += (v - m).exp() / z;
            }
        }
    }
    for row in sum.chunks_mut(cols) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(shape, sum)
}

/// Scalar parts of the objective for one video.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub kd: Option<Var>,
    pub att: Var,
}

/// `L_cls + L_kd + λ·L_att`; a non-finite part is reported by name.
pub fn total_loss(g: &mut Graph, parts: &LossParts, lambda_att: f64) -> Result<Var> {
    for (name, v) in [
        ("l_cls", Some(parts.cls)),
        ("l_kd", parts.kd),
        ("l_att", Some(parts.att)),
    ] {
        if let Some(v) = v {
            if !g.value(v).is_finite() {
                return Err(TensorError::Contract(format!("non-finite loss part {name}")));
            }
        }
    }
    let att = g.scale(parts.att, lambda_att)?;
    let mut total = g.add(parts.cls, att)?;
    if let Some(kd) = parts.kd {
        total = g.add(total, kd)?;
    }
    Ok(total)
}
