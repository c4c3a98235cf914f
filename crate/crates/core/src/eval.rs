//! TCAM-to-proposal localization and mAP@tIoU evaluation.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::config::{IouPreset, RunConfig};
use crate::dataset::{Dataset, GtSegment, Split};
use crate::model::{Model, VideoPrediction};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no ground-truth segments to evaluate against")]
    NoGroundTruth,
    #[error("no IoU thresholds given")]
    NoThresholds,
    #[error("proposals line {line}: {detail}")]
    Proposal { line: usize, detail: String },
}

/// One localized action instance, times in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub video: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// `|a∩b| / |a∪b|` for `[start, end]` segments; 0 for an empty union.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Post-processing constants.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSettings {
    pub class_threshold: f64,
    pub thresholds: Vec<f64>,
    pub outer_fraction: f64,
    pub nms_iou: f64,
}

impl ProposalSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ProposalSettings {
            class_threshold: cfg.class_threshold,
            thresholds: cfg.proposal_thresholds.clone(),
            outer_fraction: cfg.outer_fraction,
            nms_iou: cfg.nms_iou,
        }
    }
}

impl Default for ProposalSettings {
    fn default() -> Self {
        ProposalSettings::from_config(&RunConfig::default())
    }
}

/// Min-max normalization to `[0, 1]`; a constant sequence maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Maximal runs `[i, j]` (inclusive) of values strictly above `threshold`.
pub fn runs_above(values: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &v) in values.iter().enumerate() {
        match (v > threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, values.len() - 1));
    }
    runs
}

/// Mean inside `[i, j]` minus the mean over flanks of `max(1, round(f·len))`
/// snippets on each side (clipped; 0 when both flanks are empty).
pub fn outer_inner_contrast(values: &[f64], run: (usize, usize), outer_fraction: f64) -> f64 {
    let (i, j) = run;
    let len = j - i + 1;
    let inner = values[i..=j].iter().sum::<f64>() / len as f64;
    let flank = ((outer_fraction * len as f64).round() as usize).max(1);
    let left = &values[i.saturating_sub(flank)..i];
    let right = &values[(j + 1).min(values.len())..(j + 1 + flank).min(values.len())];
    let n = left.len() + right.len();
    let outer = if n == 0 {
        0.0
    } else {
        (left.iter().sum::<f64>() + right.iter().sum::<f64>()) / n as f64
    };
    inner - outer
}

/// Multi-threshold proposals for one video, before NMS.
pub fn generate_proposals(
    pred: &VideoPrediction,
    video: &str,
    seconds_per_snippet: f64,
    settings: &ProposalSettings,
) -> Vec<Proposal> {
    let mut out = Vec::new();
    for c in 0..pred.classes {
        let video_score = pred.class_probs[c];
        if video_score < settings.class_threshold {
            continue;
        }
        let act = min_max_normalize(&pred.class_activation(c));
        for &thr in &settings.thresholds {
            for run in runs_above(&act, thr) {
                out.push(Proposal {
                    video: video.to_string(),
                    class: c,
                    start: run.0 as f64 * seconds_per_snippet,
                    end: (run.1 + 1) as f64 * seconds_per_snippet,
                    score: outer_inner_contrast(&act, run, settings.outer_fraction) + video_score,
                });
            }
        }
    }
    out
}

fn by_score_then_start(a: &Proposal, b: &Proposal) -> Ordering {
    b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start))
}

/// Greedy suppression within each `(video, class)` group: a proposal is
/// dropped when its IoU with a kept one exceeds `iou_threshold`.
pub fn nms(proposals: Vec<Proposal>, iou_threshold: f64) -> Vec<Proposal> {
    let mut groups: BTreeMap<(String, usize), Vec<Proposal>> = BTreeMap::new();
    for p in proposals {
        groups.entry((p.video.clone(), p.class)).or_default().push(p);
    }
    let mut kept = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(by_score_then_start);
        let mut keep: Vec<Proposal> = Vec::new();
        for p in group {
            if keep
                .iter()
                .all(|k| temporal_iou((k.start, k.end), (p.start, p.end)) <= iou_threshold)
            {
                keep.push(p);
            }
        }
        kept.extend(keep);
    }
    kept
}

/// Proposals of one video after NMS.
pub fn localize(
    pred: &VideoPrediction,
    video: &str,
    seconds_per_snippet: f64,
    settings: &ProposalSettings,
) -> Vec<Proposal> {
    nms(
        generate_proposals(pred, video, seconds_per_snippet, settings),
        settings.nms_iou,
    )
}

/// Ground truth keyed by video id.
pub type GroundTruth = BTreeMap<String, Vec<GtSegment>>;

pub fn ground_truth(dataset: &Dataset, split: Split) -> GroundTruth {
    dataset
        .split(split)
        .map(|v| (v.id.clone(), v.gt_segments.clone()))
        .collect()
}

/// All-point interpolated AP: area under the precision envelope.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &hit) in tp.iter().enumerate() {
        hits += usize::from(hit);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP of one class at one IoU threshold. Proposals are ranked by score
/// (ties by video id, then start); each takes the unmatched gt of its video
/// with the highest IoU at or above the threshold.
pub fn average_precision(proposals: &[&Proposal], gt: &BTreeMap<&str, Vec<(f64, f64)>>, threshold: f64) -> f64 {
    let num_gt: usize = gt.values().map(Vec::len).sum();
    let mut ranked: Vec<&Proposal> = proposals.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video.cmp(&b.video))
            .then(a.start.total_cmp(&b.start))
    });
    let mut used: BTreeMap<&str, Vec<bool>> = gt.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let tp: Vec<bool> = ranked
        .iter()
        .map(|p| {
            let Some(segs) = gt.get(p.video.as_str()) else {
                return false;
            };
            let flags = used.get_mut(p.video.as_str()).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (i, &seg) in segs.iter().enumerate() {
                if flags[i] {
                    continue;
                }
                let iou = temporal_iou((p.start, p.end), seg);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            match best {
                Some((i, _)) => {
                    flags[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    interpolated_ap(&tp, num_gt)
}

/// Per-class, per-threshold AP with the mean over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub class_names: Vec<String>,
    /// `ap[c][k]`; `None` for a class without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean AP per threshold.
    pub map: Vec<f64>,
}

/// Named averaging range `[lo, hi]` over thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct AvgRange {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
}

pub fn avg_ranges(preset: IouPreset) -> Vec<AvgRange> {
    let r = |label: &str, lo, hi| AvgRange {
        label: label.to_string(),
        lo,
        hi,
    };
    match preset {
        IouPreset::Thumos => vec![
            r("AVG (0.1:0.5)", 0.1, 0.5),
            r("AVG (0.3:0.7)", 0.3, 0.7),
            r("AVG (0.1:0.7)", 0.1, 0.7),
        ],
        IouPreset::Activitynet => vec![r("AVG (0.5:0.95)", 0.5, 0.95)],
    }
}

/// mAP over all classes with ground truth. With `include_absent`, classes
/// without ground truth count as AP 0.
pub fn mean_average_precision(
    proposals: &[Proposal],
    gt: &GroundTruth,
    class_names: &[String],
    thresholds: &[f64],
    include_absent: bool,
) -> Result<EvalReport, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::NoThresholds);
    }
    if gt.values().all(Vec::is_empty) {
        return Err(EvalError::NoGroundTruth);
    }
    let classes = class_names.len();
    let mut ap = vec![vec![None; thresholds.len()]; classes];
    for (c, row) in ap.iter_mut().enumerate() {
        let class_gt: BTreeMap<&str, Vec<(f64, f64)>> = gt
            .iter()
            .map(|(v, segs)| {
                let s: Vec<(f64, f64)> = segs.iter().filter(|s| s.class == c).map(|s| (s.start, s.end)).collect();
                (v.as_str(), s)
            })
            .filter(|(_, s)| !s.is_empty())
            .collect();
        let class_props: Vec<&Proposal> = proposals.iter().filter(|p| p.class == c).collect();
        if class_gt.is_empty() {
            if include_absent {
                row.iter_mut().for_each(|v| *v = Some(0.0));
            }
            continue;
        }
        for (k, &thr) in thresholds.iter().enumerate() {
            row[k] = Some(average_precision(&class_props, &class_gt, thr));
        }
    }
    let map = (0..thresholds.len())
        .map(|k| {
            let vals: Vec<f64> = ap.iter().filter_map(|row| row[k]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        class_names: class_names.to_vec(),
        ap,
        map,
    })
}

impl EvalReport {
    /// Mean of the per-threshold mAPs whose threshold lies in `[lo, hi]`.
    pub fn range_average(&self, lo: f64, hi: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .thresholds
            .iter()
            .zip(&self.map)
            .filter(|(t, _)| **t >= lo - 1e-9 && **t <= hi + 1e-9)
            .map(|(_, m)| *m)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Per-threshold mAP followed by the preset's averages, in percent.
    pub fn table_row(&self, preset: IouPreset) -> Vec<(String, f64)> {
        let mut row: Vec<(String, f64)> = self
            .thresholds
            .iter()
            .zip(&self.map)
            .map(|(t, m)| (format_threshold(*t), 100.0 * m))
            .collect();
        for r in avg_ranges(preset) {
            if let Some(v) = self.range_average(r.lo, r.hi) {
                row.push((r.label, 100.0 * v));
            }
        }
        row
    }

    /// One header line and one data row in percent, led by `method`.
    pub fn to_csv(&self, preset: IouPreset, method: &str, config_hash: &str) -> String {
        let row = self.table_row(preset);
        let mut out = String::from("method");
        for (label, _) in &row {
            let _ = write!(out, ",{label}");
        }
        out.push_str(",config_hash\n");
        out.push_str(method);
        for (_, v) in &row {
            let _ = write!(out, ",{v:.4}");
        }
        let _ = writeln!(out, ",{config_hash}");
        out
    }

    /// Human-readable table with per-class AP and the mAP row.
    pub fn to_text(&self, preset: IouPreset, config_hash: &str) -> String {
        let mut out = format!("config_hash {config_hash}\n");
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(8);
        let _ = write!(out, "{:<width$}", "class");
        for t in &self.thresholds {
            let _ = write!(out, " {:>7}", format_threshold(*t));
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.ap) {
            let _ = write!(out, "{name:<width$}");
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, " {:>7.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(out, " {:>7}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<width$}", "mAP");
        for m in &self.map {
            let _ = write!(out, " {:>7.2}", 100.0 * m);
        }
        out.push('\n');
        for r in avg_ranges(preset) {
            if let Some(v) = self.range_average(r.lo, r.hi) {
                let _ = writeln!(out, "{} {:.2}", r.label, 100.0 * v);
            }
        }
        out
    }
}

pub fn format_threshold(t: f64) -> String {
    let s = format!("{t:.2}");
    let s = s.trim_end_matches('0');
    if s.ends_with('.') {
        format!("{s}0")
    } else {
        s.to_string()
    }
}

pub const PROPOSAL_HEADER: &str = "video_id,class_name,t_s,t_e,q";

/// `video_id,class_name,t_s,t_e,q` with six decimals, sorted by video then
/// descending score.
pub fn write_proposals<W: Write>(w: &mut W, proposals: &[Proposal], class_names: &[String]) -> std::io::Result<()> {
    let mut sorted: Vec<&Proposal> = proposals.iter().collect();
    sorted.sort_by(|a, b| {
        a.video
            .cmp(&b.video)
            .then_with(|| by_score_then_start(a, b))
            .then(a.class.cmp(&b.class))
    });
    writeln!(w, "{PROPOSAL_HEADER}")?;
    for p in sorted {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6}",
            p.video, class_names[p.class], p.start, p.end, p.score
        )?;
    }
    Ok(())
}

/// Parses a file written by [`write_proposals`]. The header line is optional.
pub fn read_proposals(text: &str, class_names: &[String]) -> Result<Vec<Proposal>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line == PROPOSAL_HEADER) {
            continue;
        }
        let bad = |detail: String| EvalError::Proposal { line: i + 1, detail };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [video, class, start, end, score] = fields[..] else {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        };
        let class = class_names
            .iter()
            .position(|n| n == class)
            .ok_or_else(|| bad(format!("unknown class `{class}`")))?;
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("bad number `{s}`")))
        };
        let (start, end, score) = (num(start)?, num(end)?, num(score)?);
        if end < start {
            return Err(bad(format!("end {end} before start {start}")));
        }
        out.push(Proposal {
            video: video.to_string(),
            class,
            start,
            end,
            score,
        });
    }
    Ok(out)
}

/// Runs the model over one split and localizes every video.
pub fn predict_split(model: &Model, dataset: &Dataset, split: Split) -> crate::model::Result<Vec<Proposal>> {
    let settings = ProposalSettings::from_config(&model.config);
    let mut out = Vec::new();
    for video in dataset.split(split) {
        let pred = model.predict(video)?;
        out.extend(localize(&pred, &video.id, video.seconds_per_snippet, &settings));
    }
    Ok(out)
}

/// Predicts and scores one split with the model's own thresholds.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split) -> Result<(EvalReport, Vec<Proposal>), EvaluateError> {
    let proposals = predict_split(model, dataset, split)?;
    let gt = ground_truth(dataset, split);
    let report = mean_average_precision(
        &proposals,
        &gt,
        &dataset.class_names,
        &model.config.iou_preset.thresholds(),
        model.config.include_absent_classes,
    )?;
    Ok((report, proposals))
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
