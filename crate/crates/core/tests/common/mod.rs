//! Independent oracles shared by the integration and acceptance tests:
//! central finite differences and a brute-force mAP reference.

#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeMap;

use issf::dataset::GtSegment;
use issf::eval::{GroundTruth, Proposal};
use issf::params::BoundParams;
use issf::tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
/// Deep compositions have small-gradient tensors where a 1e-6 step is
/// dominated by rounding.
pub const FD_STEP_DEEP: f64 = 1e-5;

pub fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries bounded away from zero, so `abs` and `relu` kinks are never crossed.
pub fn rand_off_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 0.2, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Largest relative error over `inputs` between reverse-mode gradients of a
/// scalar `f` and central differences.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (i, (input, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *n = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// As [`grad_check`] but over every tensor of a parameter store.
pub fn param_grad_check(store: &ParamStore, f: impl Fn(&mut Graph, &BoundParams) -> Var) -> f64 {
    param_grad_check_with(store, FD_STEP, f)
}

pub fn param_grad_check_with(store: &ParamStore, step: f64, f: impl Fn(&mut Graph, &BoundParams) -> Var) -> f64 {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, store, true);
    let out = f(&mut g, &p);
    let mut grads = g.backward(out).unwrap();
    let analytic: BTreeMap<String, Tensor> = p.collect(&g, &mut grads);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, s, false);
        let out = f(&mut g, &p);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for name in store.names() {
        let len = store.get(name).unwrap().len();
        let mut numeric = vec![0.0; len];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += step;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= step;
            *n = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let err = rel_error(analytic[name].data(), &numeric);
        if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
            eprintln!("{name}: {err:e}");
        }
        worst = worst.max(err);
    }
    worst
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any op into a scalar whose
/// gradient probes the whole Jacobian.
pub fn project(g: &mut Graph, out: Var, r: &Tensor) -> Var {
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv).unwrap();
    g.sum_all(prod).unwrap()
}

#[derive(Clone, Debug)]
pub struct RefProposal {
    pub video: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct RefGt {
    pub video: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

pub fn ref_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// True positives among the first `k` ranked proposals, replaying the
/// matching from scratch: each proposal takes the unmatched ground truth of
/// its video with the highest IoU at or above `thr`.
fn true_positives(ranked: &[&RefProposal], gt: &[&RefGt], k: usize, thr: f64) -> usize {
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for p in &ranked[..k] {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.video != p.video {
                continue;
            }
            let iou = ref_iou((p.start, p.end), (g.start, g.end));
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

/// All-point interpolated AP by exhaustive evaluation of every cutoff.
pub fn brute_ap(props: &[&RefProposal], gt: &[&RefGt], thr: f64) -> f64 {
    let mut ranked: Vec<&RefProposal> = props.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video.cmp(&b.video))
            .then_with(|| a.start.total_cmp(&b.start))
    });
    let n = ranked.len();
    let tp: Vec<usize> = (0..=n).map(|k| true_positives(&ranked, gt, k, thr)).collect();
    let precision = |k: usize| tp[k] as f64 / k as f64;
    let mut ap = 0.0;
    for k in 1..=n {
        if tp[k] > tp[k - 1] {
            let best = (k..=n).map(precision).fold(0.0, f64::max);
            ap += best / gt.len() as f64;
        }
    }
    ap
}

/// Mean over classes that have ground truth, one value per threshold.
pub fn brute_map(props: &[RefProposal], gt: &[RefGt], classes: usize, thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&thr| {
            let mut aps = Vec::new();
            for c in 0..classes {
                let cg: Vec<&RefGt> = gt.iter().filter(|g| g.class == c).collect();
                if cg.is_empty() {
                    continue;
                }
                let cp: Vec<&RefProposal> = props.iter().filter(|p| p.class == c).collect();
                aps.push(brute_ap(&cp, &cg, thr));
            }
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect()
}

/// Random tiny instance: at most 5 proposals and 3 ground-truth segments
/// per class over two videos. Scores are coarse so ties occur.
pub fn random_instance<R: Rng>(rng: &mut R, classes: usize) -> (Vec<RefProposal>, Vec<RefGt>) {
    let videos = ["va", "vb"];
    let seg = |rng: &mut R| {
        let s = (rng.random_range(0..20) as f64) * 0.5;
        let len = (rng.random_range(1..8) as f64) * 0.5;
        (s, s + len)
    };
    let mut props = Vec::new();
    let mut gt = Vec::new();
    for c in 0..classes {
        for _ in 0..rng.random_range(0..=3) {
            let (start, end) = seg(rng);
            gt.push(RefGt {
                video: videos[rng.random_range(0..2)].to_string(),
                class: c,
                start,
                end,
            });
        }
        for _ in 0..rng.random_range(0..=5) {
            let (start, end) = seg(rng);
            props.push(RefProposal {
                video: videos[rng.random_range(0..2)].to_string(),
                class: c,
                start,
                end,
                score: (rng.random_range(0..6) as f64) / 5.0,
            });
        }
    }
    (props, gt)
}

/// The same instance in library types.
pub fn to_library(props: &[RefProposal], gt: &[RefGt]) -> (Vec<Proposal>, GroundTruth) {
    let proposals = props
        .iter()
        .map(|p| Proposal {
            video: p.video.clone(),
            class: p.class,
            start: p.start,
            end: p.end,
            score: p.score,
        })
        .collect();
    let mut truth = GroundTruth::new();
    for g in gt {
        truth.entry(g.video.clone()).or_default().push(GtSegment {
            class: g.class,
            start: g.start,
            end: g.end,
        });
    }
    (proposals, truth)
}
