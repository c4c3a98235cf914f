//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::grad::{self, E2E_TOL, OP_TOL};
use common::{brute_map, random_instance, to_library};
use issf::boundary_refine::{self, init_channel_unit, refine_boundaries, ChannelUnitNames, RefineSettings};
use issf::config::{FusionMode, MemoryMode, RunConfig};
use issf::dataset::synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use issf::discrim_enhance::{momentum_eta, Candidate, MemoryBank};
use issf::eval::{mean_average_precision, temporal_iou};
use issf::params::BoundParams;
use issf::saliency::{
    assign_labels, diff_values, difference_rule_k, random_partition, score_partition, DiffMetric, SaliencyPartition,
};
use issf::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "gradient correctness", gradients),
        (2, "saliency recovery", saliency_recovery),
        (3, "partition invariant", partition_invariant),
        (4, "interaction-unit contracts", interaction_units),
        (5, "memory closed form", memory_closed_form),
        (6, "mAP oracle equivalence", map_oracle),
        (7, "module stacking ordering", module_ordering),
        (8, "ablation table rows", ablation_rows),
        (9, "determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {tag} {name}: {} [{secs:.1} s]", result.detail);
        failed += usize::from(!result.pass);
    }
    let _ = panic::take_hook();
    if failed == 0 {
        println!("acceptance: all 9 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 9 criteria fail");
        ExitCode::FAILURE
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, err) in grad::ops() {
        if err >= worst_op.1 {
            worst_op = (name, err);
        }
    }
    for (name, err) in [
        ("embedding+heads", grad::embedding_and_heads()),
        ("channel unit", grad::channel_unit()),
        ("memory interaction", grad::memory_interaction()),
    ] {
        if err >= worst_op.1 {
            worst_op = (name, err);
        }
    }
    let cls = grad::classification_loss();
    let kd = grad::distillation();
    let full = grad::full_objective();
    let worst_e2e = cls.max(kd).max(full);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op.1 < OP_TOL && worst_e2e < E2E_TOL && secs < 60.0,
        format!(
            "worst op {:.2e} ({}) < {OP_TOL:e}; worst loss {worst_e2e:.2e} (full objective {full:.2e}) < {E2E_TOL:e}; \
             {} seeds each; {secs:.1} s < 60 s",
            worst_op.1,
            worst_op.0,
            grad::SEEDS
        ),
    )
}

fn synthetic(noise_sigma: f64, boundary_contrast: f64, per_class: usize) -> SyntheticDataset {
    generate_synthetic(&SyntheticSpec {
        noise_sigma,
        boundary_contrast,
        train_videos_per_class: per_class,
        test_videos_per_class: 0,
        seed: 11,
        ..SyntheticSpec::default()
    })
    .expect("valid spec")
}

fn top_pairs(data: &SyntheticDataset, video: usize, k: usize) -> Vec<usize> {
    let v = &data.dataset.videos[video];
    let tau = diff_values(&v.features.to_f64(), v.features.dim(), DiffMetric::L1).expect("T >= 2");
    let mut top = tau.ranked_pairs()[..k].to_vec();
    top.sort_unstable();
    top
}

fn saliency_recovery() -> Outcome {
    let start = Instant::now();
    let clean = synthetic(0.0, 8.0, 17);
    let exact = (0..50)
        .filter(|&v| {
            let planted = clean.transitions(v);
            top_pairs(&clean, v, planted.len()) == planted
        })
        .count();
    let noisy = synthetic(1.0, 8.0, 17);
    let (mut hit, mut total) = (0, 0);
    for v in 0..50 {
        let planted = noisy.transitions(v);
        let top = top_pairs(&noisy, v, planted.len());
        total += planted.len();
        hit += planted
            .iter()
            .filter(|&&p| top.iter().any(|&s| s.abs_diff(p) <= 1))
            .count();
    }
    let recall = hit as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        exact == 50 && recall >= 0.9 && secs < 30.0,
        format!(
            "zero noise exact on {exact}/50 videos; SNR 8 recall within one snippet {:.1}% >= 90%",
            100.0 * recall
        ),
    )
}

fn partition_violations(p: &SaliencyPartition, t: usize, ratio: f64) -> usize {
    let sum_b = p.labels.iter().filter(|&&b| b).count();
    usize::from(p.len() != t)
        + usize::from(sum_b != p.realized_k())
        + usize::from(p.realized_k() != difference_rule_k(t, ratio))
        + usize::from(p.salient().len() + p.non_salient().len() != t)
}

fn partition_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..1000 {
        let t = rng.random_range(2..=200);
        let ratio = rng.random_range(0.01..=1.0);
        let features: Vec<f64> = (0..t * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tau = diff_values(&features, 4, DiffMetric::L1).expect("T >= 2");
        violations += partition_violations(&assign_labels(&tau, ratio), t, ratio);
        violations += partition_violations(&random_partition(t, ratio, &mut rng), t, ratio);
        let scores: Vec<f64> = features.iter().step_by(4).copied().collect();
        violations += partition_violations(&score_partition(&scores, ratio), t, ratio);
    }
    outcome(
        violations == 0,
        format!("{violations} violations over 1000 random (T, ratio) draws and three partition rules"),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .expect("shape")
}

fn refine(store: &ParamStore, x: &Tensor, part: &SaliencyPartition, settings: &RefineSettings) -> Tensor {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, store, false);
    let xv = g.constant(x.clone());
    let out = refine_boundaries(&mut g, &p, xv, part, settings).expect("refine");
    g.value(out).clone()
}

fn interaction_units() -> Outcome {
    let (d, r) = (8, 4);
    let mut worst_row: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    let mut sigma_exact = true;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for scaled in [false, true] {
            let mut g = Graph::new();
            let q = g.constant(random_matrix(&mut rng, 7, d));
            let k = g.constant(random_matrix(&mut rng, 5, d));
            let a = boundary_refine::affinity(&mut g, q, k, scaled).expect("affinity");
            for row in g.value(a).data().chunks(5) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }

        let mut zero = ParamStore::new();
        init_channel_unit(&mut zero, &ChannelUnitNames::salient(), d, r, &mut rng).expect("init");
        let names: Vec<String> = zero.names().cloned().collect();
        for n in names {
            zero.get_mut(&n).expect("param").data_mut().fill(0.0);
        }
        let x = random_matrix(&mut rng, 6, d);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &zero, false);
        let xv = g.constant(x.clone());
        let out = boundary_refine::channel_interact(&mut g, &p, &ChannelUnitNames::salient(), xv).expect("unit");
        for (o, v) in g.value(out).data().iter().zip(x.data()) {
            worst_zero = worst_zero.max((o - v * (1.0 + 1.0 / d as f64)).abs());
        }

        let mut store = ParamStore::new();
        init_channel_unit(&mut store, &ChannelUnitNames::salient(), d, r, &mut rng).expect("init");
        init_channel_unit(&mut store, &ChannelUnitNames::non_salient(), d, r, &mut rng).expect("init");
        let t = 9;
        let x = random_matrix(&mut rng, t, d);
        let part = random_partition(t, 0.5, &mut rng);
        let a_path = refine(&store, &x, &part, &RefineSettings::new(0.5, FusionMode::AOnly, false));
        let b_path = refine(&store, &x, &part, &RefineSettings::new(0.5, FusionMode::BOnly, false));
        let one = refine(
            &store,
            &x,
            &part,
            &RefineSettings::new(1.0, FusionMode::WeightedSum, false),
        );
        let none = refine(
            &store,
            &x,
            &part,
            &RefineSettings::new(0.0, FusionMode::WeightedSum, false),
        );
        sigma_exact &= one == a_path && none == b_path && a_path != b_path;
    }
    outcome(
        worst_row <= 1e-6 && worst_zero <= 1e-12 && sigma_exact,
        format!(
            "affinity row sums within {worst_row:.1e} of 1; zero-parameter channel unit off by {worst_zero:.1e}; \
             sigma 1 and 0 equal the single paths exactly: {sigma_exact}"
        ),
    )
}

fn candidate(feature: Vec<f64>, score: f64) -> Candidate {
    Candidate {
        feature,
        score,
        video: "v".into(),
        snippet: 0,
    }
}

fn memory_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let eta = 0.137;
    let mut worst: f64 = 0.0;
    for u in [1usize, 5, 20] {
        let m0: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut bank = MemoryBank::new(1, 1, d);
        bank.init_class(0, vec![candidate(m0.clone(), 0.2)]).expect("init");
        for _ in 0..u {
            bank.update_class(0, &[candidate(x.clone(), 0.3)], eta, MemoryMode::Ours)
                .expect("update");
        }
        for k in 0..d {
            let expected = x[k] + (1.0 - eta).powi(u as i32) * (m0[k] - x[k]);
            worst = worst.max((bank.slot(0, 0)[k] - expected).abs());
        }
    }
    let eta0 = 0.1;
    let mut worst_eta: f64 = 0.0;
    for total in [1usize, 10, 60, 180] {
        worst_eta = worst_eta.max((momentum_eta(eta0, 0, total) - eta0 * 2f64.ln()).abs());
        worst_eta = worst_eta.max((momentum_eta(eta0, total, total) - eta0 * (std::f64::consts::E + 1.0).ln()).abs());
    }
    outcome(
        worst <= 1e-9 && worst_eta <= 1e-12,
        format!("slot error {worst:.1e} for u in 1, 5, 20; eta endpoint error {worst_eta:.1e}"),
    )
}

fn map_oracle() -> Outcome {
    const CLASSES: usize = 3;
    let thresholds = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    let names: Vec<String> = (0..CLASSES).map(|c| format!("c{c}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 100 {
        let (props, gt) = random_instance(&mut rng, CLASSES);
        if gt.is_empty() {
            continue;
        }
        let (proposals, truth) = to_library(&props, &gt);
        let report = mean_average_precision(&proposals, &truth, &names, &thresholds, false).expect("gt present");
        for (a, b) in report.map.iter().zip(brute_map(&props, &gt, CLASSES, &thresholds)) {
            worst = worst.max((a - b).abs());
        }
        checked += 1;
    }
    let iou = temporal_iou((0.0, 2.0), (1.0, 3.0));
    outcome(
        worst <= 1e-9 && iou == 1.0 / 3.0,
        format!("max |library - brute force| {worst:.1e} over 100 instances; IoU([0,2],[1,3]) = {iou}"),
    )
}

fn issf(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_issf"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// `(label, AVG (0.1:0.7))` rows of an ablation summary.
fn summary_rows(path: &Path) -> Vec<(String, f64)> {
    let text = fs::read_to_string(path).expect("summary written");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == "AVG (0.1:0.7)")
        .expect("average column");
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[col].parse().expect("number"))
        })
        .collect()
}

fn module_ordering() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let start = Instant::now();
    let run = || -> Result<Vec<(String, f64)>, String> {
        issf(d, &["--seed", "0", "--out", "data", "synth"])?;
        fs::write(d.join("run.toml"), RunConfig::toy().to_toml()).map_err(|e| e.to_string())?;
        fs::write(
            d.join("grid.toml"),
            "data = \"data/manifest.txt\"\nout = \"ab\"\n[sweep]\nmodules = [\"base\", \"base+brm\", \"base+brm+dem\"]\n",
        )
        .map_err(|e| e.to_string())?;
        issf(d, &["--config", "run.toml", "--threads", "1", "ablate", "grid.toml"])?;
        Ok(summary_rows(&d.join("ab/summary.csv")))
    };
    let rows = match run() {
        Ok(rows) => rows,
        Err(e) => return outcome(false, e),
    };
    let secs = start.elapsed().as_secs_f64();
    let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let ordered = m.len() == 3 && m[0] < m[1] && m[1] < m[2];
    let gain = m.get(2).copied().unwrap_or(0.0) - m.first().copied().unwrap_or(0.0);
    outcome(
        ordered && gain >= 5.0 && secs < 600.0,
        format!(
            "avg mAP(0.1:0.7) {}; full gain over Base {gain:.2} >= 5; {secs:.1} s < 600 s",
            rows.iter()
                .map(|(l, v)| format!("{l} {v:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

const SMALL_SPEC: &str = "train_videos_per_class = 4\ntest_videos_per_class = 2\nseed = 5\n";
const QUICK_RUN: &str = "epochs = 3\nmemory_slots = 2\nlr = 0.001\n";

fn ablation_rows() -> Outcome {
    let tables: [(&str, &str, &[&str]); 4] = [
        (
            "diff",
            "diff = [\"random\", \"classification\", \"cosine\", \"l2\", \"l1\"]",
            &[
                "random",
                "classification",
                "cosine distance",
                "L2 distance",
                "L1 distance",
            ],
        ),
        (
            "modules",
            "modules = [\"base\", \"base+brm\", \"base+brm+dem\"]",
            &["Base", "Base + BRM", "Base + BRM + DEM"],
        ),
        (
            "fusion",
            "fusion_mode = [\"self\", \"b_only\", \"a_only\", \"add\", \"weighted_sum\", \"temporal_only\"]",
            &[
                "self",
                "w/o salient",
                "w/o non-salient",
                "salient + non-salient",
                "weighted sum",
                "temporal-level",
            ],
        ),
        (
            "memory",
            "memory_mode = [\"direct\", \"momentum_all\", \"ours\"]",
            &["direct update", "momentum update", "Ours"],
        ),
    ];
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let run = || -> Result<Vec<String>, String> {
        fs::write(d.join("spec.toml"), SMALL_SPEC).map_err(|e| e.to_string())?;
        fs::write(d.join("run.toml"), QUICK_RUN).map_err(|e| e.to_string())?;
        issf(d, &["--out", "data", "synth", "spec.toml"])?;
        let mut wrong = Vec::new();
        for (name, sweep, expected) in tables {
            let grid = format!("data = \"data/manifest.txt\"\nout = \"ab_{name}\"\n[sweep]\n{sweep}\n");
            fs::write(d.join(format!("{name}.toml")), grid).map_err(|e| e.to_string())?;
            issf(d, &["--config", "run.toml", "ablate", &format!("{name}.toml")])?;
            let labels: Vec<String> = summary_rows(&d.join(format!("ab_{name}/summary.csv")))
                .into_iter()
                .map(|r| r.0)
                .collect();
            if labels != expected {
                wrong.push(format!("{name}: {labels:?}"));
            }
        }
        Ok(wrong)
    };
    match run() {
        Ok(wrong) if wrong.is_empty() => {
            outcome(true, "diff (5 rows), modules (3), fusion (6), memory (3) tables match")
        }
        Ok(wrong) => outcome(false, wrong.join("; ")),
        Err(e) => outcome(false, e),
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let run = || -> Result<Vec<String>, String> {
        fs::write(d.join("spec.toml"), SMALL_SPEC).map_err(|e| e.to_string())?;
        fs::write(d.join("run.toml"), "epochs = 10\nmemory_slots = 4\nlr = 0.001\n").map_err(|e| e.to_string())?;
        issf(d, &["--out", "data", "synth", "spec.toml"])?;
        for run in ["a", "b"] {
            let out = format!("{run}/train");
            issf(
                d,
                &[
                    "--config",
                    "run.toml",
                    "--seed",
                    "7",
                    "--out",
                    &out,
                    "train",
                    "--data",
                    "data/manifest.txt",
                ],
            )?;
            let ckpt = format!("{run}/train/model.ckpt");
            let eval = format!("{run}/eval");
            issf(
                d,
                &[
                    "--out",
                    &eval,
                    "eval",
                    "--data",
                    "data/manifest.txt",
                    "--checkpoint",
                    &ckpt,
                ],
            )?;
        }
        let files = [
            "train/model.ckpt",
            "train/train_log.csv",
            "eval/report.csv",
            "eval/report.txt",
            "eval/proposals.csv",
        ];
        let mut differ = Vec::new();
        for f in files {
            let a = fs::read(d.join("a").join(f)).map_err(|e| e.to_string())?;
            let b = fs::read(d.join("b").join(f)).map_err(|e| e.to_string())?;
            if a != b {
                differ.push(f.to_string());
            }
        }
        Ok(differ)
    };
    match run() {
        Ok(differ) if differ.is_empty() => outcome(
            true,
            "checkpoint, train log, reports and proposals are byte-identical across two runs",
        ),
        Ok(differ) => outcome(false, format!("differing files: {}", differ.join(", "))),
        Err(e) => outcome(false, e),
    }
}
