//! Finite-difference suites shared by the gradient tests and the
//! acceptance runner. Each returns the worst relative error over
//! [`SEEDS`] random draws.

use issf::base_branch::{self, HeadNames};
use issf::boundary_refine::{self, ChannelUnitNames};
use issf::config::{FusionMode, Modules, RunConfig};
use issf::dataset::synthetic::{generate_synthetic, SyntheticSpec};
use issf::discrim_enhance::{memory_interact, Candidate, MemoryBank};
use issf::model::Model;
use issf::pseudo_supervision::{loss_cls, loss_kd};
use issf::tensor::{Graph, ReduceKind, Tensor, Var};
use issf::train::{video_loss, video_loss_fixed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, param_grad_check, param_grad_check_with, project, rand_off_zero, rand_tensor, FD_STEP_DEEP};

pub const SEEDS: u64 = 10;
pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;

type OpCase = (&'static str, Vec<Vec<usize>>, bool, fn(&mut Graph, &[Var]) -> Var);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], false, |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        }),
        ("transpose", vec![vec![3, 4]], false, |g, v| g.transpose(v[0]).unwrap()),
        ("add", vec![vec![3, 4], vec![3, 4]], false, |g, v| {
            g.add(v[0], v[1]).unwrap()
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], false, |g, v| {
            g.sub(v[0], v[1]).unwrap()
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], false, |g, v| {
            g.mul(v[0], v[1]).unwrap()
        }),
        ("add_row", vec![vec![3, 4], vec![4]], false, |g, v| {
            g.add_row(v[0], v[1]).unwrap()
        }),
        ("mul_col", vec![vec![3, 4], vec![3, 1]], false, |g, v| {
            g.mul_col(v[0], v[1]).unwrap()
        }),
        ("affine", vec![vec![3, 4]], false, |g, v| {
            g.affine(v[0], -1.5, 0.25).unwrap()
        }),
        ("scale", vec![vec![3, 4]], false, |g, v| g.scale(v[0], 0.7).unwrap()),
        ("abs", vec![vec![3, 4]], true, |g, v| g.abs(v[0]).unwrap()),
        ("relu", vec![vec![3, 4]], true, |g, v| g.relu(v[0]).unwrap()),
        ("sigmoid", vec![vec![3, 4]], false, |g, v| g.sigmoid(v[0]).unwrap()),
        ("softmax_rows", vec![vec![3, 4]], false, |g, v| {
            g.softmax(v[0], 1).unwrap()
        }),
        ("softmax_cols", vec![vec![3, 4]], false, |g, v| {
            g.softmax(v[0], 0).unwrap()
        }),
        ("log_softmax_rows", vec![vec![3, 4]], false, |g, v| {
            g.log_softmax(v[0], 1).unwrap()
        }),
        ("log_softmax_cols", vec![vec![3, 4]], false, |g, v| {
            g.log_softmax(v[0], 0).unwrap()
        }),
        ("sum_axis0", vec![vec![3, 4]], false, |g, v| {
            g.reduce(v[0], 0, ReduceKind::Sum).unwrap()
        }),
        ("mean_axis1", vec![vec![3, 4]], false, |g, v| {
            g.reduce(v[0], 1, ReduceKind::Mean).unwrap()
        }),
        ("max_axis0", vec![vec![5, 3]], false, |g, v| {
            g.reduce(v[0], 0, ReduceKind::Max).unwrap()
        }),
        ("topk_mean_axis0", vec![vec![6, 3]], false, |g, v| {
            g.reduce(v[0], 0, ReduceKind::TopKMean(2)).unwrap()
        }),
        ("topk_mean_axis1", vec![vec![3, 6]], false, |g, v| {
            g.reduce(v[0], 1, ReduceKind::TopKMean(4)).unwrap()
        }),
        ("sum_all", vec![vec![3, 4]], false, |g, v| g.sum_all(v[0]).unwrap()),
        ("mean_all", vec![vec![3, 4]], false, |g, v| g.mean_all(v[0]).unwrap()),
        ("gather_rows", vec![vec![4, 3]], false, |g, v| {
            g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()
        }),
        ("conv1d", vec![vec![5, 4], vec![3, 4, 3]], false, |g, v| {
            g.conv1d(v[0], v[1]).unwrap()
        }),
        ("affinity", vec![vec![3, 4], vec![5, 4]], false, |g, v| {
            boundary_refine::affinity(g, v[0], v[1], true).unwrap()
        }),
        ("temporal_interact", vec![vec![3, 4], vec![5, 4]], false, |g, v| {
            boundary_refine::temporal_interact(g, v[0], v[1], false).unwrap()
        }),
    ]
}

/// Worst error per primitive op.
pub fn ops() -> Vec<(&'static str, f64)> {
    let mut results = Vec::new();
    for (name, shapes, off_zero, op) in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    if off_zero {
                        rand_off_zero(&mut rng, s)
                    } else {
                        rand_tensor(&mut rng, s, -2.0, 2.0)
                    }
                })
                .collect();
            let mut probe = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
            let out = op(&mut probe, &vars);
            let r = rand_tensor(&mut rng, probe.value(out).shape(), -1.0, 1.0);
            let err = grad_check(&inputs, |g, v| {
                let out = op(g, v);
                project(g, out, &r)
            });
            worst = worst.max(err);
        }
        results.push((name, worst));
    }
    results
}

pub fn embedding_and_heads() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = issf::tensor::ParamStore::new();
        base_branch::init_embedding(&mut store, 8, &mut rng);
        base_branch::init_head(&mut store, &HeadNames::base(), 8, 2, &mut rng);
        // non-zero biases so ReLU inputs avoid exact zeros
        for name in ["embed.bias", "head.ca.bias", "head.mil.bias"] {
            let len = store.get(name).unwrap().len();
            *store.get_mut(name).unwrap() = rand_tensor(&mut rng, &[len], -0.3, 0.3);
        }
        let x = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let err = param_grad_check(&store, |g, p| {
            let xv = g.constant(x.clone());
            let e = base_branch::embed(g, p, xv).unwrap();
            let a = base_branch::ca_attention(g, p, &HeadNames::base(), e).unwrap();
            let t = base_branch::mil_tcam(g, p, &HeadNames::base(), e).unwrap();
            let sup = g.mul_col(t, a).unwrap();
            project(g, sup, &r)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn channel_unit() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = issf::tensor::ParamStore::new();
        let names = ChannelUnitNames::salient();
        boundary_refine::init_channel_unit(&mut store, &names, 8, 4, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[3, 8], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[3, 8], -1.0, 1.0);
        let err = param_grad_check(&store, |g, p| {
            let xv = g.param(x.clone());
            let out = boundary_refine::channel_interact(g, p, &names, xv).unwrap();
            project(g, out, &r)
        });
        worst = worst.max(err);
        let err = grad_check(std::slice::from_ref(&x), |g, v| {
            let p = issf::params::BoundParams::bind(g, &store, false);
            let out = boundary_refine::channel_interact(g, &p, &names, v[0]).unwrap();
            project(g, out, &r)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn memory_interaction() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = MemoryBank::new(2, 3, 4);
        for c in 0..2 {
            let cands = (0..3)
                .map(|i| Candidate {
                    feature: rand_tensor(&mut rng, &[4], -1.0, 1.0).into_data(),
                    score: 0.5 + 0.1 * i as f64,
                    video: "v".into(),
                    snippet: i,
                })
                .collect();
            bank.init_class(c, cands).unwrap();
        }
        let x = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let err = grad_check(&[x], |g, v| {
            let out = memory_interact(g, v[0], &bank, &[0, 1], true).unwrap();
            project(g, out, &r)
        });
        worst = worst.max(err);
    }
    worst
}

/// Two-snippet CA + MIL objective.
pub fn classification_loss() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tcam = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let att = rand_tensor(&mut rng, &[2, 1], 0.05, 0.95);
        let err = grad_check(&[tcam, att], |g, v| {
            let scores = base_branch::video_scores(g, v[0], v[1], 1).unwrap();
            loss_cls(g, &scores, &[true, false], 0.2).unwrap().total
        });
        worst = worst.max(err);
    }
    worst
}

pub fn distillation() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tcam = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let raw = rand_tensor(&mut rng, &[4, 3], 0.1, 1.0);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|t| {
                let s: f64 = raw.row(t).iter().sum();
                raw.row(t).iter().map(|v| v / s).collect()
            })
            .collect();
        let target = Tensor::from_rows(&rows).unwrap();
        let err = grad_check(&[tcam], |g, v| loss_kd(g, v[0], &target).unwrap());
        worst = worst.max(err);
    }
    worst
}

fn toy_video(seed: u64) -> issf::dataset::VideoRecord {
    let spec = SyntheticSpec {
        num_classes: 2,
        feature_dim: 8,
        train_videos_per_class: 1,
        test_videos_per_class: 0,
        min_snippets: 6,
        max_snippets: 6,
        min_segments: 1,
        max_segments: 1,
        min_action_len: 2,
        max_action_len: 3,
        min_background_len: 1,
        class_signal: 2.0,
        actionness: 1.0,
        boundary_contrast: 0.5,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap().dataset.videos.remove(0)
}

/// Full objective (base, refined and enhanced branches) on a `T = 6`,
/// `D = 8`, `C = 2` toy with an initialized memory.
pub fn full_objective() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let video = toy_video(seed);
        for (mode, shared) in [(FusionMode::WeightedSum, true), (FusionMode::Add, false)] {
            let cfg = RunConfig {
                modules: Modules::BaseBrmDem,
                memory_slots: 2,
                fusion_mode: mode,
                shared_head: shared,
                seed,
                ..RunConfig::toy()
            };
            let mut model = Model::init(&cfg, &["a".into(), "b".into()], 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for c in 0..2 {
                let cands = (0..2)
                    .map(|i| Candidate {
                        feature: rand_tensor(&mut rng, &[8], 0.0, 1.0).into_data(),
                        score: 0.9 - 0.1 * i as f64,
                        video: "m".into(),
                        snippet: i,
                    })
                    .collect();
                model.memory.as_mut().unwrap().init_class(c, cands).unwrap();
            }
            for name in model.params.names().cloned().collect::<Vec<_>>() {
                if name.ends_with("bias") {
                    let len = model.params.get(&name).unwrap().len();
                    *model.params.get_mut(&name).unwrap() = rand_tensor(&mut rng, &[len], -0.2, 0.2);
                }
            }
            // partition and pseudo label are stop-gradient inputs; capture them once
            let mut g = Graph::new();
            let p = issf::params::BoundParams::bind(&mut g, &model.params, false);
            let free = video_loss(&mut g, &p, &model, &video, true, &mut rng).unwrap();
            let fixed = free.pseudo.clone().unwrap();
            let mut h = Graph::new();
            let q = issf::params::BoundParams::bind(&mut h, &model.params, false);
            let same = video_loss_fixed(&mut h, &q, &model, &video, &fixed).unwrap();
            assert_eq!(g.value(free.total).item(), h.value(same.total).item());

            let store = model.params.clone();
            let err = param_grad_check_with(&store, FD_STEP_DEEP, |g, p| {
                video_loss_fixed(g, p, &model, &video, &fixed).unwrap().total
            });
            worst = worst.max(err);
        }
    }
    worst
}
