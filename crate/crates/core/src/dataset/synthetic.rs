//! Synthetic videos with planted action segments.
//!
//! Each video alternates background and action segments. A segment has one
//! prototype vector and its snippets are `prototype + N(0, noise_sigma²)`.
//! Prototypes are built in a random orthonormal basis of the feature space:
//!
//! * one "actionness" direction shared by all action classes,
//! * one direction per class,
//! * the remaining directions carry a per-segment nuisance offset.
//!
//! The nuisance part is rescaled where needed so that temporally adjacent
//! prototypes are at least `boundary_contrast·√D` apart in L2. This makes
//! `boundary_contrast / noise_sigma` the signal-to-noise ratio of segment
//! boundaries, while `class_signal / noise_sigma` controls how hard it is to
//! tell classes apart from a single snippet.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, FeatureMatrix, GtSegment, Result, Split, VideoRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_videos_per_class: usize,
    pub test_videos_per_class: usize,
    pub min_snippets: usize,
    pub max_snippets: usize,
    /// Number of action segments per video.
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_action_len: usize,
    pub max_action_len: usize,
    pub min_background_len: usize,
    pub boundary_contrast: f64,
    pub noise_sigma: f64,
    /// Offset of class prototypes along their class direction.
    pub class_signal: f64,
    /// Offset of every action prototype along the shared action direction.
    pub actionness: f64,
    /// Chance that an extra action segment belongs to a different class.
    pub second_class_prob: f64,
    pub seconds_per_snippet: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 3,
            feature_dim: 32,
            train_videos_per_class: 20,
            test_videos_per_class: 10,
            min_snippets: 36,
            max_snippets: 44,
            min_segments: 1,
            max_segments: 3,
            min_action_len: 4,
            max_action_len: 10,
            min_background_len: 2,
            boundary_contrast: 8.0,
            noise_sigma: 1.0,
            class_signal: 10.0,
            actionness: 6.0,
            second_class_prob: 0.15,
            seconds_per_snippet: 0.64,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DatasetError::Spec(m));
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        if self.feature_dim < self.num_classes + 2 {
            return fail(format!(
                "feature_dim {} leaves no nuisance directions for {} classes",
                self.feature_dim, self.num_classes
            ));
        }
        if self.min_snippets < 2 || self.min_snippets > self.max_snippets {
            return fail(format!(
                "bad snippet range {}..={}",
                self.min_snippets, self.max_snippets
            ));
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return fail(format!(
                "bad segment range {}..={}",
                self.min_segments, self.max_segments
            ));
        }
        if self.min_action_len == 0 || self.min_action_len > self.max_action_len {
            return fail(format!(
                "bad action length range {}..={}",
                self.min_action_len, self.max_action_len
            ));
        }
        if self.min_background_len == 0 {
            return fail("min_background_len must be at least 1".into());
        }
        let needed = self.max_segments * self.min_action_len + (self.max_segments + 1) * self.min_background_len;
        if needed > self.min_snippets {
            return fail(format!(
                "{} segments need at least {needed} snippets but videos may have only {}",
                self.max_segments, self.min_snippets
            ));
        }
        for (name, v) in [
            ("boundary_contrast", self.boundary_contrast),
            ("noise_sigma", self.noise_sigma),
            ("class_signal", self.class_signal),
            ("actionness", self.actionness),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.second_class_prob) {
            return fail("second_class_prob must lie in [0, 1]".into());
        }
        if self.seconds_per_snippet.is_nan() || self.seconds_per_snippet <= 0.0 {
            return fail("seconds_per_snippet must be positive".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class_{c}")).collect()
    }
}

/// Snippet range `[start, end)` with its class (`None` for background).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedSegment {
    pub start: usize,
    pub end: usize,
    pub class: Option<usize>,
}

/// Generated dataset plus the snippet-level layout of every video.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub layouts: Vec<Vec<PlantedSegment>>,
}

impl SyntheticDataset {
    /// Pair indices `i` (between snippets `i` and `i+1`) where a segment changes.
    pub fn transitions(&self, video: usize) -> Vec<usize> {
        self.layouts[video].iter().skip(1).map(|s| s.start - 1).collect()
    }

    /// Per-snippet class (`None` for background).
    pub fn snippet_classes(&self, video: usize) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        for seg in &self.layouts[video] {
            out.extend(std::iter::repeat_n(seg.class, seg.end - seg.start));
        }
        out
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Splits `total` into `parts` non-negative integers.
fn random_partition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    basis: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn layout(&mut self, primary: usize) -> Vec<PlantedSegment> {
        let s = self.spec;
        let t = self.rng.random_range(s.min_snippets..=s.max_snippets);
        let n_actions = self.rng.random_range(s.min_segments..=s.max_segments);
        let mut lens: Vec<usize> = (0..n_actions)
            .map(|_| self.rng.random_range(s.min_action_len..=s.max_action_len))
            .collect();
        let bg_floor = (n_actions + 1) * s.min_background_len;
        while lens.iter().sum::<usize>() + bg_floor > t {
            let (i, _) = lens
                .iter()
                .enumerate()
                .max_by_key(|&(i, &l)| (l, std::cmp::Reverse(i)))
                .unwrap();
            lens[i] -= 1;
        }
        let spare = t - lens.iter().sum::<usize>() - bg_floor;
        let bg: Vec<usize> = random_partition(&mut self.rng, spare, n_actions + 1)
            .into_iter()
            .map(|x| x + s.min_background_len)
            .collect();

        let mut classes = vec![primary];
        for _ in 1..n_actions {
            let c = if s.num_classes > 1 && self.rng.random_bool(s.second_class_prob) {
                let mut others: Vec<usize> = (0..s.num_classes).filter(|&c| c != primary).collect();
                others.shuffle(&mut self.rng);
                others[0]
            } else {
                primary
            };
            classes.push(c);
        }

        let mut segments = Vec::new();
        let mut at = 0;
        for i in 0..=n_actions {
            segments.push(PlantedSegment {
                start: at,
                end: at + bg[i],
                class: None,
            });
            at += bg[i];
            if i < n_actions {
                segments.push(PlantedSegment {
                    start: at,
                    end: at + lens[i],
                    class: Some(classes[i]),
                });
                at += lens[i];
            }
        }
        debug_assert_eq!(at, t);
        segments
    }

    fn prototypes(&mut self, layout: &[PlantedSegment]) -> Vec<Vec<f64>> {
        let s = self.spec;
        let d = s.feature_dim;
        let nuisance_dirs = d - 1 - s.num_classes;
        let min_dist = s.boundary_contrast * (d as f64).sqrt();
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(layout.len());
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        for seg in layout {
            let signal: Vec<f64> = match seg.class {
                Some(c) => self.basis[0]
                    .iter()
                    .zip(&self.basis[1 + c])
                    .map(|(a, b)| s.actionness * a + s.class_signal * b)
                    .collect(),
                None => vec![0.0; d],
            };
            let mut coeffs: Vec<f64> = gaussian_vec(&mut self.rng, nuisance_dirs)
                .into_iter()
                .map(|x| x * s.boundary_contrast)
                .collect();
            if let Some((prev_signal, prev_coeffs)) = &prev {
                // signal and nuisance live in orthogonal subspaces
                let ds2: f64 = signal.iter().zip(prev_signal).map(|(a, b)| (a - b) * (a - b)).sum();
                let dn2: f64 = coeffs.iter().zip(prev_coeffs).map(|(a, b)| (a - b) * (a - b)).sum();
                let need2 = min_dist * min_dist - ds2;
                if need2 > 0.0 && ds2 + dn2 < min_dist * min_dist {
                    let scale = if dn2 > 0.0 { (need2 / dn2).sqrt() } else { 0.0 };
                    if scale > 0.0 {
                        for (a, b) in coeffs.iter_mut().zip(prev_coeffs) {
                            *a = b + (*a - b) * scale;
                        }
                    } else {
                        coeffs[0] = prev_coeffs[0] + need2.sqrt();
                    }
                }
            }
            let mut proto = signal.clone();
            for (j, &a) in coeffs.iter().enumerate() {
                let dir = &self.basis[1 + s.num_classes + j];
                proto.iter_mut().zip(dir).for_each(|(p, v)| *p += a * v);
            }
            prev = Some((signal, coeffs));
            out.push(proto);
        }
        out
    }

    fn video(&mut self, id: String, split: Split, primary: usize) -> (VideoRecord, Vec<PlantedSegment>) {
        let s = self.spec;
        let layout = self.layout(primary);
        let protos = self.prototypes(&layout);
        let t = layout.last().unwrap().end;
        let mut data = Vec::with_capacity(t * s.feature_dim);
        for (seg, proto) in layout.iter().zip(&protos) {
            for _ in seg.start..seg.end {
                for &p in proto {
                    let noise: f64 = StandardNormal.sample(&mut self.rng);
                    data.push((p + s.noise_sigma * noise) as f32);
                }
            }
        }
        let mut label = vec![false; s.num_classes];
        let mut gt_segments = Vec::new();
        for seg in &layout {
            if let Some(c) = seg.class {
                label[c] = true;
                gt_segments.push(GtSegment {
                    class: c,
                    start: seg.start as f64 * s.seconds_per_snippet,
                    end: seg.end as f64 * s.seconds_per_snippet,
                });
            }
        }
        let record = VideoRecord {
            id,
            split,
            features: FeatureMatrix::new(t, s.feature_dim, data).expect("consistent shape"),
            label,
            seconds_per_snippet: s.seconds_per_snippet,
            gt_segments,
        };
        (record, layout)
    }
}

/// Generates train and test videos. The seed fully determines the output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = orthonormal_basis(&mut rng, spec.feature_dim);
    let mut gen = Generator { spec, basis, rng };
    let mut videos = Vec::new();
    let mut layouts = Vec::new();
    for (split, per_class) in [
        (Split::Train, spec.train_videos_per_class),
        (Split::Test, spec.test_videos_per_class),
    ] {
        let mut n = 0;
        for _ in 0..per_class {
            for c in 0..spec.num_classes {
                let id = format!("{}_{:04}", split.as_str(), n);
                n += 1;
                let (v, l) = gen.video(id, split, c);
                videos.push(v);
                layouts.push(l);
            }
        }
    }
    let dataset = Dataset {
        class_names: spec.class_names(),
        feature_dim: spec.feature_dim,
        videos,
    };
    dataset.validate()?;
    Ok(SyntheticDataset { dataset, layouts })
}
