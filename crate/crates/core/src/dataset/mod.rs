//! Video records, on-disk formats and the synthetic generator.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! manifest.txt          class list, feature width and the per-video table
//! ground_truth.csv      video_id,class_name,start_sec,end_sec
//! features/<id>.bin     one binary feature file per video
//! ```
//!
//! The binary feature file is a 16-byte little-endian header followed by
//! `T·D` `f32` values in snippet-major order:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `ISSF`               |
//! | 4      | 2    | format version (`u16`, 1)  |
//! | 6      | 2    | reserved, zero             |
//! | 8      | 4    | `T` snippets (`u32`)       |
//! | 12     | 4    | `D` feature width (`u32`)  |
//!
//! The manifest grammar is documented in [`format`].

pub mod format;
pub mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

pub use format::{load_dataset, read_features, read_ground_truth, write_dataset, write_features};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to load {path}: {detail}")]
    Load { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid record `{video}`: {detail}")]
    Invalid { video: String, detail: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// `T×D` snippet features of one video, stored as `f32` like the files they come from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    snippets: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(snippets: usize, dim: usize, data: Vec<f32>) -> Option<Self> {
        (snippets * dim == data.len() && dim > 0).then_some(FeatureMatrix { snippets, dim, data })
    }

    pub fn snippets(&self) -> usize {
        self.snippets
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Column-wise concatenation of two streams with the same snippet count.
    pub fn concat_columns(&self, other: &FeatureMatrix) -> Option<FeatureMatrix> {
        if self.snippets != other.snippets {
            return None;
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for t in 0..self.snippets {
            data.extend_from_slice(self.row(t));
            data.extend_from_slice(other.row(t));
        }
        FeatureMatrix::new(self.snippets, self.dim + other.dim, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Ground-truth action instance in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtSegment {
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub split: Split,
    pub features: FeatureMatrix,
    /// Multi-hot over the dataset classes.
    pub label: Vec<bool>,
    pub seconds_per_snippet: f64,
    pub gt_segments: Vec<GtSegment>,
}

impl VideoRecord {
    pub fn num_snippets(&self) -> usize {
        self.features.snippets()
    }

    pub fn label_classes(&self) -> Vec<usize> {
        self.label
            .iter()
            .enumerate()
            .filter_map(|(c, &on)| on.then_some(c))
            .collect()
    }

    /// Checks the per-record invariants against the dataset shape.
    pub fn validate(&self, num_classes: usize, feature_dim: usize) -> Result<()> {
        let invalid = |detail: String| DatasetError::Invalid {
            video: self.id.clone(),
            detail,
        };
        if self.features.snippets() < 2 {
            return Err(invalid(format!(
                "needs at least 2 snippets, has {}",
                self.features.snippets()
            )));
        }
        if self.features.dim() != feature_dim {
            return Err(invalid(format!(
                "feature width {} but dataset declares {feature_dim}",
                self.features.dim()
            )));
        }
        if self.features.data().iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature value".into()));
        }
        if self.label.len() != num_classes {
            return Err(invalid(format!(
                "label has {} entries for {num_classes} classes",
                self.label.len()
            )));
        }
        if self.split == Split::Train && !self.label.iter().any(|&b| b) {
            return Err(invalid("training video without any positive label".into()));
        }
        if !(self.seconds_per_snippet > 0.0 && self.seconds_per_snippet.is_finite()) {
            return Err(invalid("seconds_per_snippet must be positive".into()));
        }
        for seg in &self.gt_segments {
            if seg.class >= num_classes {
                return Err(invalid(format!("ground-truth class {} out of range", seg.class)));
            }
            if !(0.0 <= seg.start && seg.start < seg.end) {
                return Err(invalid(format!(
                    "bad ground-truth segment [{}, {}]",
                    seg.start, seg.end
                )));
            }
        }
        Ok(())
    }
}

/// A loaded dataset. Class order is the class index everywhere downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return Err(DatasetError::Invalid {
                    video: v.id.clone(),
                    detail: "duplicate video id".into(),
                });
            }
            v.validate(self.num_classes(), self.feature_dim)?;
        }
        Ok(())
    }
}
