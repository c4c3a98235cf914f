//! Binary feature files, the manifest and the ground-truth table.
//!
//! Manifest grammar (line oriented, `#` starts a comment line, blank lines
//! are ignored):
//!
//! ```text
//! manifest   := header* "[videos]" row*
//! header     := key "=" value
//!                 format       = issf-manifest/1        (required)
//!                 feature_dim  = <D>                    (required)
//!                 classes      = <name> <name> ...      (required, may be empty)
//!                 ground_truth = <relative path>        (optional)
//! row        := id split labels seconds_per_snippet snippets features
//!   split    := "train" | "test"
//!   labels   := "-" | name ("," name)*
//!   features := path | path "+" path     (two streams are concatenated column-wise)
//! ```
//!
//! Fields in a row are separated by whitespace, so ids, class names and
//! paths must not contain whitespace, `,` or `+`. Paths are relative to the
//! manifest's directory.
//!
//! The ground-truth table has one `video_id,class_name,start_sec,end_sec`
//! record per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetError, FeatureMatrix, GtSegment, Result, Split, VideoRecord};

pub const FEATURE_MAGIC: &[u8; 4] = b"ISSF";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const MANIFEST_FORMAT: &str = "issf-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

fn load_err(path: &Path, detail: impl Into<String>) -> DatasetError {
    DatasetError::Load {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_features(features: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + features.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(features.snippets() as u32).to_le_bytes());
    out.extend_from_slice(&(features.dim() as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(load_err(path, "file shorter than the 16-byte header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(load_err(path, "bad magic, expected ISSF"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(load_err(path, format!("unsupported feature format version {version}")));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (t, d) = (word(8), word(12));
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| load_err(path, "header dimensions overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(load_err(
            path,
            format!("header declares {t}x{d} values but body holds {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(t, d, data).ok_or_else(|| load_err(path, "zero feature width"))
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    fs::write(path, encode_features(features)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    decode_features(&bytes, path)
}

/// Parses `video_id,class_name,start_sec,end_sec` lines.
pub fn read_ground_truth(path: &Path, class_names: &[String]) -> Result<BTreeMap<String, Vec<GtSegment>>> {
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e.to_string()))?;
    let mut out: BTreeMap<String, Vec<GtSegment>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |detail: &str| load_err(path, format!("line {}: {detail}", lineno + 1));
        if fields.len() != 4 {
            return Err(bad("expected video_id,class_name,start_sec,end_sec"));
        }
        let class = class_names
            .iter()
            .position(|c| c == fields[1])
            .ok_or_else(|| bad(&format!("unknown class `{}`", fields[1])))?;
        let start: f64 = fields[2].parse().map_err(|_| bad("bad start time"))?;
        let end: f64 = fields[3].parse().map_err(|_| bad("bad end time"))?;
        if !(0.0 <= start && start < end) {
            return Err(bad("segment must satisfy 0 <= start < end"));
        }
        out.entry(fields[0].to_string())
            .or_default()
            .push(GtSegment { class, start, end });
    }
    Ok(out)
}

fn format_ground_truth(dataset: &Dataset) -> String {
    let mut s = String::from("# video_id,class_name,start_sec,end_sec\n");
    for v in &dataset.videos {
        for g in &v.gt_segments {
            s.push_str(&format!(
                "{},{},{},{}\n",
                v.id, dataset.class_names[g.class], g.start, g.end
            ));
        }
    }
    s
}

fn format_labels(label: &[bool], class_names: &[String]) -> String {
    let names: Vec<&str> = label
        .iter()
        .zip(class_names)
        .filter_map(|(&on, n)| on.then_some(n.as_str()))
        .collect();
    if names.is_empty() {
        "-".to_string()
    } else {
        names.join(",")
    }
}

/// Writes the dataset into `dir` and returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(io_err(&feature_dir))?;

    let mut manifest = String::new();
    manifest.push_str("# ISSF dataset manifest\n");
    manifest.push_str(&format!("format = {MANIFEST_FORMAT}\n"));
    manifest.push_str(&format!("feature_dim = {}\n", dataset.feature_dim));
    manifest.push_str(&format!("classes = {}\n", dataset.class_names.join(" ")));
    manifest.push_str(&format!("ground_truth = {GROUND_TRUTH_FILE}\n"));
    manifest.push_str("\n[videos]\n# id split labels seconds_per_snippet snippets features\n");
    for v in &dataset.videos {
        let rel = format!("features/{}.bin", v.id);
        write_features(&dir.join(&rel), &v.features)?;
        manifest.push_str(&format!(
            "{} {} {} {} {} {}\n",
            v.id,
            v.split.as_str(),
            format_labels(&v.label, &dataset.class_names),
            v.seconds_per_snippet,
            v.num_snippets(),
            rel
        ));
    }
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    fs::write(&gt_path, format_ground_truth(dataset)).map_err(io_err(&gt_path))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

/// Reads a manifest and every feature file it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| load_err(manifest_path, e.to_string()))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let bad = |lineno: usize, detail: String| load_err(manifest_path, format!("line {}: {detail}", lineno + 1));

    let mut headers: BTreeMap<String, String> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut in_videos = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[videos]" {
            in_videos = true;
            continue;
        }
        if in_videos {
            rows.push((lineno, line));
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(lineno, format!("expected key = value, got `{line}`")))?;
            headers.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    if !in_videos {
        return Err(load_err(manifest_path, "missing [videos] section"));
    }
    match headers.get("format").map(String::as_str) {
        Some(MANIFEST_FORMAT) => {}
        other => {
            return Err(load_err(
                manifest_path,
                format!("unsupported manifest format {other:?}"),
            ))
        }
    }
    let feature_dim: usize = headers
        .get("feature_dim")
        .and_then(|v| v.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| load_err(manifest_path, "missing or invalid feature_dim"))?;
    let class_names: Vec<String> = headers
        .get("classes")
        .ok_or_else(|| load_err(manifest_path, "missing classes"))?
        .split_whitespace()
        .map(String::from)
        .collect();

    let gt = match headers.get("ground_truth") {
        Some(rel) => read_ground_truth(&root.join(rel), &class_names)?,
        None => BTreeMap::new(),
    };

    let mut videos = Vec::with_capacity(rows.len());
    for (lineno, row) in rows {
        let f: Vec<&str> = row.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad(lineno, format!("expected 6 fields, got {}", f.len())));
        }
        let split = Split::parse(f[1]).ok_or_else(|| bad(lineno, format!("bad split `{}`", f[1])))?;
        let mut label = vec![false; class_names.len()];
        if f[2] != "-" {
            for name in f[2].split(',') {
                let c = class_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| bad(lineno, format!("unknown class name `{name}`")))?;
                label[c] = true;
            }
        }
        let seconds_per_snippet: f64 = f[3]
            .parse()
            .map_err(|_| bad(lineno, format!("bad seconds_per_snippet `{}`", f[3])))?;
        let snippets: usize = f[4]
            .parse()
            .map_err(|_| bad(lineno, format!("bad snippet count `{}`", f[4])))?;

        let mut streams = f[5].split('+').map(|p| root.join(p));
        let first_path = streams.next().expect("split yields at least one item");
        let mut features = read_features(&first_path)?;
        let mut last_path = first_path;
        for p in streams {
            let extra = read_features(&p)?;
            features = features
                .concat_columns(&extra)
                .ok_or_else(|| load_err(&p, "stream snippet count differs from the first stream"))?;
            last_path = p;
        }
        if features.snippets() != snippets {
            return Err(load_err(
                &last_path,
                format!("manifest declares T={snippets} but file holds {}", features.snippets()),
            ));
        }
        if features.dim() != feature_dim {
            return Err(load_err(
                &last_path,
                format!("manifest declares D={feature_dim} but file holds {}", features.dim()),
            ));
        }
        let record = VideoRecord {
            id: f[0].to_string(),
            split,
            features,
            label,
            seconds_per_snippet,
            gt_segments: gt.get(f[0]).cloned().unwrap_or_default(),
        };
        videos.push(record);
    }
    let dataset = Dataset {
        class_names,
        feature_dim,
        videos,
    };
    dataset.validate().map_err(|e| load_err(manifest_path, e.to_string()))?;
    Ok(dataset)
}
