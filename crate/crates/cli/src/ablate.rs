//! Grid sweeps over run-config keys.
//!
//! Grid file (TOML):
//!
//! ```toml
//! data = "data/manifest.txt"   # optional; default synthetic data otherwise
//! out = "ablate"               # optional; --out wins
//! [sweep]
//! diff = ["random", "classification", "cosine", "l2", "l1"]
//! ```
//!
//! Every `[sweep]` key is a run-config field and every value list is one
//! axis of the cartesian product. Cells run in sorted key order, values in
//! file order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use issf::config::{IouPreset, RunConfig};
use issf::dataset::{self, Dataset, Split, SyntheticSpec};
use issf::eval::{self, format_threshold};
use rayon::prelude::*;

use crate::commands::{self, Globals, Usage};

pub struct Grid {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub axes: Vec<(String, Vec<toml::Value>)>,
}

pub fn parse_grid(text: &str) -> Result<Grid> {
    let table: toml::Table = text.parse().map_err(|e| Usage::new(format!("invalid grid: {e}")))?;
    let mut grid = Grid {
        data: None,
        out: None,
        axes: Vec::new(),
    };
    for (key, value) in table {
        match (key.as_str(), value) {
            ("data", toml::Value::String(s)) => grid.data = Some(PathBuf::from(s)),
            ("out", toml::Value::String(s)) => grid.out = Some(PathBuf::from(s)),
            ("sweep", toml::Value::Table(sweep)) => {
                for (k, v) in sweep {
                    match v {
                        toml::Value::Array(values) => grid.axes.push((k, values)),
                        _ => return Err(Usage::new(format!("sweep.{k} must be a list")).into()),
                    }
                }
            }
            (other, _) => return Err(Usage::new(format!("unexpected grid entry `{other}`")).into()),
        }
    }
    Ok(grid)
}

/// Cartesian product of the axes; empty when there are no axes or any axis
/// is empty.
pub fn cells(axes: &[(String, Vec<toml::Value>)]) -> Vec<Vec<toml::Value>> {
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Vec::new();
    }
    let mut out: Vec<Vec<toml::Value>> = vec![Vec::new()];
    for (_, values) in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(v.clone());
                    next
                })
            })
            .collect();
    }
    out
}

fn plain(value: &toml::Value) -> String {
    match value {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Row label used in the ablation tables for one swept value.
pub fn row_label(key: &str, value: &toml::Value) -> String {
    let v = plain(value);
    let named = match (key, v.as_str()) {
        ("diff", "random") => "random",
        ("diff", "classification") => "classification",
        ("diff", "cosine") => "cosine distance",
        ("diff", "l2") => "L2 distance",
        ("diff", "l1") => "L1 distance",
        ("modules", "base") => "Base",
        ("modules", "base+brm") => "Base + BRM",
        ("modules", "base+brm+dem") => "Base + BRM + DEM",
        ("fusion_mode", "self") => "self",
        ("fusion_mode", "b_only") => "w/o salient",
        ("fusion_mode", "a_only") => "w/o non-salient",
        ("fusion_mode", "add") => "salient + non-salient",
        ("fusion_mode", "weighted_sum") => "weighted sum",
        ("fusion_mode", "temporal_only") => "temporal-level",
        ("memory_mode", "direct") => "direct update",
        ("memory_mode", "momentum_all") => "momentum update",
        ("memory_mode", "ours") => "Ours",
        _ => return format!("{key}={v}"),
    };
    named.to_string()
}

fn cell_config(base: &RunConfig, keys: &[&str], values: &[toml::Value]) -> Result<RunConfig> {
    let mut table: toml::Table = base.to_toml().parse().expect("config round-trips through TOML");
    for (k, v) in keys.iter().zip(values) {
        if !table.contains_key(*k) {
            return Err(Usage::new(format!("unknown config key `{k}` in sweep")).into());
        }
        table.insert(k.to_string(), v.clone());
    }
    let cfg =
        RunConfig::from_toml(&table.to_string()).with_context(|| format!("grid cell {}", describe(keys, values)))?;
    Ok(cfg)
}

fn describe(keys: &[&str], values: &[toml::Value]) -> String {
    keys.iter()
        .zip(values)
        .map(|(k, v)| format!("{k}={}", plain(v)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Threshold and average column names of the report table.
pub fn metric_columns(preset: IouPreset) -> Vec<String> {
    let mut cols: Vec<String> = preset.thresholds().into_iter().map(format_threshold).collect();
    cols.extend(eval::avg_ranges(preset).into_iter().map(|r| r.label));
    cols
}

pub struct CellResult {
    pub label: String,
    pub values: Vec<String>,
    pub row: Vec<f64>,
    pub hash: String,
}

fn run_cell(dataset: &Dataset, cfg: &RunConfig, dir: &Path, label: &str) -> Result<Vec<f64>> {
    let (model, log) = issf::train::train(dataset, cfg)?;
    let (report, proposals) = eval::evaluate(&model, dataset, Split::Test)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut log_csv = Vec::new();
    issf::train::write_log_csv(&mut log_csv, &log, &cfg.hash())?;
    fs::write(dir.join("train_log.csv"), log_csv)?;
    commands::write_report(dir, cfg, &report, label, Some((&proposals, &dataset.class_names)))?;
    Ok(report.table_row(cfg.iou_preset).into_iter().map(|(_, v)| v).collect())
}

pub fn summary_csv(keys: &[&str], preset: IouPreset, results: &[CellResult]) -> String {
    let mut out = String::from("cell,label");
    for k in keys {
        let _ = write!(out, ",{k}");
    }
    for c in metric_columns(preset) {
        let _ = write!(out, ",{c}");
    }
    out.push_str(",config_hash\n");
    for (i, r) in results.iter().enumerate() {
        let _ = write!(out, "{i},{}", r.label);
        for v in &r.values {
            let _ = write!(out, ",{v}");
        }
        for v in &r.row {
            let _ = write!(out, ",{v:.4}");
        }
        let _ = writeln!(out, ",{}", r.hash);
    }
    out
}

pub fn summary_text(preset: IouPreset, results: &[CellResult]) -> String {
    let cols = metric_columns(preset);
    let width = results.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "method");
    for c in &cols {
        let _ = write!(out, " {:>13}", c);
    }
    out.push('\n');
    for r in results {
        let _ = write!(out, "{:<width$}", r.label);
        for v in &r.row {
            let _ = write!(out, " {v:>13.2}");
        }
        out.push('\n');
    }
    out
}

pub fn run(globals: &Globals, grid_path: &Path) -> Result<()> {
    let text = fs::read_to_string(grid_path)
        .map_err(|e| Usage::new(format!("cannot read grid {}: {e}", grid_path.display())))?;
    let grid = parse_grid(&text)?;
    let base = globals.run_config()?;
    let keys: Vec<&str> = grid.axes.iter().map(|(k, _)| k.as_str()).collect();
    let combos = cells(&grid.axes);
    let configs = combos
        .iter()
        .map(|values| cell_config(&base, &keys, values))
        .collect::<Result<Vec<_>>>()?;
    println!("grid: {} cells", configs.len());

    let out = match (&globals.out, &grid.out) {
        (Some(o), _) | (None, Some(o)) => o.clone(),
        (None, None) => PathBuf::from("ablate"),
    };
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;

    let dataset = if configs.is_empty() {
        None
    } else {
        Some(match &grid.data {
            Some(path) => commands::load_data(path)?,
            None => {
                let spec = SyntheticSpec {
                    seed: base.seed,
                    ..SyntheticSpec::default()
                };
                dataset::generate_synthetic(&spec)?.dataset
            }
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(globals.threads)
        .build()
        .context("cannot start worker threads")?;
    let results: Vec<CellResult> = pool.install(|| {
        configs
            .par_iter()
            .zip(combos.par_iter())
            .enumerate()
            .map(|(i, (cfg, values))| {
                let label = keys
                    .iter()
                    .zip(values)
                    .map(|(k, v)| row_label(k, v))
                    .collect::<Vec<_>>()
                    .join(" / ");
                let dataset = dataset.as_ref().expect("dataset exists for a non-empty grid");
                let row = run_cell(dataset, cfg, &out.join(format!("cell_{i:03}")), &label)
                    .with_context(|| format!("cell {i} ({label})"))?;
                log::info!("cell {i} ({label}) done");
                Ok(CellResult {
                    label,
                    values: values.iter().map(plain).collect(),
                    row,
                    hash: cfg.hash(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    fs::write(out.join("summary.csv"), summary_csv(&keys, base.iou_preset, &results))?;
    let table = summary_text(base.iou_preset, &results);
    fs::write(out.join("summary.txt"), &table)?;
    print!("{table}");
    println!("summary {}", out.join("summary.csv").display());
    Ok(())
}
