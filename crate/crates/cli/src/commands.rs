use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use issf::checkpoint;
use issf::config::{ConfigError, RunConfig};
use issf::dataset::{self, Dataset, DatasetError, Split, SyntheticSpec};
use issf::eval::{self, EvalReport, Proposal};
use issf::model::{Model, ModelError};
use issf::saliency::{self, DiffMetric};
use issf::train;

/// Error in how the tool was invoked or configured; exit code 1.
#[derive(Debug)]
pub struct Usage(String);

impl Usage {
    pub fn new(msg: impl Into<String>) -> Self {
        Usage(msg.into())
    }
}

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Usage>()
            || c.is::<ConfigError>()
            || matches!(c.downcast_ref::<DatasetError>(), Some(DatasetError::Spec(_)))
            || matches!(c.downcast_ref::<ModelError>(), Some(ModelError::Config(_)))
    })
}

pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

impl Globals {
    pub fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(dir)
    }

    /// Config file (or defaults) with the seed override, validated.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Usage::new(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::from_toml(&text).with_context(|| format!("config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn defaults_text(synthetic: bool) -> Result<String> {
    if synthetic {
        Ok(toml::to_string(&SyntheticSpec::default())?)
    } else {
        Ok(RunConfig::default().to_toml())
    }
}

pub fn load_data(path: &Path) -> Result<Dataset> {
    dataset::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn synth(globals: &Globals, spec_path: Option<&Path>) -> Result<()> {
    let mut spec = match spec_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Usage::new(format!("cannot read spec {}: {e}", path.display())))?;
            toml::from_str::<SyntheticSpec>(&text)
                .map_err(|e| Usage::new(format!("invalid spec {}: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = globals.seed {
        spec.seed = seed;
    }
    let synthetic = dataset::generate_synthetic(&spec)?;
    let dir = globals.out_dir("data")?;
    let manifest = dataset::write_dataset(&synthetic.dataset, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn train(globals: &Globals, data: &Path) -> Result<()> {
    let cfg = globals.run_config()?;
    let dataset = load_data(data)?;
    let hash = cfg.hash();
    log::info!(
        "training {} for {} epochs, config {hash}",
        cfg.modules.as_str(),
        cfg.epochs
    );
    let (model, log) = train::train_with(&dataset, &cfg, |e| {
        log::info!("epoch {} total {:.6} eta {:.4}", e.epoch, e.total, e.eta);
    })?;
    let dir = globals.out_dir("run")?;
    let ckpt = dir.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    let log_path = dir.join("train_log.csv");
    append_log(&log_path, &log, &hash)?;
    match log.last() {
        Some(e) => println!(
            "trained {} epochs: l_cls {:.6} l_kd {:.6} l_att {:.6} total {:.6}",
            log.len(),
            e.l_cls,
            e.l_kd,
            e.l_att_weighted,
            e.total
        ),
        None => println!("epochs = 0: saved the initialization"),
    }
    println!("config_hash {hash}");
    println!("checkpoint {}", ckpt.display());
    println!("log {}", log_path.display());
    Ok(())
}

fn append_log(path: &Path, log: &[train::EpochLog], hash: &str) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    if fresh {
        writeln!(f, "{}", train::LOG_HEADER)?;
    }
    train::write_log_rows(&mut f, log, hash)?;
    Ok(())
}

fn parse_split(split: &str) -> Result<Split> {
    Split::parse(split).ok_or_else(|| Usage::new(format!("unknown split `{split}` (train or test)")).into())
}

/// Writes `report.txt`, `report.csv` and, when given, `proposals.csv` into `dir`.
pub fn write_report(
    dir: &Path,
    cfg: &RunConfig,
    report: &EvalReport,
    method: &str,
    proposals: Option<(&[Proposal], &[String])>,
) -> Result<()> {
    let hash = cfg.hash();
    fs::write(dir.join("report.txt"), report.to_text(cfg.iou_preset, &hash))?;
    fs::write(dir.join("report.csv"), report.to_csv(cfg.iou_preset, method, &hash))?;
    if let Some((props, names)) = proposals {
        let mut f = fs::File::create(dir.join("proposals.csv"))?;
        eval::write_proposals(&mut f, props, names)?;
    }
    Ok(())
}

pub fn eval(
    globals: &Globals,
    data: &Path,
    checkpoint_path: Option<&Path>,
    proposals_path: Option<&Path>,
    split: &str,
) -> Result<()> {
    let split = parse_split(split)?;
    let dataset = load_data(data)?;
    let dir = globals.out_dir("eval")?;
    let (cfg, report) = match (checkpoint_path, proposals_path) {
        (Some(path), _) => {
            let model = checkpoint::load(path)?;
            check_classes(&model, &dataset)?;
            let (report, proposals) = eval::evaluate(&model, &dataset, split)?;
            write_report(
                &dir,
                &model.config,
                &report,
                "model",
                Some((&proposals, &dataset.class_names)),
            )?;
            (model.config, report)
        }
        (None, Some(path)) => {
            let cfg = globals.run_config()?;
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let proposals = eval::read_proposals(&text, &dataset.class_names)?;
            let gt = eval::ground_truth(&dataset, split);
            let report = eval::mean_average_precision(
                &proposals,
                &gt,
                &dataset.class_names,
                &cfg.iou_preset.thresholds(),
                cfg.include_absent_classes,
            )?;
            write_report(&dir, &cfg, &report, "proposals", None)?;
            (cfg, report)
        }
        (None, None) => return Err(Usage::new("eval needs --checkpoint or --proposals").into()),
    };
    print!("{}", report.to_text(cfg.iou_preset, &cfg.hash()));
    println!("report {}", dir.join("report.csv").display());
    Ok(())
}

fn check_classes(model: &Model, dataset: &Dataset) -> Result<()> {
    if model.class_names != dataset.class_names || model.dim != dataset.feature_dim {
        anyhow::bail!(
            "checkpoint was trained on classes {:?} with D = {}, dataset has {:?} with D = {}",
            model.class_names,
            model.dim,
            dataset.class_names,
            dataset.feature_dim
        );
    }
    Ok(())
}

pub const DIFF_HEADER: &str = "pair_index,tau,snippet_index,action_score,gt_flag";

pub fn export_diff(globals: &Globals, data: &Path, video_id: &str, checkpoint_path: Option<&Path>) -> Result<()> {
    let dataset = load_data(data)?;
    let video = dataset
        .video(video_id)
        .ok_or_else(|| Usage::new(format!("no video `{video_id}` in {}", data.display())))?;
    let (cfg, scores) = match checkpoint_path {
        Some(path) => {
            let model = checkpoint::load(path)?;
            check_classes(&model, &dataset)?;
            let scores = model.predict(video)?.action_score();
            (model.config, Some(scores))
        }
        None => (globals.run_config()?, None),
    };
    let metric = cfg.diff.metric().unwrap_or(DiffMetric::L1);
    let t = video.num_snippets();
    let tau = saliency::diff_values(&video.features.to_f64(), video.features.dim(), metric)
        .ok_or_else(|| Usage::new(format!("video `{video_id}` has fewer than 2 snippets")))?;
    let sps = video.seconds_per_snippet;
    let mut out = format!("{DIFF_HEADER}\n");
    for s in 0..t {
        let (pair, tau_s) = if s + 1 < t {
            (s.to_string(), format!("{:.6}", tau.tau[s]))
        } else {
            (String::new(), String::new())
        };
        let score = scores.as_ref().map(|v| format!("{:.6}", v[s])).unwrap_or_default();
        let mid = (s as f64 + 0.5) * sps;
        let in_gt = video.gt_segments.iter().any(|g| g.start <= mid && mid < g.end);
        out.push_str(&format!("{pair},{tau_s},{s},{score},{}\n", u8::from(in_gt)));
    }
    let dir = globals.out_dir("export")?;
    let path = dir.join(format!("{video_id}_diff.csv"));
    fs::write(&path, out).with_context(|| format!("cannot write {}", path.display()))?;
    println!("config_hash {}", cfg.hash());
    println!("{}", path.display());
    Ok(())
}
