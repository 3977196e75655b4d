//! `carsr prepare-data | train | eval | ablate | preprocess --config <file>`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, RunConfig};
use crate::degradation::{self, DatasetManifest, TestPair, CODEC_ID};
use crate::error::{Error, Result};
use crate::image::{list_images, Image};
use crate::metrics::{self, EvalResult};
use crate::model::{self, ContextVariant, ModelConfig, UpsampleVariant};
use crate::training::{self, LossReport, TrainConfig, TrainEvent, TrainState};

/// Version tag written into every report.
pub const REPORT_VERSION: &str = "carsr-report/1";

#[derive(Parser, Debug)]
#[command(name = "carsr", version, about = "Joint JPEG artifact reduction and 4x super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cut and degrade training patches; writes the dataset manifest.
    PrepareData(Common),
    /// Train from the manifest, writing checkpoints and a JSONL log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint in the checkpoint directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the test directory at each configured quality.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also report the eight-way self-ensemble.
        #[arg(long)]
        ensemble: bool,
    },
    /// Train and score every architecture variant and loss weight.
    Ablate(Common),
    /// Enhance every image in the input directory.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Resize outputs back to the input size.
        #[arg(long)]
        downsample: bool,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Apply the CPU-sized preset (small model, 2000 iterations).
    #[arg(long)]
    pub desk: bool,
    /// Override a value, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig> {
        let ov = self.overrides.iter().map(|s| config::parse_override(s)).collect::<Result<Vec<_>>>()?;
        RunConfig::load(&self.config, self.desk, &ov)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(c) => {
            let s = cmd_prepare_data(&c.load()?)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::Train { common, resume } => {
            let out = cmd_train(&common.load()?, resume)?;
            println!("{}", out.final_checkpoint.display());
        }
        Command::Eval { common, ensemble } => {
            let mut cfg = common.load()?;
            cfg.eval.ensemble |= ensemble;
            let (report, path) = cmd_eval(&cfg)?;
            for r in &report.results {
                println!("{:<10} qf {:>3}  PSNR-Y {:>7.3}  SSIM-Y {:.4}", r.method, r.qf, r.result.mean_psnr_y, r.result.mean_ssim_y);
            }
            println!("{}", path.display());
        }
        Command::Ablate(c) => {
            let (report, path) = cmd_ablate(&c.load()?)?;
            for r in &report.rows {
                println!("{:<36} params {:>9}  PSNR-Y {:>7.3}  l_LR {:.5}", r.variant, r.params, r.psnr_y, r.l_lr);
            }
            println!("{}", path.display());
        }
        Command::Preprocess { common, downsample } => {
            let mut cfg = common.load()?;
            cfg.preprocess.downsample |= downsample;
            let r = cmd_preprocess(&cfg)?;
            println!("{} written, {} skipped", r.written.len(), r.skipped.len());
        }
    }
    Ok(())
}

/// Provenance block shared by all reports.
#[derive(Clone, Debug, Serialize)]
pub struct ReportMeta {
    pub report_version: &'static str,
    pub crate_version: &'static str,
    pub config_hash: String,
    pub codec_id: &'static str,
    pub shave: usize,
    pub scale: usize,
}

impl ReportMeta {
    fn new(cfg: &RunConfig) -> Self {
        ReportMeta {
            report_version: REPORT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(),
            codec_id: CODEC_ID,
            shave: cfg.eval.shave,
            scale: cfg.model.scale,
        }
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Input(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Input(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

#[derive(Clone, Debug, Serialize)]
pub struct PrepareSummary {
    pub manifest: PathBuf,
    pub count: usize,
    pub sources: usize,
    pub seed: u64,
    pub codec_id: String,
    /// `[qf, count]` for every quality that occurs.
    pub qf_histogram: Vec<(u8, usize)>,
}

/// Writes the manifest and `<manifest>.summary.json`.
pub fn cmd_prepare_data(cfg: &RunConfig) -> Result<PrepareSummary> {
    require_dir(&cfg.paths.source_dir, "source directory")?;
    let manifest = degradation::build_manifest(&cfg.paths.source_dir, &cfg.degrade, cfg.train.seed, cfg.prepare.count)?;
    let mut sources: Vec<&str> = manifest.entries.iter().map(|e| e.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    let summary = PrepareSummary {
        manifest: cfg.paths.manifest.clone(),
        count: manifest.entries.len(),
        sources: sources.len(),
        seed: manifest.seed,
        codec_id: manifest.codec_id.clone(),
        qf_histogram: manifest
            .qf_histogram()
            .into_iter()
            .enumerate()
            .filter(|(_, n)| *n > 0)
            .map(|(q, n)| (q as u8, n))
            .collect(),
    };
    create_parent(&cfg.paths.manifest)?;
    manifest.write(&cfg.paths.manifest)?;
    write_json(&cfg.paths.manifest.with_extension("summary.json"), &summary)?;
    Ok(summary)
}

fn load_pairs(cfg: &RunConfig) -> Result<Vec<degradation::PatchPair>> {
    require_file(&cfg.paths.manifest, "manifest")?;
    let manifest = DatasetManifest::read(&cfg.paths.manifest)?;
    if manifest.spec.hr_patch != cfg.train.hr_patch || manifest.spec.scale != cfg.model.scale {
        return Err(Error::config(
            "train.hr_patch",
            format!(
                "manifest has {}px patches at scale {}, config asks for {}px at scale {}; rerun prepare-data",
                manifest.spec.hr_patch, manifest.spec.scale, cfg.train.hr_patch, cfg.model.scale
            ),
        ));
    }
    if manifest.entries.is_empty() {
        return Err(Error::Input("manifest has no entries".into()));
    }
    manifest.materialize()
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub state: TrainState,
    pub last_report: Option<LossReport>,
}

/// Log lines already covered by `iter` completed steps.
fn keep_log_prefix(log: &Path, iter: u64) -> Result<String> {
    if !log.exists() {
        return Ok(String::new());
    }
    let text = std::fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let r: LossReport = serde_json::from_str(line).map_err(|e| Error::Format {
            what: "training log",
            reason: e.to_string(),
        })?;
        if r.iter < iter {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let resume_from = if resume {
        let p = checkpoint::latest_checkpoint(&cfg.paths.checkpoint_dir)?
            .ok_or_else(|| Error::Input(format!("no checkpoint to resume in {}", cfg.paths.checkpoint_dir.display())))?;
        let ck = Checkpoint::load(&p)?;
        if ck.model != cfg.model {
            return Err(Error::Incompatible(format!("{} was trained with a different model config", p.display())));
        }
        Some(ck)
    } else {
        None
    };
    let pairs = load_pairs(cfg)?;
    let state = match resume_from {
        Some(ck) => ck.into_state(),
        None => TrainState::fresh(model::build_model(&cfg.model, cfg.train.seed)?),
    };
    create_dir(&cfg.paths.checkpoint_dir)?;
    let log_path = &cfg.paths.train_log;
    let prefix = keep_log_prefix(log_path, state.iter)?;
    write_file(log_path, prefix.as_bytes())?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(log_path)
        .map_err(|e| Error::io(log_path, e))?;

    let mut checkpoints = Vec::new();
    let mut last_report = None;
    let state = training::train_loop(&pairs, &cfg.model, &cfg.train, state, |ev| {
        match ev {
            TrainEvent::Step(r) => {
                let line = serde_json::to_string(r).expect("report serializes");
                writeln!(log, "{line}").map_err(|e| Error::io(log_path, e))?;
                last_report = Some(r.clone());
            }
            TrainEvent::Checkpoint(s) => {
                let path = cfg.paths.checkpoint_dir.join(checkpoint::checkpoint_name(s.iter));
                Checkpoint::from_state(&cfg.model, &cfg.train, s).save(&path)?;
                checkpoints.push(path);
            }
        }
        Ok(())
    })?;
    let final_checkpoint = cfg.paths.checkpoint_dir.join(checkpoint::checkpoint_name(state.iter));
    Ok(TrainOutcome {
        final_checkpoint,
        checkpoints,
        state,
        last_report,
    })
}

fn checkpoint_for(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = match &cfg.paths.checkpoint {
        Some(p) => p.clone(),
        None => checkpoint::latest_checkpoint(&cfg.paths.checkpoint_dir)?
            .ok_or_else(|| Error::Input(format!("no checkpoint in {}", cfg.paths.checkpoint_dir.display())))?,
    };
    require_file(&path, "checkpoint")?;
    let ck = Checkpoint::load(&path)?;
    if ck.model != cfg.model {
        return Err(Error::Incompatible(format!(
            "{} holds a different model (n_f {}, {} RRDB, {} / {}) than the config (n_f {}, {} RRDB, {} / {})",
            path.display(),
            ck.model.n_f,
            ck.model.num_rrdb,
            ck.model.context_variant.name(),
            ck.model.upsample_variant.name(),
            cfg.model.n_f,
            cfg.model.num_rrdb,
            cfg.model.context_variant.name(),
            cfg.model.upsample_variant.name(),
        )));
    }
    Ok(ck)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    /// `direct`, `ensemble` or `bicubic`.
    pub method: String,
    pub qf: u8,
    pub result: EvalResult,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub checkpoint_iteration: u64,
    pub params: usize,
    pub results: Vec<EvalRow>,
    /// Test images that could not be loaded.
    pub skipped: Vec<(PathBuf, String)>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,qf,runtime_s,params,psnr_y,ssim_y,images\n");
        for r in &self.results {
            s.push_str(&format!(
                "{},{},{:.6},{},{:.4},{:.6},{}\n",
                r.method,
                r.qf,
                r.result.runtime_total,
                r.result.params,
                r.result.mean_psnr_y,
                r.result.mean_ssim_y,
                r.result.per_image.len()
            ));
        }
        s
    }
}

fn bicubic_baseline(pairs: &[TestPair], scale: usize, shave: usize) -> Result<EvalResult> {
    metrics::evaluate_with(pairs, shave, 0, |p| degradation::bicubic_upscale(&p.lr, scale))
}

/// Writes `eval.json` and `eval.csv` into the report directory.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(EvalReport, PathBuf)> {
    require_dir(&cfg.paths.test_dir, "test directory")?;
    let ck = checkpoint_for(cfg)?;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for &qf in &cfg.eval.qfs {
        let set = degradation::degrade_testset(&cfg.paths.test_dir, qf, cfg.model.scale)?;
        if set.pairs.is_empty() {
            return Err(Error::Input(format!("no usable test images in {}", cfg.paths.test_dir.display())));
        }
        if skipped.is_empty() {
            skipped = set.failures.clone();
        }
        let mut push = |method: &str, result| {
            results.push(EvalRow {
                method: method.into(),
                qf,
                result,
            })
        };
        push("direct", metrics::evaluate_dataset(&ck.params, &cfg.model, &set.pairs, false, cfg.eval.shave)?);
        if cfg.eval.ensemble {
            push("ensemble", metrics::evaluate_dataset(&ck.params, &cfg.model, &set.pairs, true, cfg.eval.shave)?);
        }
        if cfg.eval.baseline {
            push("bicubic", bicubic_baseline(&set.pairs, cfg.model.scale, cfg.eval.shave)?);
        }
    }
    let report = EvalReport {
        meta: ReportMeta::new(cfg),
        checkpoint_iteration: ck.iteration,
        params: model::count_params(&ck.params),
        results,
        skipped,
    };
    let path = cfg.paths.report_dir.join("eval.json");
    write_json(&path, &report)?;
    write_file(&cfg.paths.report_dir.join("eval.csv"), report.to_csv().as_bytes())?;
    Ok((report, path))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub context: &'static str,
    pub upsampler: &'static str,
    pub lambda: f64,
    pub params: usize,
    /// Parameters of the context module alone.
    pub context_params: usize,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub l_hr: f64,
    pub l_lr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub meta: ReportMeta,
    pub train: TrainConfig,
    pub val_qf: u8,
    /// Context-by-upsampler rows.
    pub rows: Vec<AblationRow>,
    /// LR-reconstruction weight rows on the base architecture.
    pub lambda_rows: Vec<AblationRow>,
    pub bicubic_psnr_y: f64,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("table,variant,context,upsampler,lambda,params,context_params,psnr_y,ssim_y,l_hr,l_lr\n");
        for (table, rows) in [("architecture", &self.rows), ("lambda", &self.lambda_rows)] {
            for r in rows {
                s.push_str(&format!(
                    "{table},{},{},{},{},{},{},{:.4},{:.6},{:.6},{:.6}\n",
                    r.variant, r.context, r.upsampler, r.lambda, r.params, r.context_params, r.psnr_y, r.ssim_y, r.l_hr, r.l_lr
                ));
            }
        }
        s
    }
}

fn ablation_row(
    model: &ModelConfig,
    train: &TrainConfig,
    pairs: &[degradation::PatchPair],
    val: &[TestPair],
    shave: usize,
) -> Result<AblationRow> {
    let params = model::build_model(model, train.seed)?;
    let mut last = None;
    let state = training::train_loop(pairs, model, train, TrainState::fresh(params), |ev| {
        if let TrainEvent::Step(r) = ev {
            last = Some(r.clone());
        }
        Ok(())
    })?;
    let eval = metrics::evaluate_dataset(&state.params, model, val, false, shave)?;
    let context_params = state.params.count_params_with_prefix("context.");
    let last = last.unwrap_or(LossReport {
        iter: 0,
        l_hr: f64::NAN,
        l_lr: 0.0,
        total: f64::NAN,
        lr_value: 0.0,
    });
    Ok(AblationRow {
        variant: format!("{}+{} lambda={}", model.context_variant.name(), model.upsample_variant.name(), train.lambda_recon),
        context: model.context_variant.name(),
        upsampler: model.upsample_variant.name(),
        lambda: train.lambda_recon,
        params: model::count_params(&state.params),
        context_params,
        psnr_y: eval.mean_psnr_y,
        ssim_y: eval.mean_ssim_y,
        l_hr: last.l_hr,
        l_lr: last.l_lr,
    })
}

/// Writes `ablation.json` and `ablation.csv` into the report directory.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<(AblationReport, PathBuf)> {
    let (contexts, upsamplers) = cfg.ablate.variants()?;
    require_dir(&cfg.paths.test_dir, "validation directory")?;
    let arch = |c: ContextVariant, u: UpsampleVariant, head: bool| ModelConfig {
        context_variant: c,
        upsample_variant: u,
        with_car_head: head,
        ..cfg.model.clone()
    };
    for &c in &contexts {
        for &u in &upsamplers {
            arch(c, u, false).validate()?;
        }
    }
    let pairs = load_pairs(cfg)?;
    let val = degradation::degrade_testset(&cfg.paths.test_dir, cfg.ablate.val_qf, cfg.model.scale)?.pairs;
    if val.is_empty() {
        return Err(Error::Input(format!("no usable images in {}", cfg.paths.test_dir.display())));
    }
    let shave = cfg.eval.shave;
    let mut rows = Vec::new();
    for &c in &contexts {
        for &u in &upsamplers {
            let train = TrainConfig {
                lambda_recon: 0.0,
                ..cfg.train.clone()
            };
            rows.push(ablation_row(&arch(c, u, false), &train, &pairs, &val, shave)?);
        }
    }
    let mut lambda_rows = Vec::new();
    for &lambda in &cfg.ablate.lambdas {
        let model = arch(cfg.model.context_variant, cfg.model.upsample_variant, lambda > 0.0);
        let existing = rows
            .iter()
            .find(|r| lambda == 0.0 && r.context == model.context_variant.name() && r.upsampler == model.upsample_variant.name());
        let row = match existing {
            Some(r) => r.clone(),
            None => {
                let train = TrainConfig {
                    lambda_recon: lambda,
                    ..cfg.train.clone()
                };
                ablation_row(&model, &train, &pairs, &val, shave)?
            }
        };
        lambda_rows.push(row);
    }
    let report = AblationReport {
        meta: ReportMeta::new(cfg),
        train: cfg.train.clone(),
        val_qf: cfg.ablate.val_qf,
        rows,
        lambda_rows,
        bicubic_psnr_y: bicubic_baseline(&val, cfg.model.scale, shave)?.mean_psnr_y,
    };
    let path = cfg.paths.report_dir.join("ablation.json");
    write_json(&path, &report)?;
    write_file(&cfg.paths.report_dir.join("ablation.csv"), report.to_csv().as_bytes())?;
    Ok((report, path))
}

#[derive(Clone, Debug, Serialize)]
pub struct PreprocessReport {
    pub meta: ReportMeta,
    pub downsample: bool,
    pub written: Vec<PathBuf>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Writes `<stem>.png` per input plus `preprocess.json` into the output directory.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessReport> {
    require_dir(&cfg.paths.input_dir, "input directory")?;
    let ck = checkpoint_for(cfg)?;
    let inputs = list_images(&cfg.paths.input_dir)?;
    create_dir(&cfg.paths.output_dir)?;
    let mut written = Vec::new();
    let mut skipped = Vec::new();
    for path in inputs {
        let one = || -> Result<PathBuf> {
            let img = Image::load(&path)?;
            let out = model::forward(&ck.params, &cfg.model, &img.to_tensor::<f32>())?;
            let mut out = Image::from_tensor(&out, 0)?.clamped();
            if cfg.preprocess.downsample {
                out = degradation::resize_bicubic(&out, img.height(), img.width())?.clamped();
            }
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let dest = cfg.paths.output_dir.join(format!("{stem}.png"));
            out.save_png(&dest)?;
            Ok(dest)
        };
        match one() {
            Ok(p) => written.push(p),
            Err(e) => skipped.push((path.clone(), e.to_string())),
        }
    }
    let report = PreprocessReport {
        meta: ReportMeta::new(cfg),
        downsample: cfg.preprocess.downsample,
        written,
        skipped,
    };
    write_json(&cfg.paths.output_dir.join("preprocess.json"), &report)?;
    Ok(report)
}
