use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use qrs_core::cnn::CnnModel;
use qrs_core::eval::{
    complexity_sweep, evaluate_folds_levels, save_sweep_csv, write_json_lines, DatasetReport,
    SweepEntry, TimingConfig,
};
use qrs_core::pipeline::{
    dataset_to_working_rate, detect_native, generate_dataset, held_out_records, load_dataset,
    train_cross_validated, write_dataset, FoldOutcome, Manifest, MANIFEST_FILE,
};
use qrs_core::postprocess::PpLevel;
use qrs_core::signal_io::{load_record, load_record_with_header, save_annotations, sidecar_path};
use qrs_core::training::FoldSplit;
use qrs_core::{EcgRecord, RunConfig};
use serde::Serialize;

use crate::{Cli, Command, GlobalArgs, MissingInput};

pub const CONFIG_FILE: &str = "config.json";
pub const FOLDS_FILE: &str = "folds.json";

/// Bad flag combinations that clap cannot express.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn model_file(fold: usize) -> String {
    format!("model_fold{fold}.qrscnn")
}

pub fn history_file(fold: usize) -> String {
    format!("history_fold{fold}.csv")
}

fn effective_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            require(std::slice::from_ref(path))?;
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(pp) = g.pp {
        cfg.pp_level = pp.into();
    }
    if let Some(tol) = g.tol_ms {
        cfg.tol_ms = tol;
    }
    if let Some(depth) = g.depth {
        cfg.model.depth = depth;
    }
    if let Some(channels) = g.channels {
        cfg.model.channels = channels;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(MissingInput(missing).into())
    }
}

fn output_dir(g: &GlobalArgs, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = match (&g.out, &cfg.paths.out_dir) {
        (Some(out), _) => out.clone(),
        (None, base) => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            base.clone()
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(format!("{command}-{stamp}"))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn dump_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_json()?).with_context(|| format!("writing {}", path.display()))
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.paths.data_dir.clone()).ok_or_else(|| {
        UsageError("no dataset directory: pass --data or set paths.data_dir".into()).into()
    })
}

/// Loads a dataset directory at the working rate after checking every file.
fn load_working_dataset(
    dir: &Path,
    cfg: &RunConfig,
) -> Result<Vec<qrs_core::eval::LabelledRecord>> {
    require(&[dir.join(MANIFEST_FILE)])?;
    let manifest = Manifest::load(dir)?;
    let missing = manifest.missing_files(dir);
    if !missing.is_empty() {
        return Err(MissingInput(missing).into());
    }
    let data = load_dataset(dir)?;
    info!("loaded {} records from {}", data.len(), dir.display());
    Ok(dataset_to_working_rate(&data, cfg.working_fs)?)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.global)?;
    match cli.command {
        Command::Generate { n } => generate(&cli.global, cfg, n),
        Command::Train { data, folds, no_cv } => train(&cli.global, cfg, data, folds, no_cv),
        Command::Detect {
            model,
            record,
            fs,
            dump_stream,
        } => detect(&cli.global, cfg, &model, &record, fs, dump_stream),
        Command::Eval {
            data,
            models,
            all_records,
        } => eval(&cli.global, cfg, data, models, all_records),
        Command::Sweep {
            data,
            depths,
            no_cv,
        } => sweep(&cli.global, cfg, data, &depths, no_cv),
    }
}

fn generate(g: &GlobalArgs, cfg: RunConfig, n: usize) -> Result<()> {
    let dir = output_dir(g, &cfg, "generate")?;
    let records = generate_dataset(&cfg, n)?;
    write_dataset(&dir, &records)?;
    dump_config(&cfg, &dir)?;
    println!("wrote {n} records to {}", dir.display());
    Ok(())
}

/// `--no-cv` keeps the fold geometry (5 folds unless more are asked for) and
/// trains only the first split.
fn apply_fold_flags(cfg: &mut RunConfig, folds: Option<usize>, no_cv: bool) -> Result<()> {
    if let Some(k) = folds {
        if k == 0 {
            return Err(UsageError("--folds must be at least 1".into()).into());
        }
        if k == 1 && !no_cv {
            return Err(UsageError("--folds 1 needs --no-cv".into()).into());
        }
        cfg.train.k_folds = k;
    }
    if no_cv && cfg.train.k_folds < 2 {
        cfg.train.k_folds = 5;
    }
    Ok(())
}

fn write_fold_outputs(dir: &Path, outcomes: &[FoldOutcome]) -> Result<()> {
    for o in outcomes {
        let i = o.split.fold_index;
        o.model.save(&dir.join(model_file(i)))?;
        o.history.save_csv(&dir.join(history_file(i)))?;
    }
    let splits: Vec<&FoldSplit> = outcomes.iter().map(|o| &o.split).collect();
    fs::write(dir.join(FOLDS_FILE), serde_json::to_string_pretty(&splits)?)?;
    Ok(())
}

fn train(
    g: &GlobalArgs,
    mut cfg: RunConfig,
    data: Option<PathBuf>,
    folds: Option<usize>,
    no_cv: bool,
) -> Result<()> {
    apply_fold_flags(&mut cfg, folds, no_cv)?;
    let data_dir = data_dir(data, &cfg)?;
    let data = load_working_dataset(&data_dir, &cfg)?;
    let dir = output_dir(g, &cfg, "train")?;
    dump_config(&cfg, &dir)?;
    let outcomes = train_cross_validated(&cfg, &data, no_cv)?;
    write_fold_outputs(&dir, &outcomes)?;
    for o in &outcomes {
        let best = o.history.best().context("empty training history")?;
        println!(
            "fold {}: best val loss {:.6} at epoch {} of {}",
            o.split.fold_index,
            best.val_loss,
            best.epoch,
            o.history.len()
        );
    }
    println!("wrote {} model(s) to {}", outcomes.len(), dir.display());
    Ok(())
}

fn load_input_record(path: &Path, fs: Option<u32>) -> Result<EcgRecord> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("record")
        .to_string();
    let has_header = path.extension().is_some_and(|e| e == "f32") && sidecar_path(path).exists();
    match (has_header, fs) {
        (true, _) => Ok(load_record_with_header(path)?),
        (false, Some(fs)) => Ok(load_record(path, fs, &stem, &stem)?),
        (false, None) => {
            Err(UsageError(format!("{} has no header; pass --fs", path.display())).into())
        }
    }
}

fn detect(
    g: &GlobalArgs,
    mut cfg: RunConfig,
    model_path: &Path,
    record_path: &Path,
    fs: Option<u32>,
    dump_stream: bool,
) -> Result<()> {
    require(&[model_path.to_path_buf(), record_path.to_path_buf()])?;
    let model =
        CnnModel::load(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let record = load_input_record(record_path, fs)?;
    cfg.working_fs = model.config.fs;
    cfg.validate()?;
    let dir = output_dir(g, &cfg, "detect")?;
    dump_config(&cfg, &dir)?;

    let (det, peaks) = detect_native(&cfg, &model, &record)?;
    let ann_path = dir.join(format!("{}.ann", record.record_id));
    save_annotations(&peaks, &ann_path)?;
    if dump_stream {
        fs::write(
            dir.join(format!("{}.bits", record.record_id)),
            det.refined.to_ascii(),
        )?;
    }
    println!(
        "{}: {} R-peaks ({} refinement) -> {}",
        record.record_id,
        peaks.len(),
        cfg.pp_level,
        ann_path.display()
    );
    Ok(())
}

/// Fold models in a directory, ordered by fold index.
fn find_models(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if let Some(i) = name
            .strip_prefix("model_fold")
            .and_then(|r| r.strip_suffix(".qrscnn"))
            .and_then(|i| i.parse().ok())
        {
            found.push((i, path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(MissingInput(vec![dir.join(model_file(0))]).into());
    }
    Ok(found)
}

#[derive(Serialize)]
struct LevelSummary {
    pp_level: PpLevel,
    tolerance_ms: f64,
    ppv: f64,
    sensitivity: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    per_model_f1: Vec<f64>,
}

impl From<&DatasetReport> for LevelSummary {
    fn from(r: &DatasetReport) -> Self {
        Self {
            pp_level: r.pp_level,
            tolerance_ms: r.tolerance_ms,
            ppv: r.ppv,
            sensitivity: r.sensitivity,
            f1: r.f1,
            tp: r.counts.tp,
            fp: r.counts.fp,
            fn_: r.counts.fn_,
            per_model_f1: r.per_model.iter().map(|m| m.f1).collect(),
        }
    }
}

fn eval(
    g: &GlobalArgs,
    cfg: RunConfig,
    data: Option<PathBuf>,
    models: Option<PathBuf>,
    all_records: bool,
) -> Result<()> {
    let data_dir = data_dir(data, &cfg)?;
    let model_dir = models
        .or_else(|| cfg.paths.model_dir.clone())
        .ok_or_else(|| {
            UsageError("no model directory: pass --models or set paths.model_dir".into())
        })?;
    require(&[data_dir.join(MANIFEST_FILE), model_dir.clone()])?;
    let model_paths = find_models(&model_dir)?;
    if !all_records {
        require(&[model_dir.join(FOLDS_FILE)])?;
    }
    let data = load_working_dataset(&data_dir, &cfg)?;
    let models: Vec<(usize, CnnModel)> = model_paths
        .iter()
        .map(|(i, p)| {
            Ok((
                *i,
                CnnModel::load(p).with_context(|| format!("loading {}", p.display()))?,
            ))
        })
        .collect::<Result<_>>()?;

    let record_sets: Vec<Vec<qrs_core::eval::LabelledRecord>> = if all_records {
        models.iter().map(|_| data.clone()).collect()
    } else {
        let text = fs::read_to_string(model_dir.join(FOLDS_FILE))?;
        let splits: Vec<FoldSplit> = serde_json::from_str(&text)?;
        models
            .iter()
            .map(|(i, _)| {
                let split = splits
                    .iter()
                    .find(|s| s.fold_index == *i)
                    .with_context(|| format!("fold {i} missing from {FOLDS_FILE}"))?;
                Ok(held_out_records(&data, split))
            })
            .collect::<Result<_>>()?
    };
    let folds: Vec<(&CnnModel, &[qrs_core::eval::LabelledRecord])> = models
        .iter()
        .zip(&record_sets)
        .map(|((_, m), r)| (m, r.as_slice()))
        .collect();
    let reports =
        evaluate_folds_levels(&folds, &cfg.detector_settings()?, &PpLevel::ALL, cfg.tol_ms)?;

    let dir = output_dir(g, &cfg, "eval")?;
    dump_config(&cfg, &dir)?;
    let mut lines = Vec::new();
    for report in &reports {
        let records: Vec<_> = report
            .per_model
            .iter()
            .flat_map(|m| m.records.iter().cloned())
            .collect();
        write_json_lines(&records, &mut lines)?;
    }
    fs::write(dir.join("records.jsonl"), lines)?;
    let summary: Vec<LevelSummary> = reports.iter().map(LevelSummary::from).collect();
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    for s in &summary {
        println!(
            "{:<9} F1 {:.4}  PPV {:.4}  Se {:.4}  (tp {} fp {} fn {})",
            s.pp_level.to_string(),
            s.f1,
            s.ppv,
            s.sensitivity,
            s.tp,
            s.fp,
            s.fn_
        );
    }
    Ok(())
}

fn sweep(
    g: &GlobalArgs,
    cfg: RunConfig,
    data: Option<PathBuf>,
    depths: &[usize],
    no_cv: bool,
) -> Result<()> {
    if depths.is_empty() {
        bail!(UsageError("--depths must name at least one depth".into()));
    }
    let mut cfg = cfg;
    apply_fold_flags(&mut cfg, None, no_cv)?;
    let data_dir = data_dir(data, &cfg)?;
    let data = load_working_dataset(&data_dir, &cfg)?;
    let dir = output_dir(g, &cfg, "sweep")?;
    dump_config(&cfg, &dir)?;

    let mut trained = Vec::new();
    for &depth in depths {
        let mut c = cfg.clone();
        c.model.depth = depth;
        c.validate()?;
        info!("sweep: training depth {depth}");
        let outcomes = train_cross_validated(&c, &data, no_cv)?;
        let depth_dir = dir.join(format!("depth{depth}"));
        fs::create_dir_all(&depth_dir)?;
        write_fold_outputs(&depth_dir, &outcomes)?;
        trained.push(outcomes);
    }
    let held: Vec<Vec<Vec<qrs_core::eval::LabelledRecord>>> = trained
        .iter()
        .map(|os| {
            os.iter()
                .map(|o| held_out_records(&data, &o.split))
                .collect()
        })
        .collect();
    let entries: Vec<SweepEntry<'_>> = trained
        .iter()
        .zip(&held)
        .map(|(os, hs)| SweepEntry {
            models: os
                .iter()
                .zip(hs)
                .map(|(o, h)| (o.model.clone(), h.as_slice()))
                .collect(),
        })
        .collect();
    let rows = complexity_sweep(
        &entries,
        &PpLevel::ALL,
        &cfg.detector_settings()?,
        cfg.tol_ms,
        TimingConfig::default(),
    )?;
    let path = dir.join("sweep.csv");
    save_sweep_csv(&rows, &path)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}
