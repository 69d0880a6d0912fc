//! Run configuration and the end-to-end experiment driver shared by the
//! CLI, the benches and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{CnnModel, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_folds_levels, DatasetReport, DetectorSettings, LabelledRecord};
use crate::postprocess::{PeakPlacement, PpLevel, PpThresholds};
use crate::preprocess::{
    make_mask_with_half_width, mask_half_width, resample, rescale_annotations, Segment, Segmenter,
};
use crate::rng::{derive_seed, seeded};
use crate::signal_io::{
    load_annotations, load_record_with_header, save_annotations, save_record, synth_ecg,
    AnnotationSet, EcgRecord, SynthParams,
};
use crate::training::{make_folds, train, FoldSplit, TrainConfig, TrainHistory};

/// Ranges for synthetic dataset generation. Each record draws its mean heart
/// rate uniformly from `[hr_min_bpm, hr_max_bpm]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub fs: u32,
    pub hr_min_bpm: f64,
    pub hr_max_bpm: f64,
    pub hr_jitter_pct: f64,
    pub qrs_width_ms: f64,
    pub qrs_amplitude: f64,
    pub noise_snr_db: f64,
    pub baseline_wander_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            fs: 100,
            hr_min_bpm: 50.0,
            hr_max_bpm: 110.0,
            hr_jitter_pct: 0.05,
            qrs_width_ms: 80.0,
            qrs_amplitude: 1.0,
            noise_snr_db: 10.0,
            baseline_wander_amplitude: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub working_fs: u32,
    pub mask_half_width_ms: f64,
    pub window_s: f64,
    pub train_hop_s: f64,
    pub pp_level: PpLevel,
    pub tol_ms: f64,
    pub min_qrs_ms: f64,
    pub min_rr_ms: f64,
    pub peak_placement: PeakPlacement,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            working_fs: 100,
            mask_half_width_ms: 50.0,
            window_s: 3.0,
            train_hop_s: 1.0,
            pp_level: PpLevel::Advanced,
            tol_ms: 75.0,
            min_qrs_ms: 64.0,
            min_rr_ms: 200.0,
            peak_placement: PeakPlacement::Argmax,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the master seed and the model and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("working_fs", self.working_fs as f64),
            ("mask_half_width_ms", self.mask_half_width_ms),
            ("window_s", self.window_s),
            ("train_hop_s", self.train_hop_s),
            ("tol_ms", self.tol_ms),
            ("min_qrs_ms", self.min_qrs_ms),
            ("min_rr_ms", self.min_rr_ms),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        self.segmenter()?;
        Ok(())
    }

    pub fn segmenter(&self) -> Result<Segmenter> {
        Segmenter::from_seconds(self.working_fs, self.window_s, self.train_hop_s)
    }

    pub fn thresholds(&self) -> PpThresholds {
        PpThresholds::from_ms(self.working_fs, self.min_qrs_ms, self.min_rr_ms)
    }

    pub fn detector_settings(&self) -> Result<DetectorSettings> {
        Ok(DetectorSettings {
            segmenter: self.segmenter()?,
            pp_level: self.pp_level,
            thresholds: self.thresholds(),
            placement: self.peak_placement,
        })
    }

    pub fn mask_half_width(&self) -> usize {
        mask_half_width(self.working_fs, self.mask_half_width_ms)
    }

    pub fn fold_model_config(&self, fold: usize) -> ModelConfig {
        ModelConfig {
            fs: self.working_fs,
            seed: derive_seed(self.model.seed, fold as u64),
            ..self.model.clone()
        }
    }
}

/// One record of a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub subject_id: String,
    pub fs: u32,
    /// Signal file relative to the manifest (`.f32` with JSON header).
    pub signal: String,
    /// Annotation file relative to the manifest.
    pub annotations: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    /// Files referenced by the manifest that do not exist.
    pub fn missing_files(&self, dir: &Path) -> Vec<PathBuf> {
        self.records
            .iter()
            .flat_map(|e| {
                let signal = dir.join(&e.signal);
                let header = crate::signal_io::sidecar_path(&signal);
                [signal, header, dir.join(&e.annotations)]
            })
            .filter(|p| !p.exists())
            .collect()
    }
}

/// Generates `n` seeded synthetic records, one subject per record.
pub fn generate_dataset(cfg: &RunConfig, n: usize) -> Result<Vec<LabelledRecord>> {
    let s = &cfg.synth;
    (0..n)
        .map(|i| {
            let mut rng = seeded(derive_seed(cfg.seed, 1_000_000 + i as u64));
            let hr = if s.hr_max_bpm > s.hr_min_bpm {
                rng.random_range(s.hr_min_bpm..=s.hr_max_bpm)
            } else {
                s.hr_min_bpm
            };
            let params = SynthParams {
                duration_s: s.duration_s,
                fs: s.fs,
                mean_hr_bpm: hr,
                hr_jitter_pct: s.hr_jitter_pct,
                qrs_width_ms: s.qrs_width_ms,
                qrs_amplitude: s.qrs_amplitude,
                noise_snr_db: s.noise_snr_db,
                baseline_wander_amplitude: s.baseline_wander_amplitude,
                seed: rng.random(),
            };
            synth_ecg(&params, &format!("syn{i:03}"))
        })
        .collect()
}

/// Writes records as `.f32` + `.json` + `.ann` triples plus a manifest.
pub fn write_dataset(dir: &Path, records: &[LabelledRecord]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (rec, ann) in records {
        let signal = format!("{}.f32", rec.record_id);
        let annotations = format!("{}.ann", rec.record_id);
        save_record(rec, &dir.join(&signal))?;
        save_annotations(ann, &dir.join(&annotations))?;
        manifest.records.push(ManifestEntry {
            record_id: rec.record_id.clone(),
            subject_id: rec.subject_id.clone(),
            fs: rec.fs,
            signal,
            annotations,
        });
    }
    manifest.save(dir)?;
    Ok(manifest)
}

/// Loads every record listed in a dataset directory at its native rate.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabelledRecord>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .records
        .iter()
        .map(|e| {
            let mut rec = load_record_with_header(&dir.join(&e.signal))?;
            rec.record_id = e.record_id.clone();
            rec.subject_id = e.subject_id.clone();
            let mut ann = load_annotations(&dir.join(&e.annotations))?.annotations;
            ann.record_id = e.record_id.clone();
            ann.check_bounds(rec.len())?;
            Ok((rec, ann))
        })
        .collect()
}

/// Resamples a record and its annotations to the working rate.
pub fn to_working_rate(record: &EcgRecord, ann: &AnnotationSet, fs: u32) -> Result<LabelledRecord> {
    let rec = resample(record, fs)?;
    let ann = rescale_annotations(ann, record.fs, fs, rec.len());
    Ok((rec, ann))
}

pub fn dataset_to_working_rate(data: &[LabelledRecord], fs: u32) -> Result<Vec<LabelledRecord>> {
    data.iter()
        .map(|(r, a)| to_working_rate(r, a, fs))
        .collect()
}

/// Labelled overlapping windows for one working-rate record.
pub fn training_segments(
    cfg: &RunConfig,
    record: &EcgRecord,
    ann: &AnnotationSet,
) -> Result<Vec<Segment>> {
    let mask = make_mask_with_half_width(ann, record.len(), cfg.mask_half_width());
    cfg.segmenter()?.train(record, &mask)
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub model: CnnModel,
    pub history: TrainHistory,
}

impl FoldOutcome {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.history.best().map(|e| e.val_loss)
    }
}

/// Subject-wise k-fold training on working-rate records. With
/// `only_first_fold`, a single 80/20-style split is trained.
pub fn train_cross_validated(
    cfg: &RunConfig,
    data: &[LabelledRecord],
    only_first_fold: bool,
) -> Result<Vec<FoldOutcome>> {
    let subjects: Vec<String> = data.iter().map(|(r, _)| r.subject_id.clone()).collect();
    let folds = make_folds(&subjects, cfg.train.k_folds, cfg.train.seed)?;
    let per_record: Vec<Vec<Segment>> = data
        .iter()
        .map(|(r, a)| training_segments(cfg, r, a))
        .collect::<Result<_>>()?;

    let n_folds = if only_first_fold { 1 } else { folds.len() };
    folds
        .into_iter()
        .take(n_folds)
        .map(|split| {
            let mut train_segs = Vec::new();
            let mut val_segs = Vec::new();
            for ((rec, _), segs) in data.iter().zip(&per_record) {
                if split.val_subjects.contains(&rec.subject_id) {
                    val_segs.extend_from_slice(segs);
                } else {
                    train_segs.extend_from_slice(segs);
                }
            }
            let fold = split.fold_index;
            let model = CnnModel::init(cfg.fold_model_config(fold))?;
            let train_cfg = TrainConfig {
                seed: derive_seed(cfg.train.seed, fold as u64),
                ..cfg.train.clone()
            };
            log::info!(
                "fold {fold}: {} train / {} val windows",
                train_segs.len(),
                val_segs.len()
            );
            let (model, history) =
                train(model, &train_segs, &val_segs, &train_cfg).map_err(|e| match e {
                    Error::Diverged { epoch, detail } => Error::Diverged {
                        epoch,
                        detail: format!("fold {fold}: {detail}"),
                    },
                    other => other,
                })?;
            Ok(FoldOutcome {
                split,
                model,
                history,
            })
        })
        .collect()
}

/// Records belonging to the validation subjects of a split.
pub fn held_out_records(data: &[LabelledRecord], split: &FoldSplit) -> Vec<LabelledRecord> {
    data.iter()
        .filter(|(r, _)| split.val_subjects.contains(&r.subject_id))
        .cloned()
        .collect()
}

/// Scores each fold model on its own held-out subjects, for every level.
pub fn evaluate_held_out(
    cfg: &RunConfig,
    data: &[LabelledRecord],
    outcomes: &[FoldOutcome],
    levels: &[PpLevel],
) -> Result<Vec<DatasetReport>> {
    let held: Vec<Vec<LabelledRecord>> = outcomes
        .iter()
        .map(|o| held_out_records(data, &o.split))
        .collect();
    let folds: Vec<(&CnnModel, &[LabelledRecord])> = outcomes
        .iter()
        .zip(&held)
        .map(|(o, h)| (&o.model, h.as_slice()))
        .collect();
    evaluate_folds_levels(&folds, &cfg.detector_settings()?, levels, cfg.tol_ms)
}

/// Detected R-peaks of a record at its native rate, plus the working-rate
/// detection they came from.
pub fn detect_native(
    cfg: &RunConfig,
    model: &CnnModel,
    record: &EcgRecord,
) -> Result<(crate::eval::Detection, AnnotationSet)> {
    let working = resample(record, cfg.working_fs)?;
    let det = crate::eval::detect(&working, model, &cfg.detector_settings()?)?;
    let native = rescale_annotations(&det.peaks, cfg.working_fs, record.fs, record.len());
    Ok((det, native))
}
