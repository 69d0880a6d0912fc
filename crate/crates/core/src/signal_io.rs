//! ECG records, reference annotations and their on-disk formats.
//!
//! Signals are stored either as text (`.csv`, one value per line) or as raw
//! little-endian `f32` (`.f32`) next to a `<name>.json` header. Annotations
//! (`.ann`) hold one sample index per line. [`synth_ecg`] produces seeded
//! synthetic records with exact ground truth for desk-scale experiments.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, BoxMuller};

/// A single-lead ECG recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub subject_id: String,
    /// Sampling rate in Hz.
    pub fs: u32,
    /// Amplitudes in millivolts.
    pub samples: Vec<f32>,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        subject_id: impl Into<String>,
        fs: u32,
        samples: Vec<f32>,
    ) -> Result<Self> {
        if fs == 0 {
            return Err(Error::InvalidParameter(
                "sampling rate must be positive".into(),
            ));
        }
        if samples.is_empty() {
            return Err(Error::EmptyRecord);
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { line: i + 1 });
        }
        Ok(Self {
            record_id: record_id.into(),
            subject_id: subject_id.into(),
            fs,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs as f64
    }
}

/// Reference R-peak positions for one record, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub record_id: String,
    pub peaks: Vec<usize>,
}

impl AnnotationSet {
    pub fn new(record_id: impl Into<String>, peaks: Vec<usize>) -> Result<Self> {
        if peaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "annotation indices must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            record_id: record_id.into(),
            peaks,
        })
    }

    pub fn empty(record_id: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            peaks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }

    /// Checks that every index addresses a sample of a record of `len` samples.
    pub fn check_bounds(&self, len: usize) -> Result<()> {
        match self.peaks.last() {
            Some(&index) if index >= len => Err(Error::AnnotationOutOfRange { index, len }),
            _ => Ok(()),
        }
    }
}

/// Result of [`load_annotations`]. Unsorted or duplicated input is repaired
/// and reported rather than rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedAnnotations {
    pub annotations: AnnotationSet,
    pub was_unsorted: bool,
    pub duplicates_removed: usize,
}

/// JSON header stored next to a `.f32` signal file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub record_id: String,
    pub subject_id: String,
    pub fs: u32,
    pub n_samples: usize,
}

fn is_binary(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("f32")
}

/// Path of the JSON header belonging to a `.f32` file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Loads a signal from a `.csv` or `.f32` file, taking metadata from the caller.
pub fn load_record(path: &Path, fs: u32, record_id: &str, subject_id: &str) -> Result<EcgRecord> {
    let samples = if is_binary(path) {
        read_f32(path)?
    } else {
        read_csv(path)?
    };
    EcgRecord::new(record_id, subject_id, fs, samples)
}

/// Loads a `.f32` signal using the metadata in its JSON header.
pub fn load_record_with_header(path: &Path) -> Result<EcgRecord> {
    let header_path = sidecar_path(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: RecordHeader = serde_json::from_str(&text)?;
    let record = load_record(path, header.fs, &header.record_id, &header.subject_id)?;
    if record.len() != header.n_samples {
        return Err(Error::ShapeMismatch(format!(
            "{} declares {} samples but holds {}",
            header_path.display(),
            header.n_samples,
            record.len()
        )));
    }
    Ok(record)
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::EmptyRecord);
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedBinary(bytes.len()));
    }
    let samples: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { line: i + 1 });
    }
    Ok(samples)
}

fn read_csv(path: &Path) -> Result<Vec<f32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        let value: f32 = token.parse().map_err(|_| Error::Parse {
            line: i + 1,
            token: token.to_string(),
        })?;
        if !value.is_finite() {
            return Err(Error::NonFinite { line: i + 1 });
        }
        samples.push(value);
    }
    if samples.is_empty() {
        return Err(Error::EmptyRecord);
    }
    Ok(samples)
}

/// Writes a record as `.csv` (7 significant digits) or as `.f32` plus header.
pub fn save_record(record: &EcgRecord, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        if is_binary(path) {
            for x in &record.samples {
                out.write_all(&x.to_le_bytes())?;
            }
        } else {
            for x in &record.samples {
                writeln!(out, "{x:.6e}")?;
            }
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))?;

    if is_binary(path) {
        let header = RecordHeader {
            record_id: record.record_id.clone(),
            subject_id: record.subject_id.clone(),
            fs: record.fs,
            n_samples: record.len(),
        };
        let header_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&header)?;
        fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;
    }
    Ok(())
}

/// Reads a `.ann` file. The record id is taken from the file stem.
pub fn load_annotations(path: &Path) -> Result<LoadedAnnotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        let value: i64 = token.parse().map_err(|_| Error::Parse {
            line: i + 1,
            token: token.to_string(),
        })?;
        if value < 0 {
            return Err(Error::NegativeIndex { line: i + 1, value });
        }
        raw.push(value as usize);
    }

    let was_unsorted = raw.windows(2).any(|w| w[0] > w[1]);
    raw.sort_unstable();
    let before = raw.len();
    raw.dedup();
    let duplicates_removed = before - raw.len();
    if was_unsorted {
        log::warn!("{}: annotations were not sorted", path.display());
    }

    let record_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    Ok(LoadedAnnotations {
        annotations: AnnotationSet {
            record_id,
            peaks: raw,
        },
        was_unsorted,
        duplicates_removed,
    })
}

pub fn save_annotations(ann: &AnnotationSet, path: &Path) -> Result<()> {
    let mut text = String::with_capacity(ann.len() * 6);
    for p in &ann.peaks {
        text.push_str(&p.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic ECG generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub duration_s: f64,
    pub fs: u32,
    pub mean_hr_bpm: f64,
    /// Uniform RR perturbation, as a fraction of the nominal interval.
    pub hr_jitter_pct: f64,
    /// Full width at half maximum of each QRS bump.
    pub qrs_width_ms: f64,
    pub qrs_amplitude: f64,
    /// Signal-to-noise ratio in dB; `+inf` (stored as JSON `null`) disables noise.
    #[serde(with = "infinite_as_null")]
    pub noise_snr_db: f64,
    pub baseline_wander_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            fs: 100,
            mean_hr_bpm: 72.0,
            hr_jitter_pct: 0.05,
            qrs_width_ms: 80.0,
            qrs_amplitude: 1.0,
            noise_snr_db: 10.0,
            baseline_wander_amplitude: 0.1,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(30.0..=220.0).contains(&self.mean_hr_bpm) {
            return Err(Error::InvalidParameter(format!(
                "mean_hr_bpm {} outside [30, 220]",
                self.mean_hr_bpm
            )));
        }
        if self.duration_s.is_nan() || self.duration_s <= 0.0 {
            return Err(Error::InvalidParameter(
                "duration_s must be positive".into(),
            ));
        }
        if self.fs < 100 {
            return Err(Error::InvalidParameter(format!(
                "fs {} below 100 Hz",
                self.fs
            )));
        }
        if !(0.0..1.0).contains(&self.hr_jitter_pct) {
            return Err(Error::InvalidParameter(
                "hr_jitter_pct must lie in [0, 1)".into(),
            ));
        }
        if self.qrs_width_ms.is_nan() || self.qrs_width_ms <= 0.0 {
            return Err(Error::InvalidParameter(
                "qrs_width_ms must be positive".into(),
            ));
        }
        if self.noise_snr_db.is_nan() {
            return Err(Error::InvalidParameter("noise_snr_db is NaN".into()));
        }
        Ok(())
    }
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

const BEAT_ONSET_S: f64 = 0.5;
const WANDER_HZ: f64 = 0.3;

/// Generates a seeded synthetic ECG and the sample index of every QRS centre.
///
/// Each beat is a Gaussian bump centred exactly on its annotated sample.
/// Beats start at 0.5 s and advance by `60 / mean_hr_bpm` seconds, each
/// interval scaled by a uniform factor in `1 ± hr_jitter_pct`. A 0.3 Hz
/// sinusoidal wander and white Gaussian noise at the requested SNR (relative
/// to the power of bumps plus wander) are added on top.
pub fn synth_ecg(params: &SynthParams, record_id: &str) -> Result<(EcgRecord, AnnotationSet)> {
    use rand::Rng;

    params.validate()?;
    let fs = params.fs as f64;
    let n = (params.duration_s * fs).round() as usize;
    if n == 0 {
        return Err(Error::EmptyRecord);
    }
    let mut rng = seeded(params.seed);

    let rr = 60.0 / params.mean_hr_bpm;
    let mut peaks = Vec::new();
    let mut t = BEAT_ONSET_S;
    loop {
        let idx = (t * fs).round() as usize;
        if idx >= n {
            break;
        }
        if peaks.last().is_none_or(|&last| idx > last) {
            peaks.push(idx);
        }
        let jitter = if params.hr_jitter_pct > 0.0 {
            rng.random_range(-params.hr_jitter_pct..=params.hr_jitter_pct)
        } else {
            0.0
        };
        t += rr * (1.0 + jitter);
    }

    let sigma = params.qrs_width_ms / 1000.0 * fs / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let reach = (6.0 * sigma).ceil() as usize;
    let mut clean = vec![0.0f64; n];
    for &p in &peaks {
        let lo = p.saturating_sub(reach);
        let hi = (p + reach).min(n - 1);
        for (i, v) in clean.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let d = i as f64 - p as f64;
            *v += params.qrs_amplitude * (-0.5 * d * d / (sigma * sigma)).exp();
        }
    }

    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    if params.baseline_wander_amplitude != 0.0 {
        for (i, v) in clean.iter_mut().enumerate() {
            let ti = i as f64 / fs;
            *v += params.baseline_wander_amplitude
                * (std::f64::consts::TAU * WANDER_HZ * ti + phase).sin();
        }
    }

    if params.noise_snr_db.is_finite() {
        let power = clean.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let noise_std = (power / 10f64.powf(params.noise_snr_db / 10.0)).sqrt();
        let mut gauss = BoxMuller::new();
        for v in clean.iter_mut() {
            *v += noise_std * gauss.sample(&mut rng);
        }
    }

    let record = EcgRecord::new(
        record_id,
        record_id,
        params.fs,
        clean.iter().map(|&x| x as f32).collect(),
    )?;
    let ann = AnnotationSet::new(record_id, peaks)?;
    Ok((record, ann))
}
