//! Resampling, label masks, windowing and per-window z-scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{AnnotationSet, EcgRecord};

/// Working sampling rate of the detector.
pub const WORKING_FS: u32 = 100;

const ANTI_ALIAS_TAPS: usize = 51;
const ANTI_ALIAS_CUTOFF: f64 = 0.45;
const DEGENERATE_STD: f64 = 1e-8;

/// Per-sample QRS labels (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryMask {
    pub values: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn slice(&self, start: usize, len: usize) -> BinaryMask {
        BinaryMask {
            values: self.values[start..start + len].to_vec(),
        }
    }
}

/// A fixed-length window cut from a record.
///
/// Test windows at the end of a record may be padded; only the first
/// `valid_len` samples carry signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub record_id: String,
    pub start: usize,
    pub signal: Vec<f32>,
    /// Training label, absent for test windows.
    pub mask: Option<BinaryMask>,
    pub valid_len: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }
}

/// Hamming-windowed sinc low-pass with unit DC gain. `cutoff` is in
/// cycles per sample.
pub fn lowpass_fir(taps: usize, cutoff: f64) -> Vec<f64> {
    let m = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let x = n as f64 - m;
            let sinc = if x == 0.0 {
                2.0 * cutoff
            } else {
                (std::f64::consts::TAU * cutoff * x).sin() / (std::f64::consts::PI * x)
            };
            let w = if taps > 1 {
                0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / (taps - 1) as f64).cos()
            } else {
                1.0
            };
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &hj) in h.iter().enumerate() {
                let k = i as isize + half as isize - j as isize;
                if k >= 0 && (k as usize) < n {
                    acc += hj * x[k as usize];
                }
            }
            acc
        })
        .collect()
}

/// Zero-phase filtering: forward then time-reversed pass, with odd-reflection
/// padding at both ends to suppress edge transients.
pub fn filtfilt(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (3 * h.len()).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let mut y = convolve_same(&ext, h);
    y.reverse();
    let mut y = convolve_same(&y, h);
    y.reverse();
    y[pad..pad + n].to_vec()
}

fn linear_interp(x: &[f64], step: f64, n_out: usize) -> Vec<f64> {
    let last = x.len() - 1;
    (0..n_out)
        .map(|i| {
            let pos = (i as f64 * step).min(last as f64);
            let k = pos.floor() as usize;
            if k >= last {
                x[last]
            } else {
                let frac = pos - k as f64;
                x[k] + frac * (x[k + 1] - x[k])
            }
        })
        .collect()
}

/// Resamples a record to `target_fs`.
///
/// Downsampling first applies a zero-phase 51-tap anti-alias filter with a
/// cutoff of `0.45 * target_fs`; both directions then interpolate linearly.
pub fn resample(record: &EcgRecord, target_fs: u32) -> Result<EcgRecord> {
    if target_fs == 0 {
        return Err(Error::InvalidParameter(
            "target rate must be positive".into(),
        ));
    }
    if record.is_empty() {
        return Err(Error::EmptyRecord);
    }
    if record.fs == target_fs {
        return Ok(record.clone());
    }
    let n_in = record.len();
    let n_out = ((n_in as f64 * target_fs as f64 / record.fs as f64).round() as usize).max(1);
    let x: Vec<f64> = record.samples.iter().map(|&v| v as f64).collect();
    let filtered = if target_fs < record.fs {
        let cutoff = ANTI_ALIAS_CUTOFF * target_fs as f64 / record.fs as f64;
        filtfilt(&x, &lowpass_fir(ANTI_ALIAS_TAPS, cutoff))
    } else {
        x
    };
    let step = record.fs as f64 / target_fs as f64;
    let y = linear_interp(&filtered, step, n_out);
    EcgRecord::new(
        record.record_id.clone(),
        record.subject_id.clone(),
        target_fs,
        y.into_iter().map(|v| v as f32).collect(),
    )
}

/// Maps annotation indices onto a resampled grid of `out_len` samples.
pub fn rescale_annotations(
    ann: &AnnotationSet,
    fs_in: u32,
    fs_out: u32,
    out_len: usize,
) -> AnnotationSet {
    let ratio = fs_out as f64 / fs_in as f64;
    let max_index = out_len.saturating_sub(1);
    let mut peaks: Vec<usize> = Vec::with_capacity(ann.len());
    for &p in &ann.peaks {
        let q = ((p as f64 * ratio).round() as usize).min(max_index);
        if peaks.last() != Some(&q) {
            peaks.push(q);
        }
    }
    AnnotationSet {
        record_id: ann.record_id.clone(),
        peaks,
    }
}

/// Half-width in samples of the labelled region around each R-peak.
pub fn mask_half_width(fs: u32, half_width_ms: f64) -> usize {
    (half_width_ms / 1000.0 * fs as f64).round() as usize
}

/// Labels `[r - h, r + h]` around each peak, `h = round(0.05 * fs)`.
pub fn make_mask(ann: &AnnotationSet, length: usize, fs: u32) -> BinaryMask {
    make_mask_with_half_width(ann, length, mask_half_width(fs, 50.0))
}

pub fn make_mask_with_half_width(ann: &AnnotationSet, length: usize, half: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(length);
    if length == 0 {
        return mask;
    }
    for &r in &ann.peaks {
        if r >= length {
            continue;
        }
        let lo = r.saturating_sub(half);
        let hi = (r + half).min(length - 1);
        mask.values[lo..=hi].iter_mut().for_each(|v| *v = 1);
    }
    mask
}

/// Z-scores a window with the population standard deviation. Windows with
/// a standard deviation below 1e-8 map to all zeros.
pub fn normalize(signal: &[f32]) -> Vec<f32> {
    if signal.is_empty() {
        return Vec::new();
    }
    let n = signal.len() as f64;
    let mean = signal.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = signal
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return vec![0.0; signal.len()];
    }
    signal
        .iter()
        .map(|&x| ((x as f64 - mean) / std) as f32)
        .collect()
}

/// Window geometry in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segmenter {
    pub window: usize,
    pub train_hop: usize,
}

impl Default for Segmenter {
    fn default() -> Self {
        Self {
            window: 300,
            train_hop: 100,
        }
    }
}

impl Segmenter {
    pub fn from_seconds(fs: u32, window_s: f64, train_hop_s: f64) -> Result<Self> {
        let window = (window_s * fs as f64).round() as usize;
        let train_hop = (train_hop_s * fs as f64).round() as usize;
        if window == 0 || train_hop == 0 {
            return Err(Error::InvalidParameter(
                "window and hop must span at least one sample".into(),
            ));
        }
        Ok(Self { window, train_hop })
    }

    /// Overlapping labelled windows; windows running past the end are dropped.
    pub fn train(&self, record: &EcgRecord, mask: &BinaryMask) -> Result<Vec<Segment>> {
        if mask.len() != record.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} vs record length {}",
                mask.len(),
                record.len()
            )));
        }
        if record.len() < self.window {
            return Ok(Vec::new());
        }
        let count = (record.len() - self.window) / self.train_hop + 1;
        Ok((0..count)
            .map(|k| {
                let start = k * self.train_hop;
                let end = start + self.window;
                Segment {
                    record_id: record.record_id.clone(),
                    start,
                    signal: normalize(&record.samples[start..end]),
                    mask: Some(mask.slice(start, self.window)),
                    valid_len: self.window,
                }
            })
            .collect())
    }

    /// Non-overlapping windows covering the record; the last one is
    /// zero-padded after normalisation.
    pub fn test(&self, record: &EcgRecord) -> Vec<Segment> {
        record
            .samples
            .chunks(self.window)
            .enumerate()
            .map(|(k, chunk)| {
                let mut signal = normalize(chunk);
                signal.resize(self.window, 0.0);
                Segment {
                    record_id: record.record_id.clone(),
                    start: k * self.window,
                    signal,
                    mask: None,
                    valid_len: chunk.len(),
                }
            })
            .collect()
    }
}

/// Training windows with the default 300-sample window and 100-sample hop.
pub fn segment_train(record: &EcgRecord, mask: &BinaryMask) -> Result<Vec<Segment>> {
    Segmenter::default().train(record, mask)
}

/// Test windows with the default 300-sample window.
pub fn segment_test(record: &EcgRecord) -> Vec<Segment> {
    Segmenter::default().test(record)
}
