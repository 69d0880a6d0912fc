//! Refinement of the per-sample prediction stream and R-peak placement.
//!
//! Three cumulative levels clean the stream before localisation:
//!
//! - minimal: salt-and-pepper filter. Fills single zeros inside ones
//!   (`11011`, `1101`) and clears single ones inside zeros (`00100`,
//!   `0010`), longer pattern first, until nothing matches.
//! - moderate: minimal, then drops runs of ones shorter than 64 ms.
//! - advanced: moderate, then resolves candidates closer than 200 ms by
//!   removing the shorter run of each violating pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::BinaryMask;
use crate::signal_io::{AnnotationSet, EcgRecord};

const ONES_PATTERNS: [(&[u8], &[u8]); 2] = [
    (&[1, 1, 0, 1, 1], &[1, 1, 1, 1, 1]),
    (&[1, 1, 0, 1], &[1, 1, 1, 1]),
];
const ZEROS_PATTERNS: [(&[u8], &[u8]); 2] = [
    (&[0, 0, 1, 0, 0], &[0, 0, 0, 0, 0]),
    (&[0, 0, 1, 0], &[0, 0, 0, 0]),
];

/// Binary prediction for a whole record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionStream {
    pub record_id: String,
    pub bits: Vec<u8>,
    pub fs: u32,
}

impl PredictionStream {
    pub fn new(record_id: impl Into<String>, bits: Vec<u8>, fs: u32) -> Self {
        Self {
            record_id: record_id.into(),
            bits,
            fs,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// One ASCII `0`/`1` character per sample.
    pub fn to_ascii(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b == 1 { '1' } else { '0' })
            .collect()
    }

    pub fn from_ascii(record_id: &str, text: &str, fs: u32) -> Result<Self> {
        let bits = text
            .trim_end()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Parse {
                    line: 1,
                    token: other.to_string(),
                }),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self::new(record_id, bits, fs))
    }

    fn with_bits(&self, bits: Vec<u8>) -> Self {
        Self {
            record_id: self.record_id.clone(),
            bits,
            fs: self.fs,
        }
    }
}

/// A run of consecutive ones. Its length doubles as a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QrsCandidate {
    pub start: usize,
    pub length: usize,
    pub center: usize,
}

impl QrsCandidate {
    fn new(start: usize, length: usize) -> Self {
        Self {
            start,
            length,
            center: start + length / 2,
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

pub fn candidates(bits: &[u8]) -> Vec<QrsCandidate> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bits.len() {
        if bits[i] == 1 {
            let start = i;
            while i < bits.len() && bits[i] == 1 {
                i += 1;
            }
            out.push(QrsCandidate::new(start, i - start));
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PpLevel {
    None,
    Minimal,
    Moderate,
    Advanced,
}

impl PpLevel {
    pub const ALL: [PpLevel; 4] = [
        PpLevel::None,
        PpLevel::Minimal,
        PpLevel::Moderate,
        PpLevel::Advanced,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PpLevel::None => "none",
            PpLevel::Minimal => "minimal",
            PpLevel::Moderate => "moderate",
            PpLevel::Advanced => "advanced",
        }
    }
}

impl fmt::Display for PpLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PpLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PpLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown post-processing level {s:?}")))
    }
}

/// Sample-domain thresholds of the refinement levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PpThresholds {
    /// Shortest run kept by the moderate level.
    pub min_run: usize,
    /// Smallest centre-to-centre distance kept by the advanced level.
    pub min_rr: usize,
}

impl PpThresholds {
    pub fn from_ms(fs: u32, min_qrs_ms: f64, min_rr_ms: f64) -> Self {
        Self {
            min_run: (min_qrs_ms / 1000.0 * fs as f64).round() as usize,
            min_rr: (min_rr_ms / 1000.0 * fs as f64).round() as usize,
        }
    }

    /// 64 ms minimum QRS extent and 200 ms minimum R-R distance.
    pub fn for_fs(fs: u32) -> Self {
        Self::from_ms(fs, 64.0, 200.0)
    }
}

impl Default for PpThresholds {
    fn default() -> Self {
        Self::for_fs(100)
    }
}

fn sweep(bits: &mut [u8], pattern: &[u8], replacement: &[u8]) -> bool {
    let n = pattern.len();
    if bits.len() < n {
        return false;
    }
    let mut changed = false;
    for i in 0..=bits.len() - n {
        if &bits[i..i + n] == pattern {
            bits[i..i + n].copy_from_slice(replacement);
            changed = true;
        }
    }
    changed
}

/// Salt-and-pepper filter on raw bits.
pub fn salt_and_pepper(bits: &mut [u8]) {
    loop {
        let mut changed = false;
        for (p, r) in ONES_PATTERNS.iter().chain(ZEROS_PATTERNS.iter()) {
            changed |= sweep(bits, p, r);
        }
        if !changed {
            break;
        }
    }
}

/// Clears every run shorter than `min_run`.
pub fn drop_short_runs(bits: &mut [u8], min_run: usize) {
    for c in candidates(bits) {
        if c.length < min_run {
            bits[c.start..c.end()].fill(0);
        }
    }
}

/// Repeatedly resolves the leftmost pair of neighbouring candidates whose
/// centres are closer than `min_rr`, keeping the longer run (the earlier one
/// on ties).
pub fn drop_close_neighbours(bits: &mut [u8], min_rr: usize) {
    let mut cands = candidates(bits);
    loop {
        let violation = cands
            .windows(2)
            .position(|w| w[1].center - w[0].center < min_rr);
        let Some(i) = violation else { break };
        let victim = if cands[i + 1].length > cands[i].length {
            i
        } else {
            i + 1
        };
        let c = cands.remove(victim);
        bits[c.start..c.end()].fill(0);
    }
}

pub fn pp_minimal(stream: &PredictionStream) -> PredictionStream {
    let mut bits = stream.bits.clone();
    salt_and_pepper(&mut bits);
    stream.with_bits(bits)
}

pub fn pp_moderate(stream: &PredictionStream, th: PpThresholds) -> PredictionStream {
    let mut bits = stream.bits.clone();
    salt_and_pepper(&mut bits);
    drop_short_runs(&mut bits, th.min_run);
    stream.with_bits(bits)
}

pub fn pp_advanced(stream: &PredictionStream, th: PpThresholds) -> PredictionStream {
    let mut bits = stream.bits.clone();
    salt_and_pepper(&mut bits);
    drop_short_runs(&mut bits, th.min_run);
    drop_close_neighbours(&mut bits, th.min_rr);
    stream.with_bits(bits)
}

pub fn apply_pp(stream: &PredictionStream, level: PpLevel, th: PpThresholds) -> PredictionStream {
    match level {
        PpLevel::None => stream.clone(),
        PpLevel::Minimal => pp_minimal(stream),
        PpLevel::Moderate => pp_moderate(stream, th),
        PpLevel::Advanced => pp_advanced(stream, th),
    }
}

/// One segment's prediction and its place in the record.
#[derive(Debug, Clone, Copy)]
pub struct SegmentPrediction<'a> {
    pub start: usize,
    pub valid_len: usize,
    pub mask: &'a BinaryMask,
}

/// Concatenates the valid part of non-overlapping segment predictions.
pub fn stitch(
    record_id: &str,
    fs: u32,
    record_len: usize,
    parts: &[SegmentPrediction<'_>],
) -> Result<PredictionStream> {
    let mut bits = Vec::with_capacity(record_len);
    for p in parts {
        if p.start != bits.len() {
            let kind = if p.start < bits.len() {
                "overlap"
            } else {
                "gap"
            };
            return Err(Error::TilingViolation(format!(
                "{kind} at sample {} (expected segment start {})",
                p.start,
                bits.len()
            )));
        }
        if p.valid_len > p.mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "valid length {} exceeds mask length {}",
                p.valid_len,
                p.mask.len()
            )));
        }
        bits.extend_from_slice(&p.mask.values[..p.valid_len]);
    }
    if bits.len() != record_len {
        return Err(Error::TilingViolation(format!(
            "segments cover {} of {record_len} samples",
            bits.len()
        )));
    }
    Ok(PredictionStream::new(record_id, bits, fs))
}

/// How a run of ones is reduced to a single R-peak index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeakPlacement {
    /// Sample of largest absolute amplitude within the run, earliest on ties.
    #[default]
    Argmax,
    /// Run centre.
    Midpoint,
}

/// One R-peak per run of ones.
pub fn localize_peaks(
    stream: &PredictionStream,
    record: &EcgRecord,
    placement: PeakPlacement,
) -> Result<AnnotationSet> {
    if stream.len() != record.len() {
        return Err(Error::ShapeMismatch(format!(
            "stream length {} vs record length {}",
            stream.len(),
            record.len()
        )));
    }
    let peaks = candidates(&stream.bits)
        .into_iter()
        .map(|c| match placement {
            PeakPlacement::Midpoint => c.center,
            PeakPlacement::Argmax => {
                let mut best = c.start;
                let mut best_val = record.samples[c.start].abs();
                for i in c.start + 1..c.end() {
                    let v = record.samples[i].abs();
                    if v > best_val {
                        best = i;
                        best_val = v;
                    }
                }
                best
            }
        })
        .collect();
    AnnotationSet::new(record.record_id.clone(), peaks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> Vec<u8> {
        s.bytes().map(|b| b - b'0').collect()
    }

    fn stream(s: &str) -> PredictionStream {
        PredictionStream::new("r", bits(s), 100)
    }

    fn run_of(len: usize, at: usize, total: usize) -> Vec<u8> {
        let mut v = vec![0; total];
        v[at..at + len].fill(1);
        v
    }

    #[test]
    fn minimal_fills_and_clears() {
        assert_eq!(pp_minimal(&stream("11011")).bits, bits("11111"));
        assert_eq!(pp_minimal(&stream("1101")).bits, bits("1111"));
        assert_eq!(pp_minimal(&stream("00100")).bits, bits("00000"));
        assert_eq!(pp_minimal(&stream("0010")).bits, bits("0000"));
        assert_eq!(pp_minimal(&stream("1110111")).bits, bits("1111111"));
        for s in ["0000000", "1111111", ""] {
            assert_eq!(pp_minimal(&stream(s)).bits, bits(s));
        }
    }

    #[test]
    fn moderate_run_threshold() {
        let th = PpThresholds::default();
        assert_eq!(th.min_run, 6);
        let s = PredictionStream::new("r", run_of(5, 10, 30), 100);
        assert!(pp_moderate(&s, th).bits.iter().all(|&b| b == 0));
        let s = PredictionStream::new("r", run_of(6, 10, 30), 100);
        assert_eq!(pp_moderate(&s, th).bits, run_of(6, 10, 30));
    }

    #[test]
    fn moderate_single_zero_gap_is_filled_first() {
        // the lone zero joins the 5- and 6-runs into one 12-run
        let out = pp_moderate(&stream("0111110111111"), PpThresholds::default());
        assert_eq!(out.bits, bits("0111111111111"));
        // with a wider gap the runs stay apart and only the 6-run survives
        let out = pp_moderate(&stream("01111100011111100"), PpThresholds::default());
        assert_eq!(out.bits, bits("00000000011111100"));
    }

    #[test]
    fn advanced_keeps_longer_of_close_pair() {
        let th = PpThresholds::default();
        assert_eq!(th.min_rr, 20);
        // run A: 10..18 (len 8, centre 14); run B: 26..33 (len 7, centre 29)
        let mut v = run_of(8, 10, 60);
        v[26..33].fill(1);
        let out = pp_advanced(&PredictionStream::new("r", v, 100), th);
        assert_eq!(out.bits, run_of(8, 10, 60));
    }

    #[test]
    fn advanced_keeps_distant_pair() {
        let mut v = run_of(8, 10, 80);
        v[35..43].fill(1); // centres 14 and 39
        let out = pp_advanced(
            &PredictionStream::new("r", v.clone(), 100),
            PpThresholds::default(),
        );
        assert_eq!(out.bits, v);
    }

    #[test]
    fn advanced_resolves_chain_leftmost_first() {
        // A(6) centre 13, B(9) centre 28, C(6) centre 43
        let mut v = vec![0u8; 80];
        v[10..16].fill(1);
        v[24..33].fill(1);
        v[40..46].fill(1);
        let cs = candidates(&v);
        assert_eq!(
            cs.iter().map(|c| c.center).collect::<Vec<_>>(),
            vec![13, 28, 43]
        );
        let out = pp_advanced(&PredictionStream::new("r", v, 100), PpThresholds::default());
        assert_eq!(out.bits, {
            let mut w = vec![0u8; 80];
            w[24..33].fill(1);
            w
        });
    }

    #[test]
    fn advanced_tie_removes_later_candidate() {
        let mut v = run_of(7, 10, 60);
        v[25..32].fill(1);
        let out = pp_advanced(&PredictionStream::new("r", v, 100), PpThresholds::default());
        assert_eq!(out.bits, run_of(7, 10, 60));
    }

    #[test]
    fn thresholds_follow_sampling_rate() {
        assert_eq!(
            PpThresholds::for_fs(100),
            PpThresholds {
                min_run: 6,
                min_rr: 20
            }
        );
        assert_eq!(
            PpThresholds::for_fs(250),
            PpThresholds {
                min_run: 16,
                min_rr: 50
            }
        );
    }

    #[test]
    fn candidate_geometry() {
        let c = candidates(&bits("0111001111"));
        assert_eq!(c, vec![QrsCandidate::new(1, 3), QrsCandidate::new(6, 4)]);
        assert_eq!(c[0].center, 2);
        assert_eq!(c[1].center, 8);
    }

    #[test]
    fn stitch_examples() {
        let a = BinaryMask {
            values: vec![1, 0, 0],
        };
        let b = BinaryMask {
            values: vec![0, 1, 1],
        };
        let s = stitch(
            "r",
            100,
            6,
            &[
                SegmentPrediction {
                    start: 0,
                    valid_len: 3,
                    mask: &a,
                },
                SegmentPrediction {
                    start: 3,
                    valid_len: 3,
                    mask: &b,
                },
            ],
        )
        .unwrap();
        assert_eq!(s.to_ascii(), "100011");

        let full = BinaryMask {
            values: vec![1; 300],
        };
        let s = stitch(
            "r",
            100,
            400,
            &[
                SegmentPrediction {
                    start: 0,
                    valid_len: 300,
                    mask: &full,
                },
                SegmentPrediction {
                    start: 300,
                    valid_len: 100,
                    mask: &full,
                },
            ],
        )
        .unwrap();
        assert_eq!(s.len(), 400);

        let err = stitch(
            "r",
            100,
            5,
            &[
                SegmentPrediction {
                    start: 0,
                    valid_len: 3,
                    mask: &a,
                },
                SegmentPrediction {
                    start: 2,
                    valid_len: 3,
                    mask: &b,
                },
            ],
        );
        assert!(matches!(err, Err(Error::TilingViolation(_))));
        let err = stitch(
            "r",
            100,
            6,
            &[SegmentPrediction {
                start: 0,
                valid_len: 3,
                mask: &a,
            }],
        );
        assert!(matches!(err, Err(Error::TilingViolation(_))));
    }

    #[test]
    fn localize_examples() {
        let samples: Vec<f32> = (0..300)
            .map(|i| {
                let d = i as f32 - 150.0;
                (-0.5 * d * d / 9.0).exp()
            })
            .collect();
        let rec = EcgRecord::new("r", "r", 100, samples).unwrap();
        let s = PredictionStream::new("r", run_of(11, 145, 300), 100);
        assert_eq!(
            localize_peaks(&s, &rec, PeakPlacement::Argmax)
                .unwrap()
                .peaks,
            vec![150]
        );
        assert_eq!(
            localize_peaks(&s, &rec, PeakPlacement::Midpoint)
                .unwrap()
                .peaks,
            vec![150]
        );

        let empty = PredictionStream::new("r", vec![0; 300], 100);
        assert!(localize_peaks(&empty, &rec, PeakPlacement::Argmax)
            .unwrap()
            .is_empty());

        let flat = EcgRecord::new("f", "f", 100, vec![0.7; 50]).unwrap();
        let s = PredictionStream::new("f", run_of(6, 20, 50), 100);
        assert_eq!(
            localize_peaks(&s, &flat, PeakPlacement::Argmax)
                .unwrap()
                .peaks,
            vec![20]
        );

        let short = PredictionStream::new("f", vec![0; 10], 100);
        assert!(localize_peaks(&short, &flat, PeakPlacement::Argmax).is_err());
    }

    #[test]
    fn negative_deflection_counts_by_magnitude() {
        let mut samples = vec![0.0f32; 40];
        samples[12] = 0.5;
        samples[15] = -0.9;
        let rec = EcgRecord::new("n", "n", 100, samples).unwrap();
        let s = PredictionStream::new("n", run_of(8, 10, 40), 100);
        assert_eq!(
            localize_peaks(&s, &rec, PeakPlacement::Argmax)
                .unwrap()
                .peaks,
            vec![15]
        );
    }

    #[test]
    fn ascii_round_trip_and_levels() {
        let s = stream("0011100");
        assert_eq!(
            PredictionStream::from_ascii("r", &s.to_ascii(), 100).unwrap(),
            s
        );
        assert!(PredictionStream::from_ascii("r", "01x", 100).is_err());
        for l in PpLevel::ALL {
            assert_eq!(l.as_str().parse::<PpLevel>().unwrap(), l);
        }
        assert!("maximal".parse::<PpLevel>().is_err());
        assert_eq!(
            serde_json::to_string(&PpLevel::Advanced).unwrap(),
            "\"advanced\""
        );
    }
}
