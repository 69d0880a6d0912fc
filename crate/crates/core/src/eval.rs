//! Beat-level scoring and the depth x refinement-level sweep.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{count_macs, count_params, CnnModel};
use crate::error::{Error, Result};
use crate::postprocess::{
    apply_pp, localize_peaks, stitch, PeakPlacement, PpLevel, PpThresholds, PredictionStream,
    SegmentPrediction,
};
use crate::preprocess::{BinaryMask, Segment, Segmenter};
use crate::signal_io::{AnnotationSet, EcgRecord};

/// Default beat-matching tolerance.
pub const DEFAULT_TOLERANCE_MS: f64 = 75.0;

/// Anything that turns a test window into a per-sample QRS mask.
pub trait SegmentPredictor: Sync {
    fn predict_segment(&self, segment: &Segment) -> Result<BinaryMask>;
}

impl SegmentPredictor for CnnModel {
    fn predict_segment(&self, segment: &Segment) -> Result<BinaryMask> {
        self.predict_mask(&segment.signal)
    }
}

/// Replays a known record-level mask, bypassing any model.
#[derive(Debug, Clone)]
pub struct MaskOracle {
    pub mask: BinaryMask,
}

impl SegmentPredictor for MaskOracle {
    fn predict_segment(&self, segment: &Segment) -> Result<BinaryMask> {
        let end = segment.start + segment.valid_len;
        if end > self.mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "segment ends at {end}, oracle mask has {} samples",
                self.mask.len()
            )));
        }
        let mut values = self.mask.values[segment.start..end].to_vec();
        values.resize(segment.len(), 0);
        Ok(BinaryMask { values })
    }
}

/// Everything downstream of the model that shapes the detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSettings {
    pub segmenter: Segmenter,
    pub pp_level: PpLevel,
    pub thresholds: PpThresholds,
    pub placement: PeakPlacement,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self {
            segmenter: Segmenter::default(),
            pp_level: PpLevel::Advanced,
            thresholds: PpThresholds::default(),
            placement: PeakPlacement::Argmax,
        }
    }
}

impl DetectorSettings {
    pub fn with_level(self, pp_level: PpLevel) -> Self {
        Self { pp_level, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Stitched model output before refinement.
    pub raw: PredictionStream,
    pub refined: PredictionStream,
    pub peaks: AnnotationSet,
}

/// Record-level raw prediction from non-overlapping test windows.
pub fn predict_stream<P: SegmentPredictor + ?Sized>(
    record: &EcgRecord,
    predictor: &P,
    segmenter: Segmenter,
) -> Result<PredictionStream> {
    let segments = segmenter.test(record);
    let masks = segments
        .iter()
        .map(|s| predictor.predict_segment(s))
        .collect::<Result<Vec<_>>>()?;
    let parts: Vec<SegmentPrediction<'_>> = segments
        .iter()
        .zip(&masks)
        .map(|(s, m)| SegmentPrediction {
            start: s.start,
            valid_len: s.valid_len,
            mask: m,
        })
        .collect();
    stitch(&record.record_id, record.fs, record.len(), &parts)
}

/// Segment, predict, stitch, refine and localise. `record` must already be
/// at the detector's working rate.
pub fn detect<P: SegmentPredictor + ?Sized>(
    record: &EcgRecord,
    predictor: &P,
    settings: &DetectorSettings,
) -> Result<Detection> {
    let raw = predict_stream(record, predictor, settings.segmenter)?;
    refine(record, raw, settings)
}

fn refine(
    record: &EcgRecord,
    raw: PredictionStream,
    settings: &DetectorSettings,
) -> Result<Detection> {
    let refined = apply_pp(&raw, settings.pp_level, settings.thresholds);
    let peaks = localize_peaks(&refined, record, settings.placement)?;
    Ok(Detection {
        raw,
        refined,
        peaks,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(detected, reference)` index pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Tolerance window in samples.
pub fn tolerance_samples(tol_ms: f64, fs: u32) -> usize {
    (tol_ms * fs as f64 / 1000.0).round() as usize
}

/// Greedy chronological one-to-one matching within `±round(tol_ms * fs / 1000)`.
pub fn match_beats(
    detected: &AnnotationSet,
    reference: &AnnotationSet,
    tol_ms: f64,
    fs: u32,
) -> MatchResult {
    let w = tolerance_samples(tol_ms, fs);
    let (d, r) = (&detected.peaks, &reference.peaks);
    let mut out = MatchResult::default();
    let (mut i, mut j) = (0, 0);
    while i < d.len() && j < r.len() {
        if d[i].abs_diff(r[j]) <= w {
            out.pairs.push((d[i], r[j]));
            i += 1;
            j += 1;
        } else if d[i] < r[j] {
            out.fp += 1;
            i += 1;
        } else {
            out.fn_ += 1;
            j += 1;
        }
    }
    out.fp += d.len() - i;
    out.fn_ += r.len() - j;
    out.tp = out.pairs.len();
    out
}

/// Harmonic mean of PPV and sensitivity; 0 when both are 0.
pub fn f1_score(ppv: f64, sensitivity: f64) -> f64 {
    let denom = ppv + sensitivity;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * ppv * sensitivity / denom
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Pooled beat counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn ppv(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.ppv(), self.sensitivity())
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

impl From<&MatchResult> for Counts {
    fn from(m: &MatchResult) -> Self {
        Self {
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub record_id: String,
    pub pp_level: PpLevel,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ppv: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub tolerance_ms: f64,
    /// Neither reference nor detected beats were present.
    pub zero_beat: bool,
}

impl EvalReport {
    fn from_counts(record_id: &str, pp_level: PpLevel, c: Counts, tolerance_ms: f64) -> Self {
        Self {
            record_id: record_id.to_string(),
            pp_level,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            ppv: c.ppv(),
            sensitivity: c.sensitivity(),
            f1: c.f1(),
            tolerance_ms,
            zero_beat: c.tp + c.fp + c.fn_ == 0,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    pub fn detections(&self) -> usize {
        self.tp + self.fp
    }
}

/// Scores one record at the working rate against its reference beats.
pub fn evaluate_record<P: SegmentPredictor + ?Sized>(
    record: &EcgRecord,
    reference: &AnnotationSet,
    predictor: &P,
    settings: &DetectorSettings,
    tol_ms: f64,
) -> Result<EvalReport> {
    let det = detect(record, predictor, settings)?;
    Ok(score_detection(
        record,
        reference,
        &det.peaks,
        settings.pp_level,
        tol_ms,
    ))
}

fn score_detection(
    record: &EcgRecord,
    reference: &AnnotationSet,
    detected: &AnnotationSet,
    level: PpLevel,
    tol_ms: f64,
) -> EvalReport {
    let m = match_beats(detected, reference, tol_ms, record.fs);
    EvalReport::from_counts(&record.record_id, level, Counts::from(&m), tol_ms)
}

/// Scores every refinement level from a single model pass per record.
pub fn evaluate_record_levels<P: SegmentPredictor + ?Sized>(
    record: &EcgRecord,
    reference: &AnnotationSet,
    predictor: &P,
    settings: &DetectorSettings,
    levels: &[PpLevel],
    tol_ms: f64,
) -> Result<Vec<EvalReport>> {
    let raw = predict_stream(record, predictor, settings.segmenter)?;
    levels
        .iter()
        .map(|&level| {
            let det = refine(record, raw.clone(), &settings.with_level(level))?;
            Ok(score_detection(
                record, reference, &det.peaks, level, tol_ms,
            ))
        })
        .collect()
}

/// A labelled record at the working rate.
pub type LabelledRecord = (EcgRecord, AnnotationSet);

/// Micro-averaged score of one model over its record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub counts: Counts,
    pub ppv: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub records: Vec<EvalReport>,
}

impl ModelScore {
    fn from_records(records: Vec<EvalReport>) -> Self {
        let mut counts = Counts::default();
        for r in &records {
            counts += r.counts();
        }
        Self {
            counts,
            ppv: counts.ppv(),
            sensitivity: counts.sensitivity(),
            f1: counts.f1(),
            records,
        }
    }
}

/// Aggregate over several models: mean of per-model micro-averaged scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub pp_level: PpLevel,
    pub tolerance_ms: f64,
    pub per_model: Vec<ModelScore>,
    pub ppv: f64,
    pub sensitivity: f64,
    pub f1: f64,
    /// Counts summed over every model.
    pub counts: Counts,
}

impl DatasetReport {
    fn from_models(pp_level: PpLevel, tolerance_ms: f64, per_model: Vec<ModelScore>) -> Self {
        let n = per_model.len().max(1) as f64;
        let mut counts = Counts::default();
        per_model.iter().for_each(|m| counts += m.counts);
        Self {
            pp_level,
            tolerance_ms,
            ppv: per_model.iter().map(|m| m.ppv).sum::<f64>() / n,
            sensitivity: per_model.iter().map(|m| m.sensitivity).sum::<f64>() / n,
            f1: per_model.iter().map(|m| m.f1).sum::<f64>() / n,
            counts,
            per_model,
        }
    }
}

/// Every model scored on the same records (cross-database testing).
pub fn evaluate_dataset<P: SegmentPredictor>(
    records: &[LabelledRecord],
    models: &[P],
    settings: &DetectorSettings,
    tol_ms: f64,
) -> Result<DatasetReport> {
    let folds: Vec<(&P, &[LabelledRecord])> = models.iter().map(|m| (m, records)).collect();
    evaluate_folds(&folds, settings, tol_ms)
}

/// Each model scored on its own record set (held-out cross-validation folds).
pub fn evaluate_folds<P: SegmentPredictor>(
    folds: &[(&P, &[LabelledRecord])],
    settings: &DetectorSettings,
    tol_ms: f64,
) -> Result<DatasetReport> {
    Ok(
        evaluate_folds_levels(folds, settings, &[settings.pp_level], tol_ms)?
            .pop()
            .expect("one level requested"),
    )
}

/// Like [`evaluate_folds`] for several refinement levels, one model pass each.
pub fn evaluate_folds_levels<P: SegmentPredictor>(
    folds: &[(&P, &[LabelledRecord])],
    settings: &DetectorSettings,
    levels: &[PpLevel],
    tol_ms: f64,
) -> Result<Vec<DatasetReport>> {
    if folds.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one model is required".into(),
        ));
    }
    // [model][record][level]
    let per_fold: Vec<Vec<Vec<EvalReport>>> = folds
        .iter()
        .map(|(model, records)| {
            records
                .par_iter()
                .map(|(rec, ann)| {
                    evaluate_record_levels(rec, ann, *model, settings, levels, tol_ms)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    Ok(levels
        .iter()
        .enumerate()
        .map(|(li, &level)| {
            let per_model = per_fold
                .iter()
                .map(|recs| ModelScore::from_records(recs.iter().map(|r| r[li].clone()).collect()))
                .collect();
            DatasetReport::from_models(level, tol_ms, per_model)
        })
        .collect())
}

/// Writes one JSON object per record report.
pub fn write_json_lines<W: Write>(reports: &[EvalReport], mut out: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<json lines>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub depth: usize,
    pub channels: usize,
    pub params: u64,
    pub macs_per_segment: u64,
    /// Median wall time of inference plus refinement for one window.
    pub latency_us_median: f64,
    pub pp_level: PpLevel,
}

/// One CSV row of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    pub channels: usize,
    pub params: u64,
    pub macs: u64,
    pub pp_level: PpLevel,
    pub latency_us_median: f64,
    pub ppv: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl SweepRow {
    pub fn new(c: &ComplexityReport, e: &DatasetReport) -> Self {
        Self {
            depth: c.depth,
            channels: c.channels,
            params: c.params,
            macs: c.macs_per_segment,
            pp_level: c.pp_level,
            latency_us_median: c.latency_us_median,
            ppv: e.ppv,
            sensitivity: e.sensitivity,
            f1: e.f1,
            tp: e.counts.tp,
            fp: e.counts.fp,
            fn_: e.counts.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingConfig {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            warmup: 5,
            runs: 30,
        }
    }
}

/// Median microseconds to predict and refine one window, cycling through
/// `segments`.
pub fn time_segment_latency(
    model: &CnnModel,
    segments: &[Segment],
    settings: &DetectorSettings,
    timing: TimingConfig,
) -> Result<f64> {
    if segments.is_empty() {
        return Err(Error::InvalidParameter("no segments to time".into()));
    }
    let run = |seg: &Segment| -> Result<()> {
        let mask = model.predict_mask(&seg.signal)?;
        let stream = PredictionStream::new(&seg.record_id, mask.values, model.config.fs);
        std::hint::black_box(apply_pp(&stream, settings.pp_level, settings.thresholds));
        Ok(())
    };
    let mut cycle = segments.iter().cycle();
    for _ in 0..timing.warmup {
        run(cycle.next().expect("non-empty"))?;
    }
    let mut samples = Vec::with_capacity(timing.runs.max(1));
    for _ in 0..timing.runs.max(1) {
        let seg = cycle.next().expect("non-empty");
        let t0 = Instant::now();
        run(seg)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    Ok(if samples.len() % 2 == 0 {
        0.5 * (samples[mid - 1] + samples[mid])
    } else {
        samples[mid]
    })
}

/// Trained models of one depth, each paired with the records it is scored on.
pub struct SweepEntry<'a> {
    pub models: Vec<(CnnModel, &'a [LabelledRecord])>,
}

/// Complexity counters, latency and accuracy for every depth and level.
pub fn complexity_sweep(
    entries: &[SweepEntry<'_>],
    pp_levels: &[PpLevel],
    settings: &DetectorSettings,
    tol_ms: f64,
    timing: TimingConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(entries.len() * pp_levels.len());
    for entry in entries {
        let Some((first, first_records)) = entry.models.first() else {
            return Err(Error::InvalidParameter("sweep entry without models".into()));
        };
        let window = settings.segmenter.window;
        let timing_segments: Vec<Segment> = first_records
            .iter()
            .flat_map(|(rec, _)| settings.segmenter.test(rec))
            .take(timing.runs.max(1))
            .collect();
        let folds: Vec<(&CnnModel, &[LabelledRecord])> =
            entry.models.iter().map(|(m, r)| (m, *r)).collect();
        let reports = evaluate_folds_levels(&folds, settings, pp_levels, tol_ms)?;
        for (&level, report) in pp_levels.iter().zip(&reports) {
            let latency =
                time_segment_latency(first, &timing_segments, &settings.with_level(level), timing)?;
            let c = ComplexityReport {
                depth: first.config.depth,
                channels: first.config.channels,
                params: count_params(first),
                macs_per_segment: count_macs(first, window),
                latency_us_median: latency,
                pp_level: level,
            };
            rows.push(SweepRow::new(&c, report));
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn save_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_sweep_csv(rows, file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::ModelConfig;
    use crate::preprocess::make_mask;
    use crate::rng::seeded;
    use crate::signal_io::{synth_ecg, SynthParams};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::Rng;

    fn ann(peaks: Vec<usize>) -> AnnotationSet {
        AnnotationSet::new("r", peaks).unwrap()
    }

    /// Maximum bipartite matching by augmenting paths.
    fn optimal_tp(d: &[usize], r: &[usize], w: usize) -> usize {
        fn augment(
            u: usize,
            adj: &[Vec<usize>],
            seen: &mut [bool],
            owner: &mut [Option<usize>],
        ) -> bool {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    if owner[v].is_none() || augment(owner[v].unwrap(), adj, seen, owner) {
                        owner[v] = Some(u);
                        return true;
                    }
                }
            }
            false
        }
        let adj: Vec<Vec<usize>> = d
            .iter()
            .map(|&x| (0..r.len()).filter(|&j| x.abs_diff(r[j]) <= w).collect())
            .collect();
        let mut owner = vec![None; r.len()];
        (0..d.len())
            .filter(|&u| augment(u, &adj, &mut vec![false; r.len()], &mut owner))
            .count()
    }

    #[test]
    fn identical_sets_match_fully() {
        let r = ann(vec![10, 90, 170, 260]);
        let m = match_beats(&r, &r, 75.0, 100);
        assert_eq!((m.tp, m.fp, m.fn_), (4, 0, 0));
    }

    #[test]
    fn window_boundary() {
        let w = tolerance_samples(75.0, 100);
        assert_eq!(w, 8);
        let r = ann(vec![100, 200, 300]);
        let inside = ann(r.peaks.iter().map(|p| p + w).collect());
        let outside = ann(r.peaks.iter().map(|p| p + w + 1).collect());
        assert_eq!(match_beats(&inside, &r, 75.0, 100).tp, 3);
        assert_eq!(match_beats(&outside, &r, 75.0, 100).tp, 0);
    }

    #[test]
    fn one_to_one_matching() {
        let m = match_beats(&ann(vec![100, 104]), &ann(vec![102]), 70.0, 100);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.pairs, vec![(100, 102)]);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(1.0, 1.0), 1.0);
        assert!((f1_score(0.9, 0.8) - 0.847_058_823_529_411_8).abs() < 1e-12);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn pooled_counts() {
        let mut c = Counts {
            tp: 9,
            fp: 1,
            fn_: 1,
        };
        c += Counts {
            tp: 0,
            fp: 0,
            fn_: 10,
        };
        assert!((c.ppv() - 0.9).abs() < 1e-12);
        assert!((c.sensitivity() - 0.45).abs() < 1e-12);
    }

    fn clean_record(seed: u64) -> (EcgRecord, AnnotationSet) {
        synth_ecg(
            &SynthParams {
                duration_s: 30.0,
                mean_hr_bpm: 66.0,
                hr_jitter_pct: 0.0,
                noise_snr_db: f64::INFINITY,
                baseline_wander_amplitude: 0.0,
                seed,
                ..SynthParams::default()
            },
            &format!("c{seed}"),
        )
        .unwrap()
    }

    #[test]
    fn oracle_mask_scores_perfectly() {
        let (rec, ref_ann) = clean_record(1);
        let oracle = MaskOracle {
            mask: make_mask(&ref_ann, rec.len(), rec.fs),
        };
        let rep =
            evaluate_record(&rec, &ref_ann, &oracle, &DetectorSettings::default(), 75.0).unwrap();
        assert_eq!(rep.f1, 1.0);
        assert_eq!(rep.fp + rep.fn_, 0);
    }

    #[test]
    fn silent_model_scores_zero() {
        let (rec, ref_ann) = clean_record(2);
        let model = CnnModel::zeroed(ModelConfig::default()).unwrap();
        let rep =
            evaluate_record(&rec, &ref_ann, &model, &DetectorSettings::default(), 75.0).unwrap();
        assert_eq!(rep.f1, 0.0);
        assert_eq!(rep.fn_, ref_ann.len());
        assert!(!rep.zero_beat);
    }

    #[test]
    fn empty_reference_and_detection_is_flagged() {
        let rec = EcgRecord::new("flat", "flat", 100, vec![0.0; 600]).unwrap();
        let model = CnnModel::zeroed(ModelConfig::default()).unwrap();
        let rep = evaluate_record(
            &rec,
            &AnnotationSet::empty("flat"),
            &model,
            &DetectorSettings::default(),
            75.0,
        )
        .unwrap();
        assert_eq!((rep.ppv, rep.sensitivity, rep.f1), (0.0, 0.0, 0.0));
        assert!(rep.zero_beat);
    }

    #[test]
    fn dataset_reductions() {
        let data = vec![clean_record(3)];
        let model = CnnModel::init(ModelConfig {
            seed: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let settings = DetectorSettings::default();
        let single = evaluate_record(&data[0].0, &data[0].1, &model, &settings, 75.0).unwrap();
        let one = evaluate_dataset(&data, std::slice::from_ref(&model), &settings, 75.0).unwrap();
        assert_eq!(one.f1, single.f1);
        assert_eq!(one.counts, single.counts());
        let five = evaluate_dataset(&data, &vec![model.clone(); 5], &settings, 75.0).unwrap();
        assert_eq!(five.f1, one.f1);
        assert_eq!(five.per_model.len(), 5);
    }

    #[test]
    fn sweep_produces_cartesian_rows() {
        let data = vec![clean_record(4)];
        let entries: Vec<SweepEntry<'_>> = [2usize, 4]
            .iter()
            .map(|&depth| SweepEntry {
                models: vec![(
                    CnnModel::init(ModelConfig {
                        depth,
                        ..ModelConfig::default()
                    })
                    .unwrap(),
                    data.as_slice(),
                )],
            })
            .collect();
        let rows = complexity_sweep(
            &entries,
            &PpLevel::ALL,
            &DetectorSettings::default(),
            75.0,
            TimingConfig {
                warmup: 1,
                runs: 30,
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows[0].macs < rows[4].macs);
        assert_eq!(rows[0].macs, 16_800);
        assert!(rows.iter().all(|r| r.latency_us_median > 0.0));
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "depth,channels,params,macs,pp_level,latency_us_median,ppv,sensitivity,f1,tp,fp,fn\n"
        ));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn greedy_matches_optimal_on_separated_references() {
        let mut rng = seeded(77);
        let w = 8;
        let mut agree = 0;
        let cases = 2000;
        for _ in 0..cases {
            let mut refs = Vec::new();
            let mut t = rng.random_range(0..30);
            for _ in 0..rng.random_range(0..8) {
                refs.push(t);
                t += 2 * w + 1 + rng.random_range(0..40);
            }
            let mut det: Vec<usize> = (0..rng.random_range(0..10))
                .map(|_| rng.random_range(0..t + 20))
                .collect();
            det.sort_unstable();
            det.dedup();
            let m = match_beats(&ann(det.clone()), &ann(refs.clone()), 80.0, 100);
            if m.tp == optimal_tp(&det, &refs, w) {
                agree += 1;
            }
        }
        assert!(agree as f64 >= 0.99 * cases as f64, "{agree}/{cases}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn match_counts_are_consistent(
            d in proptest::collection::btree_set(0usize..2000, 0..40),
            r in proptest::collection::btree_set(0usize..2000, 0..40),
            tol in 0.0f64..200.0,
        ) {
            let det = ann(d.into_iter().collect());
            let refs = ann(r.into_iter().collect());
            let m = match_beats(&det, &refs, tol, 100);
            prop_assert_eq!(m.tp + m.fp, det.len());
            prop_assert_eq!(m.tp + m.fn_, refs.len());
            prop_assert_eq!(m.tp, m.pairs.len());
        }

    }

    proptest! {
        #[test]
        fn f1_symmetric_and_monotone(p in 0.0f64..=1.0, s in 0.0f64..=1.0, dp in 0.0f64..=1.0) {
            prop_assert!((f1_score(p, s) - f1_score(s, p)).abs() < 1e-15);
            let p2 = (p + dp).min(1.0);
            prop_assert!(f1_score(p2, s) + 1e-15 >= f1_score(p, s));
            let f = f1_score(p, s);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
