//! Fixtures shared by the criterion benches.

use qrs_core::pipeline::{generate_dataset, RunConfig, SynthConfig};
use qrs_core::preprocess::Segment;
use qrs_core::{AnnotationSet, EcgRecord};

/// A seeded 60 s, 100 Hz synthetic record with its reference beats.
pub fn record(seed: u64) -> (EcgRecord, AnnotationSet) {
    let cfg = RunConfig {
        synth: SynthConfig::default(),
        ..RunConfig::default()
    }
    .with_seed(seed);
    generate_dataset(&cfg, 1)
        .expect("synthetic record")
        .pop()
        .expect("one record")
}

/// Labelled training windows cut from [`record`].
pub fn training_windows(seed: u64) -> Vec<Segment> {
    let cfg = RunConfig::default();
    let (rec, ann) = record(seed);
    qrs_core::pipeline::training_segments(&cfg, &rec, &ann).expect("segments")
}
