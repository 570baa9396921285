//! Aging-quality grid scored by the datagen oracles, FAR/FRR and equal
//! error rate machinery, and the two desk-scale experiments built on them.

mod experiments;
mod report;
mod verification;

pub use experiments::{
    transition_probe, verification_experiment, ProbeConfig, ProbeOutcome, VerificationOutcome, MIN_AGE_GAP,
};
pub use report::{
    evaluate_generator, evaluate_model, oracle_roundtrip_error, AgingReport, CellReport, EvalConfig, REPORT_HEADER,
};
pub use verification::{eer, far_frr_curve, rates_at, CurvePoint, FarFrrCurve, VerificationScores};
