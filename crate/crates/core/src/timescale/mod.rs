//! Intact/random context experiments, activation-difference curves, logistic
//! timescale mapping and layer-level correlation curves.

mod experiment;
mod mapping;

use std::io::Write;

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::rnn::Arch;

pub use experiment::{
    difference_curves, layer_correlation_curve, run_context_experiment, trial_mean_correlation, ActivationSource,
    AlignedTraces, DifferenceCurve, ExperimentConfig, LayerCorrelationCurve, TrialTraces,
};
pub use mapping::{
    compare_timescales, exclude_unit, first_crossing, fit_and_map, preonset_threshold, read_timescales_csv,
    summarize_distribution, summarize_timescales, timescale_of, unit_timescales, write_records_csv,
    DistributionSummary, ExclusionReason, MapComparison, MapConfig, ThresholdRule, TimescaleRecord, UnitTimescale,
};

#[derive(Debug, Error)]
pub enum TimescaleError {
    #[error("no trials")]
    NoTrials,
    #[error("trial {trial}: {reason}")]
    InvalidTrial { trial: usize, reason: String },
    #[error("{0} models have no cell state")]
    NoCellState(Arch),
    #[error("layer {layer} does not exist (model has {n_layers})")]
    InvalidLayer { layer: usize, n_layers: usize },
    #[error("need at least 2 units, layer has {0}")]
    TooFewUnits(usize),
    #[error("no included units")]
    NoIncludedUnits,
    #[error("need at least 3 jointly included units, found {0}")]
    TooFewJointUnits(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `layer,t,r,n_pairs`
pub fn write_correlation_csv<W: Write>(curves: &[LayerCorrelationCurve], mut out: W) -> std::io::Result<()> {
    writeln!(out, "layer,t,r,n_pairs")?;
    for c in curves {
        for ((t, r), n) in c.t.iter().zip(&c.r).zip(&c.n_pairs) {
            writeln!(out, "{},{},{:.9},{}", c.layer, t, r, n)?;
        }
    }
    Ok(())
}

/// `layer,unit,t,d`
pub fn write_curves_csv<W: Write>(curves: &[DifferenceCurve], mut out: W) -> std::io::Result<()> {
    writeln!(out, "layer,unit,t,d")?;
    for c in curves {
        for (i, v) in c.values.iter().enumerate() {
            writeln!(out, "{},{},{},{:.9}", c.layer, c.unit, c.t_start + i as i64, v)?;
        }
    }
    Ok(())
}
