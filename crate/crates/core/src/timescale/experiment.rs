use ndarray::{s, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TimescaleError;
use crate::corpus::TrialSpec;
use crate::numerics::{mean, pearson};
use crate::rnn::{Arch, Model, Record};

/// Which per-unit quantity is compared between conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationSource {
    Cell,
    Hidden,
}

impl std::str::FromStr for ActivationSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cell" => Ok(ActivationSource::Cell),
            "hidden" => Ok(ActivationSource::Hidden),
            other => Err(format!("unknown activation source `{other}` (expected cell|hidden)")),
        }
    }
}

impl std::fmt::Display for ActivationSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActivationSource::Cell => "cell",
            ActivationSource::Hidden => "hidden",
        })
    }
}

/// Activations of one trial, rows indexed by aligned time
/// `-t_pre..t_shared` (row 0 is `t = -t_pre`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTraces {
    pub intact: Array2<f64>,
    pub randoms: Vec<Array2<f64>>,
}

/// Traces of one layer for all trials, aligned at the shared-segment onset.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTraces {
    pub layer: usize,
    pub source: ActivationSource,
    pub t_pre: usize,
    pub t_shared: usize,
    pub trials: Vec<TrialTraces>,
}

impl AlignedTraces {
    pub fn n_units(&self) -> usize {
        self.trials.first().map_or(0, |t| t.intact.ncols())
    }

    /// Row of aligned time `t`.
    pub fn row(&self, t: i64) -> usize {
        (t + self.t_pre as i64) as usize
    }

    pub fn n_pairs(&self) -> usize {
        self.trials.iter().map(|t| t.randoms.len()).sum()
    }

    /// Aligned time of every row.
    pub fn times(&self) -> Vec<i64> {
        (-(self.t_pre as i64)..self.t_shared as i64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: ActivationSource,
    /// Layers to record, bottom layer is 0.
    pub layers: Vec<usize>,
    /// Longest pre-onset window kept.
    pub pre_window: usize,
}

/// Runs every trial under its intact and random contexts and aligns the
/// requested layers at the shared onset. `t_pre` is the smaller of
/// `pre_window` and the shortest context; `t_shared` is the shortest shared
/// segment.
pub fn run_context_experiment(
    model: &Model,
    trials: &[TrialSpec],
    cfg: &ExperimentConfig,
) -> Result<Vec<AlignedTraces>, TimescaleError> {
    if trials.is_empty() {
        return Err(TimescaleError::NoTrials);
    }
    if cfg.source == ActivationSource::Cell && model.config.arch != Arch::Lstm {
        return Err(TimescaleError::NoCellState(model.config.arch));
    }
    if let Some(&l) = cfg.layers.iter().find(|&&l| l >= model.config.n_layers()) {
        return Err(TimescaleError::InvalidLayer {
            layer: l,
            n_layers: model.config.n_layers(),
        });
    }
    for (i, t) in trials.iter().enumerate() {
        if t.shared.is_empty() {
            return Err(TimescaleError::InvalidTrial {
                trial: i,
                reason: "empty shared segment".into(),
            });
        }
        if t.randoms.is_empty() {
            return Err(TimescaleError::InvalidTrial {
                trial: i,
                reason: "no random contexts".into(),
            });
        }
    }
    let min_context = trials
        .iter()
        .flat_map(|t| std::iter::once(t.context.len()).chain(t.randoms.iter().map(Vec::len)))
        .min()
        .unwrap_or(0);
    let t_pre = cfg.pre_window.min(min_context);
    let t_shared = trials.iter().map(|t| t.shared.len()).min().unwrap_or(0);
    let record = Record {
        hidden: cfg.source == ActivationSource::Hidden,
        cell: cfg.source == ActivationSource::Cell,
        ..Record::default()
    };

    let run = |trial_idx: usize, context: &[u32], shared: &[u32]| -> Result<Vec<Array2<f64>>, TimescaleError> {
        let tokens = [context, shared].concat();
        let trace = model
            .forward(&tokens, record, None)
            .map_err(|e| TimescaleError::InvalidTrial {
                trial: trial_idx,
                reason: e.to_string(),
            })?;
        let start = context.len() - t_pre;
        let end = context.len() + t_shared;
        Ok(cfg
            .layers
            .iter()
            .map(|&l| {
                let lt = &trace.layers[l];
                let m = match cfg.source {
                    ActivationSource::Hidden => lt.hidden.as_ref(),
                    ActivationSource::Cell => lt.cell.as_ref(),
                }
                .expect("requested activations recorded");
                m.slice(s![start..end, ..]).to_owned()
            })
            .collect())
    };

    // Per trial, per condition (intact first), per requested layer.
    let per_trial: Vec<Vec<Vec<Array2<f64>>>> = trials
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            std::iter::once(&t.context)
                .chain(&t.randoms)
                .map(|ctx| run(i, ctx, &t.shared))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;

    Ok(cfg
        .layers
        .iter()
        .enumerate()
        .map(|(li, &layer)| AlignedTraces {
            layer,
            source: cfg.source,
            t_pre,
            t_shared,
            trials: per_trial
                .iter()
                .map(|conds| TrialTraces {
                    intact: conds[0][li].clone(),
                    randoms: conds[1..].iter().map(|c| c[li].clone()).collect(),
                })
                .collect(),
        })
        .collect())
}

/// Mean intact-vs-random Pearson correlation of the layer state vector at
/// each aligned time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelationCurve {
    pub layer: usize,
    pub t: Vec<i64>,
    pub r: Vec<f64>,
    /// Pairs contributing at each time (constant vectors are skipped).
    pub n_pairs: Vec<usize>,
    pub n_trials: usize,
    pub skipped: usize,
}

fn corr_or_none(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let a = a.to_vec();
    let b = b.to_vec();
    pearson(&a, &b).ok()
}

pub fn layer_correlation_curve(aligned: &AlignedTraces) -> Result<LayerCorrelationCurve, TimescaleError> {
    if aligned.n_units() < 2 {
        return Err(TimescaleError::TooFewUnits(aligned.n_units()));
    }
    let times = aligned.times();
    let mut r = Vec::with_capacity(times.len());
    let mut n_pairs = Vec::with_capacity(times.len());
    let mut skipped = 0;
    for &t in &times {
        let row = aligned.row(t);
        let mut vals = Vec::new();
        for trial in &aligned.trials {
            for rnd in &trial.randoms {
                match corr_or_none(trial.intact.row(row), rnd.row(row)) {
                    Some(v) => vals.push(v),
                    None => skipped += 1,
                }
            }
        }
        r.push(if vals.is_empty() { f64::NAN } else { mean(&vals) });
        n_pairs.push(vals.len());
    }
    if skipped > 0 {
        log::warn!("layer {}: skipped {skipped} constant state vectors", aligned.layer);
    }
    Ok(LayerCorrelationCurve {
        layer: aligned.layer,
        t: times,
        r,
        n_pairs,
        n_trials: aligned.trials.len(),
        skipped,
    })
}

/// Per-trial mean correlation over aligned times `0..window`, averaged over
/// the trial's random contexts. Trials with no defined correlation give NaN.
pub fn trial_mean_correlation(aligned: &AlignedTraces, window: usize) -> Vec<f64> {
    let window = window.min(aligned.t_shared);
    aligned
        .trials
        .iter()
        .map(|trial| {
            let mut vals = Vec::new();
            for t in 0..window as i64 {
                let row = aligned.row(t);
                for rnd in &trial.randoms {
                    if let Some(v) = corr_or_none(trial.intact.row(row), rnd.row(row)) {
                        vals.push(v);
                    }
                }
            }
            if vals.is_empty() {
                f64::NAN
            } else {
                mean(&vals)
            }
        })
        .collect()
}

/// Mean absolute intact-vs-random activation difference of one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceCurve {
    pub unit: usize,
    pub layer: usize,
    /// Aligned time of `values[0]`, i.e. `-t_pre`.
    pub t_start: i64,
    pub values: Vec<f64>,
    pub n_pairs: usize,
}

impl DifferenceCurve {
    pub fn at(&self, t: i64) -> Option<f64> {
        usize::try_from(t - self.t_start)
            .ok()
            .and_then(|i| self.values.get(i).copied())
    }

    /// Values for `t >= 0`.
    pub fn post_onset(&self) -> &[f64] {
        &self.values[(-self.t_start) as usize..]
    }

    /// Values for `t < 0`.
    pub fn pre_onset(&self) -> &[f64] {
        &self.values[..(-self.t_start) as usize]
    }
}

/// `D_i(t)` pooled over every (trial, random context) pair. `units = None`
/// selects every unit of the layer.
pub fn difference_curves(aligned: &AlignedTraces, units: Option<&[usize]>) -> Vec<DifferenceCurve> {
    let all: Vec<usize>;
    let units = match units {
        Some(u) => u,
        None => {
            all = (0..aligned.n_units()).collect();
            &all
        }
    };
    let rows = aligned.t_pre + aligned.t_shared;
    let n_pairs = aligned.n_pairs();
    let mut sums = Array2::<f64>::zeros((rows, aligned.n_units()));
    for trial in &aligned.trials {
        for rnd in &trial.randoms {
            sums.zip_mut_with(&(&trial.intact - rnd), |acc, &d| *acc += d.abs());
        }
    }
    let scale = if n_pairs > 0 { 1.0 / n_pairs as f64 } else { 0.0 };
    units
        .iter()
        .map(|&u| DifferenceCurve {
            unit: u,
            layer: aligned.layer,
            t_start: -(aligned.t_pre as i64),
            values: sums.column(u).iter().map(|v| v * scale).collect(),
            n_pairs,
        })
        .collect()
}
