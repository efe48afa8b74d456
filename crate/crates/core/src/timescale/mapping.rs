use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::DifferenceCurve;
use super::TimescaleError;
use crate::numerics::{
    fit_logistic_lsq, mean, median, pearson_test, percentile, FitOptions, FitResult, LogisticParams,
};

/// How the half-maximum level is derived from the fitted endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `(Y(0) − Y(t_end)) / 2`.
    HalfRange,
    /// `(Y(0) + Y(t_end)) / 2`.
    Midpoint,
}

impl std::str::FromStr for ThresholdRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "half_range" => Ok(ThresholdRule::HalfRange),
            "midpoint" => Ok(ThresholdRule::Midpoint),
            other => Err(format!(
                "unknown threshold rule `{other}` (expected half_range|midpoint)"
            )),
        }
    }
}

impl ThresholdRule {
    pub fn theta(self, y0: f64, y_end: f64) -> f64 {
        match self {
            ThresholdRule::HalfRange => 0.5 * (y0 - y_end),
            ThresholdRule::Midpoint => 0.5 * (y0 + y_end),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    /// Last shared-segment time used for fitting and the threshold.
    pub t_end: usize,
    pub threshold: ThresholdRule,
    /// Fits below this R² are treated as failures.
    pub min_r_squared: f64,
    /// Pre-onset exclusion level as a fraction of the percentile below.
    pub preonset_fraction: f64,
    pub preonset_percentile: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            t_end: 24,
            threshold: ThresholdRule::HalfRange,
            min_r_squared: 0.5,
            preonset_fraction: 0.01,
            preonset_percentile: 95.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    None,
    FitFailure,
    NoPreonsetDifference,
    IncreasingDifference,
}

impl std::fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExclusionReason::None => "none",
            ExclusionReason::FitFailure => "fit_failure",
            ExclusionReason::NoPreonsetDifference => "no_preonset_difference",
            ExclusionReason::IncreasingDifference => "increasing_difference",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimescaleRecord {
    pub unit: usize,
    pub layer: usize,
    /// Decaying logistic fitted on `t ∈ [0, t_end]`.
    pub fit: FitResult,
    /// Sum of squared residuals of the competing rising fit.
    pub growth_sse: f64,
    /// Threshold under the configured rule and under the other rule.
    pub theta: f64,
    pub theta_alt: f64,
    pub timescale: usize,
    pub timescale_alt: usize,
    /// No crossing within the shared segment; timescale set to its length.
    pub censored: bool,
    pub preonset_mean: f64,
    pub included: bool,
    pub reason: ExclusionReason,
}

/// The parts of a record other analyses need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitTimescale {
    pub layer: usize,
    pub unit: usize,
    pub timescale: usize,
    pub included: bool,
}

impl From<&TimescaleRecord> for UnitTimescale {
    fn from(r: &TimescaleRecord) -> Self {
        Self {
            layer: r.layer,
            unit: r.unit,
            timescale: r.timescale,
            included: r.included,
        }
    }
}

pub fn unit_timescales(records: &[TimescaleRecord]) -> Vec<UnitTimescale> {
    records.iter().map(UnitTimescale::from).collect()
}

/// Smallest integer `t` in `0..=t_max` with `y(t) <= theta`, or `None`.
pub fn first_crossing(y: impl Fn(f64) -> f64, theta: f64, t_max: usize) -> Option<usize> {
    (0..=t_max).find(|&t| y(t as f64) <= theta)
}

/// Timescale of a fitted curve: first crossing of the threshold, censored at
/// `t_max`.
pub fn timescale_of(params: &LogisticParams, t_end: usize, t_max: usize, rule: ThresholdRule) -> (f64, usize, bool) {
    let theta = rule.theta(params.eval(0.0), params.eval(t_end as f64));
    match first_crossing(|t| params.eval(t), theta, t_max) {
        Some(t) => (theta, t, false),
        None => (theta, t_max, true),
    }
}

/// Pre-onset exclusion level: `fraction ×` the given percentile of the
/// per-unit mean pre-onset difference. `None` without a pre-onset window.
pub fn preonset_threshold(curves: &[DifferenceCurve], cfg: &MapConfig) -> Option<f64> {
    let means: Vec<f64> = curves
        .iter()
        .filter(|c| !c.pre_onset().is_empty())
        .map(|c| mean(c.pre_onset()))
        .collect();
    if means.is_empty() {
        None
    } else {
        Some(cfg.preonset_fraction * percentile(&means, cfg.preonset_percentile))
    }
}

/// Decides exclusion in order: missing pre-onset difference, a rising
/// difference, then a failed or poor decay fit.
pub fn exclude_unit(
    preonset_mean: Option<f64>,
    preonset_level: Option<f64>,
    decay: &FitResult,
    growth: &FitResult,
    min_r_squared: f64,
) -> ExclusionReason {
    if let (Some(m), Some(level)) = (preonset_mean, preonset_level) {
        if m <= level {
            return ExclusionReason::NoPreonsetDifference;
        }
    }
    let rising = growth.converged && growth.params.k > 0.0 && growth.params.l > 0.0 && growth.sse() < decay.sse();
    if rising {
        return ExclusionReason::IncreasingDifference;
    }
    if !decay.converged || !(decay.r_squared >= min_r_squared) {
        return ExclusionReason::FitFailure;
    }
    ExclusionReason::None
}

/// Fits every curve on `t ∈ [0, t_end]` and derives its timescale. `t_end`
/// is clipped to the last available shared time.
pub fn fit_and_map(curves: &[DifferenceCurve], cfg: &MapConfig) -> Vec<TimescaleRecord> {
    let level = preonset_threshold(curves, cfg);
    let alt_rule = match cfg.threshold {
        ThresholdRule::HalfRange => ThresholdRule::Midpoint,
        ThresholdRule::Midpoint => ThresholdRule::HalfRange,
    };
    curves
        .par_iter()
        .map(|c| {
            let post = c.post_onset();
            let t_shared = post.len();
            let t_end = cfg.t_end.min(t_shared.saturating_sub(1));
            let xs: Vec<f64> = (0..=t_end).map(|t| t as f64).collect();
            let ys = &post[..(t_end + 1).min(t_shared)];
            let decay = fit_logistic_lsq(&xs, ys, &FitOptions::default());
            let growth = fit_logistic_lsq(&xs, ys, &FitOptions::growth());
            let pre = c.pre_onset();
            let preonset_mean = (!pre.is_empty()).then(|| mean(pre));
            let reason = exclude_unit(preonset_mean, level, &decay, &growth, cfg.min_r_squared);
            let (theta, timescale, censored) = timescale_of(&decay.params, t_end, t_shared, cfg.threshold);
            let (theta_alt, timescale_alt, _) = timescale_of(&decay.params, t_end, t_shared, alt_rule);
            TimescaleRecord {
                unit: c.unit,
                layer: c.layer,
                fit: decay,
                growth_sse: growth.sse(),
                theta,
                theta_alt,
                timescale,
                timescale_alt,
                censored,
                preonset_mean: preonset_mean.unwrap_or(f64::NAN),
                included: reason == ExclusionReason::None,
                reason,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n_included: usize,
    /// Timescale → count of included units.
    pub histogram: BTreeMap<usize, usize>,
    pub short_cutoff: usize,
    pub long_cutoff: usize,
    /// Fraction with timescale `<= short_cutoff`.
    pub fraction_short: f64,
    /// Fraction with timescale `> long_cutoff`.
    pub fraction_long: f64,
    pub median: f64,
    pub mean: f64,
}

pub fn summarize_distribution(
    records: &[TimescaleRecord],
    short_cutoff: usize,
    long_cutoff: usize,
) -> Result<DistributionSummary, TimescaleError> {
    let ts: Vec<usize> = records.iter().filter(|r| r.included).map(|r| r.timescale).collect();
    summarize_timescales(&ts, short_cutoff, long_cutoff)
}

pub fn summarize_timescales(
    ts: &[usize],
    short_cutoff: usize,
    long_cutoff: usize,
) -> Result<DistributionSummary, TimescaleError> {
    if ts.is_empty() {
        return Err(TimescaleError::NoIncludedUnits);
    }
    let mut histogram = BTreeMap::new();
    for &t in ts {
        *histogram.entry(t).or_insert(0) += 1;
    }
    let n = ts.len() as f64;
    let vals: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    Ok(DistributionSummary {
        n_included: ts.len(),
        histogram,
        short_cutoff,
        long_cutoff,
        fraction_short: ts.iter().filter(|&&t| t <= short_cutoff).count() as f64 / n,
        fraction_long: ts.iter().filter(|&&t| t > long_cutoff).count() as f64 / n,
        median: median(&vals),
        mean: mean(&vals),
    })
}

/// Pearson correlation of two maps over units included in both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapComparison {
    pub r: f64,
    pub p_value: f64,
    /// `(layer, unit, timescale_a, timescale_b)`.
    pub pairs: Vec<(usize, usize, usize, usize)>,
}

pub fn compare_timescales(a: &[UnitTimescale], b: &[UnitTimescale]) -> Result<MapComparison, TimescaleError> {
    let index: BTreeMap<(usize, usize), usize> = b
        .iter()
        .filter(|r| r.included)
        .map(|r| ((r.layer, r.unit), r.timescale))
        .collect();
    let pairs: Vec<(usize, usize, usize, usize)> = a
        .iter()
        .filter(|r| r.included)
        .filter_map(|r| {
            index
                .get(&(r.layer, r.unit))
                .map(|&tb| (r.layer, r.unit, r.timescale, tb))
        })
        .collect();
    if pairs.len() < 3 {
        return Err(TimescaleError::TooFewJointUnits(pairs.len()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.2 as f64).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.3 as f64).collect();
    let c = pearson_test(&xs, &ys)?;
    Ok(MapComparison {
        r: c.r,
        p_value: c.p_value,
        pairs,
    })
}

/// `layer,unit,L,k,x0,d,r2,converged,theta,theta_alt,timescale,timescale_alt,censored,preonset_mean,included,reason`
pub fn write_records_csv<W: Write>(records: &[TimescaleRecord], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "layer,unit,L,k,x0,d,r2,converged,theta,theta_alt,timescale,timescale_alt,censored,preonset_mean,included,reason"
    )?;
    for r in records {
        let p = &r.fit.params;
        writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{:.9},{:.9},{},{},{},{:.9},{},{}",
            r.layer,
            r.unit,
            p.l,
            p.k,
            p.x0,
            p.d,
            r.fit.r_squared,
            r.fit.converged,
            r.theta,
            r.theta_alt,
            r.timescale,
            r.timescale_alt,
            r.censored,
            r.preonset_mean,
            r.included,
            r.reason
        )?;
    }
    Ok(())
}

/// Reads `layer`, `unit`, `timescale` and `included` back from a file written
/// by [`write_records_csv`].
pub fn read_timescales_csv<R: BufRead>(input: R) -> Result<Vec<UnitTimescale>, String> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or("empty timescale table")?
        .map_err(|e| e.to_string())?;
    let cols: Vec<&str> = header.split(',').collect();
    let col = |name: &str| {
        cols.iter()
            .position(|&c| c == name)
            .ok_or(format!("missing column `{name}`"))
    };
    let (cl, cu, ct, ci) = (col("layer")?, col("unit")?, col("timescale")?, col("included")?);
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let get = |i: usize| f.get(i).copied().ok_or(format!("line {}: too few fields", n + 2));
        let bad = |what: &str| format!("line {}: bad {what}", n + 2);
        out.push(UnitTimescale {
            layer: get(cl)?.parse().map_err(|_| bad("layer"))?,
            unit: get(cu)?.parse().map_err(|_| bad("unit"))?,
            timescale: get(ct)?.parse().map_err(|_| bad("timescale"))?,
            included: get(ci)?.parse().map_err(|_| bad("included"))?,
        });
    }
    Ok(out)
}
