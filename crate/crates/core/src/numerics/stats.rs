use serde::{Deserialize, Serialize};

use super::special::{student_t_sf, student_t_two_sided};
use super::NumericsError;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn sample_std(v: &[f64]) -> f64 {
    sample_variance(v).sqrt()
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, NumericsError> {
    if xs.len() != ys.len() {
        return Err(NumericsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(NumericsError::TooFewSamples { need: 2, got: xs.len() });
    }
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(NumericsError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation together with its two-sided p-value (t test on `n - 2` df).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn pearson_test(xs: &[f64], ys: &[f64]) -> Result<Correlation, NumericsError> {
    let r = pearson(xs, ys)?;
    let n = xs.len();
    let p_value = if n <= 2 {
        1.0
    } else if r.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        student_t_two_sided(t, df)
    };
    Ok(Correlation { r, p_value, n })
}

/// Standardizes `v` to mean 0 and sample standard deviation 1.
pub fn zscore(v: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if v.len() < 2 {
        return Err(NumericsError::TooFewSamples { need: 2, got: v.len() });
    }
    let m = mean(v);
    let s = sample_std(v);
    if !(s > 0.0) || !s.is_finite() {
        return Err(NumericsError::ZeroVariance);
    }
    Ok(v.iter().map(|x| (x - m) / s).collect())
}

/// Percentile with linear interpolation between closest ranks (`q` in `[0, 100]`).
pub fn percentile(v: &[f64], q: f64) -> f64 {
    assert!(!v.is_empty(), "percentile of empty sample");
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn median(v: &[f64]) -> f64 {
    percentile(v, 50.0)
}

/// Effect size and Welch test of two independent samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectStats {
    pub cohens_d: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub df: f64,
}

/// Cohen's d (pooled std) with Welch's unequal-variance t test, two-sided.
pub fn welch_effect(a: &[f64], b: &[f64]) -> Result<EffectStats, NumericsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(NumericsError::TooFewSamples { need: 2, got: s.len() });
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if !(pooled > 0.0) {
        return Err(NumericsError::ZeroVariance);
    }
    let diff = ma - mb;
    let cohens_d = diff / pooled;
    let (qa, qb) = (va / na, vb / nb);
    let se = (qa + qb).sqrt();
    let t_stat = diff / se;
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let p_value = if diff == 0.0 {
        1.0
    } else {
        student_t_two_sided(t_stat, df)
    };
    Ok(EffectStats {
        cohens_d,
        t_stat,
        p_value,
        df,
    })
}

/// One-sided paired t test of `H1: mean(a - b) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t_stat: f64,
    pub df: f64,
    pub p_greater: f64,
}

pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<PairedTest, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(NumericsError::TooFewSamples { need: 2, got: a.len() });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let m = mean(&diffs);
    let s = sample_std(&diffs);
    if !(s > 0.0) {
        return Err(NumericsError::ZeroVariance);
    }
    let t_stat = m / (s / n.sqrt());
    let df = n - 1.0;
    Ok(PairedTest {
        mean_diff: m,
        t_stat,
        df,
        p_greater: student_t_sf(t_stat, df),
    })
}
