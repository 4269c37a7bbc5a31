//! Point and probabilistic scores.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{invalid_arg, Result};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Root-mean-square error.
pub fn rmse(actual: &[f64], estimate: &[f64]) -> Result<f64> {
    if actual.len() != estimate.len() {
        return Err(invalid_arg(format!(
            "length mismatch: {} actual vs {} estimated",
            actual.len(),
            estimate.len()
        )));
    }
    if actual.is_empty() {
        return Err(invalid_arg("rmse needs at least one value"));
    }
    let sse: f64 = actual.iter().zip(estimate).map(|(a, e)| (a - e) * (a - e)).sum();
    Ok((sse / actual.len() as f64).sqrt())
}

/// Closed-form CRPS of `N(mean, std^2)` against `obs`. A non-positive `std`
/// is scored as a point mass.
pub fn crps_gaussian(mean: f64, std: f64, obs: f64) -> f64 {
    if !(std > 0.0) {
        return (obs - mean).abs();
    }
    let n = std_normal();
    let z = (obs - mean) / std;
    let v = std * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt());
    v.max(0.0)
}

/// CRPS by trapezoid quadrature of `(F(a) - H(a - obs))^2` over `[lo, hi]`.
///
/// The step of `H` is handled by splitting the range at `obs`.
pub fn crps_numeric<F: Fn(f64) -> f64>(cdf: F, obs: f64, lo: f64, hi: f64, step: f64) -> Result<f64> {
    if !(hi > lo) || !(step > 0.0) {
        return Err(invalid_arg("crps_numeric needs lo < hi and step > 0"));
    }
    let mut prev_f = f64::NEG_INFINITY;
    let mut check = |f: f64| -> Result<()> {
        if f < prev_f - 1e-9 {
            return Err(invalid_arg("cdf is not non-decreasing"));
        }
        prev_f = prev_f.max(f);
        Ok(())
    };
    let mut integrate = |a: f64, b: f64, h: f64| -> Result<f64> {
        if b <= a {
            return Ok(0.0);
        }
        // left of the observation use the left limit of F at the split
        let b_eval = if h == 0.0 { b.next_down() } else { b };
        let n = ((b - a) / step).ceil().max(1.0) as usize;
        let dx = (b - a) / n as f64;
        let mut sum = 0.0;
        let mut f_prev = cdf(a);
        check(f_prev)?;
        for i in 1..=n {
            let x = if i == n { b_eval } else { a + dx * i as f64 };
            let f = cdf(x);
            check(f)?;
            sum += 0.5 * dx * ((f_prev - h).powi(2) + (f - h).powi(2));
            f_prev = f;
        }
        Ok(sum)
    };
    let split = obs.clamp(lo, hi);
    let left = integrate(lo, split, 0.0)?;
    let right = integrate(split, hi, 1.0)?;
    Ok(left + right)
}

/// Two-sided standard normal quantile for a central interval of `level`.
pub fn z_level(level: f64) -> f64 {
    std_normal().inverse_cdf(0.5 + 0.5 * level)
}

/// Fraction of `actuals` inside `mean ± z·std` for the central `level` interval.
pub fn interval_coverage(means: &[f64], stds: &[f64], actuals: &[f64], level: f64) -> Result<f64> {
    if means.len() != stds.len() || means.len() != actuals.len() {
        return Err(invalid_arg("interval_coverage inputs differ in length"));
    }
    if means.is_empty() {
        return Ok(0.0);
    }
    let z = z_level(level);
    let hits = means
        .iter()
        .zip(stds)
        .zip(actuals)
        .filter(|((m, s), a)| (*a - *m).abs() <= z * s.max(0.0))
        .count();
    Ok(hits as f64 / means.len() as f64)
}

/// Scores for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub lane: String,
    pub matching_rate: f64,
    pub seed: u64,
    pub rmse: f64,
    pub crps: f64,
    pub coverage: f64,
    pub n: usize,
}

impl EvalReport {
    /// Scores Gaussian predictions. `stds` of zero score as point masses.
    pub fn score(
        model: impl Into<String>,
        lane: impl Into<String>,
        matching_rate: f64,
        seed: u64,
        actual: &[f64],
        means: &[f64],
        stds: &[f64],
    ) -> Result<Self> {
        let rmse = rmse(actual, means)?;
        if stds.len() != actual.len() {
            return Err(invalid_arg("stds length mismatch"));
        }
        let crps = actual
            .iter()
            .zip(means.iter().zip(stds))
            .map(|(a, (m, s))| crps_gaussian(*m, *s, *a))
            .sum::<f64>()
            / actual.len() as f64;
        Ok(Self {
            model: model.into(),
            lane: lane.into(),
            matching_rate,
            seed,
            rmse,
            crps,
            coverage: interval_coverage(means, stds, actual, 0.9)?,
            n: actual.len(),
        })
    }
}

/// One aggregated row across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub matching_rate: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub crps_mean: f64,
    pub crps_std: f64,
    pub coverage: f64,
    pub n: usize,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Groups reports by `(model, matching_rate)` and aggregates across seeds and lanes.
pub fn summarize(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in reports {
        if !keys.iter().any(|(m, q)| *m == r.model && *q == r.matching_rate) {
            keys.push((r.model.clone(), r.matching_rate));
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keys.into_iter()
        .map(|(model, rate)| {
            let group: Vec<&EvalReport> = reports
                .iter()
                .filter(|r| r.model == model && r.matching_rate == rate)
                .collect();
            let rm: Vec<f64> = group.iter().map(|r| r.rmse).collect();
            let cr: Vec<f64> = group.iter().map(|r| r.crps).collect();
            let n: usize = group.iter().map(|r| r.n).sum();
            let coverage = if n == 0 {
                0.0
            } else {
                group.iter().map(|r| r.coverage * r.n as f64).sum::<f64>() / n as f64
            };
            let (rmse_mean, rmse_std) = mean_std(&rm);
            let (crps_mean, crps_std) = mean_std(&cr);
            SummaryRow { model, matching_rate: rate, rmse_mean, rmse_std, crps_mean, crps_std, coverage, n }
        })
        .collect()
}
