use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// `(changed - benchmark) / benchmark`.
pub fn sensitivity_ratio(dice_changed: f64, dice_benchmark: f64) -> Result<f64> {
    if dice_benchmark == 0.0 || !dice_benchmark.is_finite() || !dice_changed.is_finite() {
        return Err(Error::Invalid(format!("sensitivity ratio needs a finite non-zero benchmark, got {dice_benchmark}")));
    }
    Ok((dice_changed - dice_benchmark) / dice_benchmark)
}

/// Fraction of cases whose Dice is at least each threshold.
pub fn reliability_curve(per_case_dice: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if per_case_dice.is_empty() {
        return Err(Error::Empty("reliability curve cases".into()));
    }
    let n = per_case_dice.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, per_case_dice.iter().filter(|&&d| d >= t).count() as f64 / n))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for a single value.
    pub stdv: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("values to summarise".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stdv = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Summary { mean, stdv, min, max })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Two-sided Student's t-test with pooled variance.
pub fn two_sample_ttest(group_a: &[f64], group_b: &[f64]) -> Result<TTest> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::Invalid("t-test needs at least two values per group".into()));
    }
    let (a, b) = (summarize(group_a)?, summarize(group_b)?);
    let (na, nb) = (group_a.len() as f64, group_b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * a.stdv * a.stdv + (nb - 1.0) * b.stdv * b.stdv) / df;
    if !(pooled > 0.0) || !pooled.is_finite() {
        return Err(Error::Invalid("t-test groups have zero pooled variance".into()));
    }
    let t = (a.mean - b.mean) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}
