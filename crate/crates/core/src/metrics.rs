//! Point-error metrics and the asymmetric PHM score.

use std::fmt;

use crate::cache::Manifest;
use crate::error::{Error, Result};

/// Which value divides the absolute error in MAPE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapeDenominator {
    /// `|predicted|`, the default.
    #[default]
    Predicted,
    /// `|actual|`, the textbook form.
    Actual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub score: f64,
    pub sample_count: usize,
}

fn check_lengths(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.len() != actual.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} labels",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one value".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    Ok(pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    let mse = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Mean absolute percentage error in percent. An exact prediction adds
/// nothing even over a zero denominator; any other zero denominator is an
/// error naming its index.
pub fn mape(pred: &[f64], actual: &[f64], denominator: MapeDenominator) -> Result<f64> {
    check_lengths(pred, actual)?;
    let mut sum = 0.0;
    for (i, (p, a)) in pred.iter().zip(actual).enumerate() {
        let d = match denominator {
            MapeDenominator::Predicted => p.abs(),
            MapeDenominator::Actual => a.abs(),
        };
        if p == a {
            continue;
        }
        if d == 0.0 {
            return Err(Error::Numerical(format!(
                "MAPE undefined: zero {} value at index {i}",
                match denominator {
                    MapeDenominator::Predicted => "predicted",
                    MapeDenominator::Actual => "actual",
                }
            )));
        }
        sum += (p - a).abs() / d;
    }
    Ok(100.0 * sum / pred.len() as f64)
}

/// Score contribution of one error `d = predicted - actual`.
pub fn phm_term(d: f64) -> f64 {
    if d < 0.0 {
        (-d / 13.0).exp() - 1.0
    } else {
        (d / 10.0).exp() - 1.0
    }
}

pub fn phm_score(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    Ok(pred.iter().zip(actual).map(|(p, a)| phm_term(p - a)).sum())
}

/// All four metrics. The score is computed on `score_units × value`, so
/// callers can feed it percentages while the error metrics stay on fractions.
pub fn evaluate_with(
    pred: &[f64],
    actual: &[f64],
    denominator: MapeDenominator,
    score_units: f64,
) -> Result<MetricsReport> {
    let scaled = |v: &[f64]| v.iter().map(|x| x * score_units).collect::<Vec<_>>();
    Ok(MetricsReport {
        mae: mae(pred, actual)?,
        rmse: rmse(pred, actual)?,
        mape: mape(pred, actual, denominator)?,
        score: phm_score(&scaled(pred), &scaled(actual))?,
        sample_count: pred.len(),
    })
}

pub fn evaluate(pred: &[f64], actual: &[f64]) -> Result<MetricsReport> {
    evaluate_with(pred, actual, MapeDenominator::Predicted, 1.0)
}

impl MetricsReport {
    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("mae", self.mae)
            .set("rmse", self.rmse)
            .set("mape", self.mape)
            .set("score", self.score)
            .set("sample_count", self.sample_count);
        m
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples  {}", self.sample_count)?;
        writeln!(f, "MAE      {:.6}", self.mae)?;
        writeln!(f, "RMSE     {:.6}", self.rmse)?;
        writeln!(f, "MAPE     {:.4}%", self.mape)?;
        write!(f, "score    {:.6}", self.score)
    }
}
