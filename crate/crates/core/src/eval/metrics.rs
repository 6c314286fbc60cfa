use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Space in which errors are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDomain {
    #[default]
    Linear,
    Log10,
}

impl std::str::FromStr for MetricDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(MetricDomain::Linear),
            "log10" => Ok(MetricDomain::Log10),
            other => Err(Error::Config(format!("unknown metric domain '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub mase: f64,
    /// Squared Pearson correlation of prediction against truth.
    pub r2: f64,
    /// Sample standard deviation of the errors.
    pub stdev_error: f64,
    pub n: usize,
    pub domain: MetricDomain,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Error metrics of `pred` against `truth`, both in m^(-2/3) and aligned in
/// time. In the log10 domain both series are log-transformed first.
pub fn metrics(pred: &[f64], truth: &[f64], domain: MetricDomain) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "metrics need at least 2 points, got {}",
            truth.len()
        )));
    }
    if let Some(t) = truth.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Validation(format!(
            "truth values must be > 0, got {t}"
        )));
    }
    if let Some(p) = pred.iter().find(|p| !p.is_finite()) {
        return Err(Error::Validation(format!("non-finite prediction {p}")));
    }
    let (p, t): (Vec<f64>, Vec<f64>) = match domain {
        MetricDomain::Linear => (pred.to_vec(), truth.to_vec()),
        MetricDomain::Log10 => {
            if let Some(bad) = pred.iter().find(|p| **p <= 0.0) {
                return Err(Error::Validation(format!(
                    "log10 metrics need positive predictions, got {bad}"
                )));
            }
            (
                pred.iter().map(|v| v.log10()).collect(),
                truth.iter().map(|v| v.log10()).collect(),
            )
        }
    };
    let n = t.len();
    let e: Vec<f64> = p.iter().zip(&t).map(|(a, b)| a - b).collect();
    let abs_e: Vec<f64> = e.iter().map(|v| v.abs()).collect();
    let mae = mean(&abs_e);
    let rmse = mean(&e.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt();
    let mape = 100.0
        * mean(
            &e.iter()
                .zip(&t)
                .map(|(ev, tv)| (ev / tv).abs())
                .collect::<Vec<_>>(),
        );

    let naive = mean(
        &t.windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .collect::<Vec<_>>(),
    );
    if naive == 0.0 {
        return Err(Error::MetricUndefined(
            "MASE: truth never changes between consecutive points".into(),
        ));
    }
    let mase = mae / naive;

    let (mp, mt) = (mean(&p), mean(&t));
    let stt: f64 = t.iter().map(|v| (v - mt).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::MetricUndefined(
            "R2: truth series is constant".into(),
        ));
    }
    let spp: f64 = p.iter().map(|v| (v - mp).powi(2)).sum();
    let spt: f64 = p.iter().zip(&t).map(|(a, b)| (a - mp) * (b - mt)).sum();
    // A constant prediction carries no linear information.
    let r2 = if spp == 0.0 {
        0.0
    } else {
        (spt * spt / (spp * stt)).clamp(0.0, 1.0)
    };

    let me = mean(&e);
    let stdev_error = (e.iter().map(|v| (v - me).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();

    Ok(MetricReport {
        mae,
        rmse,
        mape,
        mase,
        r2,
        stdev_error,
        n,
        domain,
    })
}
