//! Measurement: retrieval metrics, margin-contraction fits and the study
//! drivers built on the trainer.

pub mod metrics;
pub mod studies;

use serde::Serialize;

pub use metrics::{
    classification_metrics, evaluate, mean_average_precision, mrr, ndcg_at_k, rank_corpus, recall_at_k, three_way, ClassificationMetrics,
    RankingResult, RetrievalMetrics, ALIGNMENT_ERROR_FLOOR,
};
pub use studies::{
    ael_study, mining_study, rate_scaling, AelPoint, MiningConfig, MiningPoint, ScalingConfig, ScalingRow, ScalingRun,
};

use crate::error::{Error, Result};

pub const MIN_FIT_POINTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContractionFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Ordinary least squares `y = slope·x + intercept`. A perfectly flat `y`
/// has `r² = 1`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            op: "linear_fit",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::TooFewPoints { found: x.len(), needed: 2 });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::config("regressor has no spread"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}

/// Fits `log value` against `η²` over epochs strictly after `eta0`,
/// skipping nonpositive values.
pub fn contraction_fit(trace: &[(usize, f64)], eta0: f64) -> Result<ContractionFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = trace
        .iter()
        .filter(|&&(eta, v)| eta as f64 > eta0 && v > 0.0 && v.is_finite())
        .map(|&(eta, v)| ((eta * eta) as f64, v.ln()))
        .unzip();
    if x.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints {
            found: x.len(),
            needed: MIN_FIT_POINTS,
        });
    }
    let (slope, intercept, r_squared) = linear_fit(&x, &y)?;
    Ok(ContractionFit {
        slope,
        intercept,
        r_squared,
        points: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_exponential_in_eta_squared() {
        let trace: Vec<(usize, f64)> = (1..=12).map(|e| (e, (-0.3 * (e * e) as f64).exp())).collect();
        let fit = contraction_fit(&trace, 4.0).unwrap();
        assert!((fit.slope + 0.3).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(fit.points, 8);
    }

    #[test]
    fn constant_trace_is_flat() {
        let trace: Vec<(usize, f64)> = (1..=10).map(|e| (e, 0.25)).collect();
        let fit = contraction_fit(&trace, 2.0).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn too_few_positive_points() {
        let trace = vec![(5, 0.1), (6, -0.2), (7, 0.0), (8, 0.05), (9, 0.02)];
        assert!(matches!(contraction_fit(&trace, 4.0), Err(Error::TooFewPoints { found: 3, .. })));
    }
}
