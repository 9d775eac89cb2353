//! Counting metrics: MAE, RMSE, relative MAE/RMSE in percent and R².
//!
//! Relative metrics divide by the ground-truth count and therefore skip
//! images whose ground truth is zero; the number skipped is reported.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_images: usize,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every ground-truth count is zero.
    pub rmae_pct: Option<f64>,
    pub rrmse_pct: Option<f64>,
    /// `None` when the ground truth has zero variance.
    pub r2: Option<f64>,
    pub n_skipped_relative: usize,
}

pub fn compute_metrics(gt: &[f64], pred: &[f64]) -> Result<MetricsReport> {
    if gt.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth counts but {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::invalid("metrics need at least one image"));
    }
    if gt.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite count in metrics input".into()));
    }
    let n = gt.len() as f64;
    let mae = gt.iter().zip(pred).map(|(g, p)| (g - p).abs()).sum::<f64>() / n;
    let sse: f64 = gt.iter().zip(pred).map(|(g, p)| (g - p) * (g - p)).sum();
    let rmse = (sse / n).sqrt();

    let rel: Vec<f64> = gt
        .iter()
        .zip(pred)
        .filter(|(g, _)| **g != 0.0)
        .map(|(g, p)| (g - p).abs() / g.abs())
        .collect();
    let n_skipped_relative = gt.len() - rel.len();
    let (rmae_pct, rrmse_pct) = if rel.is_empty() {
        (None, None)
    } else {
        let m = rel.len() as f64;
        let rmae = rel.iter().sum::<f64>() / m;
        let rrmse = (rel.iter().map(|r| r * r).sum::<f64>() / m).sqrt();
        (Some(100.0 * rmae), Some(100.0 * rrmse))
    };

    let mean = gt.iter().sum::<f64>() / n;
    let sst: f64 = gt.iter().map(|g| (g - mean) * (g - mean)).sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);

    Ok(MetricsReport {
        n_images: gt.len(),
        mae,
        rmse,
        rmae_pct,
        rrmse_pct,
        r2,
        n_skipped_relative,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "n_images,mae,rmse,rmae_pct,rrmse_pct,r2,n_skipped_relative";

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "n_images = {}\nmae = {:.6}\nrmse = {:.6}\nrmae_pct = {}\nrrmse_pct = {}\nr2 = {}\nn_skipped_relative = {}\n",
            self.n_images,
            self.mae,
            self.rmse,
            opt(self.rmae_pct),
            opt(self.rrmse_pct),
            opt(self.r2),
            self.n_skipped_relative
        )
    }

    /// One CSV data row matching [`MetricsReport::CSV_HEADER`]; undefined values are empty.
    pub fn to_csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{},{},{},{}",
            self.n_images,
            self.mae,
            self.rmse,
            o(self.rmae_pct),
            o(self.rrmse_pct),
            o(self.r2),
            self.n_skipped_relative
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let m = compute_metrics(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert_eq!(m.mae, 3.0);
        assert!((m.rmse - 10f64.sqrt()).abs() < 1e-15);
        assert!((m.rmae_pct.unwrap() - 20.0).abs() < 1e-12);
        assert!((m.rrmse_pct.unwrap() - 20.0).abs() < 1e-12);
        assert!((m.r2.unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction() {
        let v = [3.0, 0.0, 7.5, 2.0];
        let m = compute_metrics(&v, &v).unwrap();
        assert_eq!((m.mae, m.rmse, m.rmae_pct, m.rrmse_pct, m.r2), (0.0, 0.0, Some(0.0), Some(0.0), Some(1.0)));
    }

    #[test]
    fn degenerate_cases() {
        let m = compute_metrics(&[5.0, 5.0], &[4.0, 6.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (1.0, 1.0, None));
        assert!(m.to_text().contains("r2 = undefined"));
        let z = compute_metrics(&[0.0, 10.0], &[1.0, 10.0]).unwrap();
        assert_eq!(z.mae, 0.5);
        assert_eq!(z.rmae_pct, Some(0.0));
        assert_eq!(z.n_skipped_relative, 1);
        let all_zero = compute_metrics(&[0.0], &[1.0]).unwrap();
        assert_eq!(all_zero.rmae_pct, None);
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn constant_predictor_scores_zero() {
        let gt = [1.0, 4.0, 9.0, 2.0, 0.0];
        let mean = gt.iter().sum::<f64>() / 5.0;
        let m = compute_metrics(&gt, &[mean; 5]).unwrap();
        assert!(m.r2.unwrap().abs() < 1e-15);
    }

    #[test]
    fn formats() {
        let m = compute_metrics(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert_eq!(m.to_csv_row(), "2,3.000000,3.162278,20.000000,20.000000,0.600000,0");
        assert!(m.to_text().starts_with("n_images = 2\nmae = 3.000000\n"));
        assert_eq!(MetricsReport::CSV_HEADER.split(',').count(), m.to_csv_row().split(',').count());
    }

    proptest! {
        #[test]
        fn invariants(pairs in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 1..40), c in 0.1f64..10.0) {
            let gt: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let m = compute_metrics(&gt, &pred).unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-12 && m.mae >= 0.0);
            if let (Some(a), Some(b)) = (m.rmae_pct, m.rrmse_pct) {
                prop_assert!(b >= a - 1e-9 && a >= 0.0);
            }
            if let Some(r2) = m.r2 {
                prop_assert!(r2 <= 1.0);
            }
            let gs: Vec<f64> = gt.iter().map(|v| v * c).collect();
            let ps: Vec<f64> = pred.iter().map(|v| v * c).collect();
            let s = compute_metrics(&gs, &ps).unwrap();
            prop_assert!((s.mae - c * m.mae).abs() <= 1e-9 * (1.0 + c * m.mae));
            prop_assert!((s.rmse - c * m.rmse).abs() <= 1e-9 * (1.0 + c * m.rmse));
            if let (Some(a), Some(b)) = (m.rmae_pct, s.rmae_pct) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
            }
            if let (Some(a), Some(b)) = (m.r2, s.r2) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }
}
