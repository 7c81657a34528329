//! Forecast metrics and the per-horizon report.

use crate::error::{Error, Result};

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths("mse", pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths("mae", pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

fn check_lengths(op: &'static str, pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::DimMismatch {
            op,
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("metrics over empty vectors".into()));
    }
    Ok(())
}

/// Repeat the last observed value across the horizon.
pub fn naive_last_value_forecast(lookback: &[f64], horizon: usize) -> Vec<f64> {
    let last = lookback.last().copied().unwrap_or(0.0);
    vec![last; horizon]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Per-horizon MSE/MAE plus the arithmetic mean across horizons.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub average_mse: f64,
    pub average_mae: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<MetricReport> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("metric report needs at least one row".into()));
        }
        let n = rows.len() as f64;
        let average_mse = rows.iter().map(|r| r.mse).sum::<f64>() / n;
        let average_mae = rows.iter().map(|r| r.mae).sum::<f64>() / n;
        Ok(MetricReport {
            rows,
            average_mse,
            average_mae,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mse,mae\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.horizon, row.mse, row.mae));
        }
        out.push_str(&format!("average,{},{}\n", self.average_mse, self.average_mae));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[2.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!((mae(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((mse(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn averaging_invariant() {
        let report = MetricReport::from_rows(vec![
            MetricRow { horizon: 8, mse: 1.0, mae: 0.5 },
            MetricRow { horizon: 16, mse: 3.0, mae: 1.5 },
        ])
        .unwrap();
        assert_eq!(report.average_mse, 2.0);
        assert_eq!(report.average_mae, 1.0);
        let csv = report.to_csv();
        assert!(csv.starts_with("horizon,mse,mae\n"));
        assert!(csv.ends_with("average,2,1\n"));
    }

    #[test]
    fn naive_forecast_repeats_last_value() {
        assert_eq!(naive_last_value_forecast(&[1.0, 5.0], 3), vec![5.0, 5.0, 5.0]);
    }
}
