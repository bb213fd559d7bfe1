//! Forecast-accuracy metrics, high-volatility subsampling, multi-seed
//! aggregation, and epoch-time comparison.

use crate::error::{CoreError, Result};
use crate::forecast::ForecastRecord;
use crate::math;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub horizon: usize,
    pub subset: String,
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    /// None when the targets are constant and the baseline is undefined
    pub oos_r2: Option<f64>,
}

/// MSE, MAE, SMAPE (range [0,2], 0/0 terms count as 0), and out-of-sample R²
/// against the test-set-mean baseline.
pub fn compute_metrics(
    records: &[ForecastRecord],
    model_id: &str,
    horizon: usize,
    subset: &str,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(CoreError::data("compute_metrics requires records"));
    }
    let n = records.len() as f64;
    let mut sse = 0.0;
    let mut sae = 0.0;
    let mut smape = 0.0;
    for r in records {
        let err = r.predicted_sigma - r.realized_sigma;
        sse += err * err;
        sae += err.abs();
        let denom = (r.realized_sigma.abs() + r.predicted_sigma.abs()) / 2.0;
        if denom > 0.0 {
            smape += err.abs() / denom;
        }
    }
    let mean_y = records.iter().map(|r| r.realized_sigma).sum::<f64>() / n;
    let sst: f64 = records
        .iter()
        .map(|r| (r.realized_sigma - mean_y) * (r.realized_sigma - mean_y))
        .sum();
    let oos_r2 = if sst > 0.0 { Some(1.0 - sse / sst) } else { None };
    Ok(MetricsReport {
        model_id: model_id.to_string(),
        horizon,
        subset: subset.to_string(),
        n: records.len(),
        mse: sse / n,
        mae: sae / n,
        smape: smape / n,
        oos_r2,
    })
}

/// Records whose realized volatility reaches the empirical q-quantile
/// (ties at the threshold included).
pub fn high_vol_subset(records: &[ForecastRecord], q: f64) -> Result<Vec<ForecastRecord>> {
    if records.is_empty() {
        return Err(CoreError::data("high_vol_subset requires records"));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(CoreError::param("quantile must lie in [0,1)"));
    }
    let realized: Vec<f64> = records.iter().map(|r| r.realized_sigma).collect();
    let threshold = math::quantile(&realized, q);
    let subset: Vec<ForecastRecord> = records
        .iter()
        .filter(|r| r.realized_sigma >= threshold)
        .cloned()
        .collect();
    if subset.is_empty() {
        return Err(CoreError::data("high-volatility subset is empty"));
    }
    Ok(subset)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// None with fewer than 2 seeds
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub model_id: String,
    pub horizon: usize,
    pub subset: String,
    pub n_seeds: usize,
    pub mse: MetricSummary,
    pub mae: MetricSummary,
    pub smape: MetricSummary,
    pub oos_r2: Option<MetricSummary>,
}

fn summarize(values: &[f64]) -> MetricSummary {
    MetricSummary {
        mean: math::mean(values),
        std: if values.len() >= 2 {
            Some(math::std_sample(values))
        } else {
            None
        },
    }
}

/// Mean and (n−1) standard deviation per metric over seed-level reports for
/// one model / horizon / subset group.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<SeedAggregate> {
    let first = reports
        .first()
        .ok_or_else(|| CoreError::data("aggregate_seeds requires reports"))?;
    if reports
        .iter()
        .any(|r| r.model_id != first.model_id || r.horizon != first.horizon || r.subset != first.subset)
    {
        return Err(CoreError::data(
            "aggregate_seeds requires a single model/horizon/subset group",
        ));
    }
    let col = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    let r2: Vec<f64> = reports.iter().filter_map(|r| r.oos_r2).collect();
    Ok(SeedAggregate {
        model_id: first.model_id.clone(),
        horizon: first.horizon,
        subset: first.subset.clone(),
        n_seeds: reports.len(),
        mse: summarize(&col(|r| r.mse)),
        mae: summarize(&col(|r| r.mae)),
        smape: summarize(&col(|r| r.smape)),
        oos_r2: if r2.len() == reports.len() {
            Some(summarize(&r2))
        } else {
            None
        },
    })
}

/// Ratio of mean epoch wall-clock times: model B over model A.
pub fn compare_epoch_times(times_a: &[f64], times_b: &[f64]) -> Result<f64> {
    if times_a.is_empty() || times_b.is_empty() {
        return Err(CoreError::data("epoch timing arrays must be non-empty"));
    }
    let ma = math::mean(times_a);
    if ma <= 0.0 {
        return Err(CoreError::numerical("non-positive mean epoch time"));
    }
    Ok(math::mean(times_b) / ma)
}

/// Flat CSV rows for seed aggregates: model_id, horizon, subset, metric,
/// mean, std, n_seeds.
pub fn write_aggregate_csv<W: std::io::Write>(
    aggregates: &[SeedAggregate],
    out: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["model_id", "horizon", "subset", "metric", "mean", "std", "n_seeds"])
        .map_err(CoreError::from)?;
    for a in aggregates {
        let mut rows: BTreeMap<&str, &MetricSummary> = BTreeMap::new();
        rows.insert("mse", &a.mse);
        rows.insert("mae", &a.mae);
        rows.insert("smape", &a.smape);
        if let Some(r2) = &a.oos_r2 {
            rows.insert("oos_r2", r2);
        }
        for (metric, summary) in rows {
            wtr.write_record([
                a.model_id.as_str(),
                &a.horizon.to_string(),
                a.subset.as_str(),
                metric,
                &format!("{:.12}", summary.mean),
                &summary.std.map(|s| format!("{s:.12}")).unwrap_or_default(),
                &a.n_seeds.to_string(),
            ])
            .map_err(CoreError::from)?;
        }
    }
    wtr.flush().map_err(|e| CoreError::data(e.to_string()))?;
    Ok(())
}
