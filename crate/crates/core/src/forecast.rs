//! Rolling-window forecast engine: one record per test sample, produced by
//! any window predictor (classical filter, recurrent model, or stub), plus
//! the feature construction for the pipeline benchmark.

use crate::data::{ReturnSeries, WindowSample, WindowedDataset};
use crate::error::{CoreError, Result};
use crate::garch::{forecast_garch, garch_filter, GarchParams, InitVariance};
use crate::model::Model;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub model_id: String,
    pub seed: u64,
    pub horizon: usize,
    pub anchor_date: NaiveDate,
    pub predicted_sigma: f64,
    pub realized_sigma: f64,
}

/// Anything that maps a w-step input window to a volatility forecast.
pub trait Predictor {
    fn predict_window(&self, sample: &WindowSample) -> Result<f64>;
}

impl Predictor for Model {
    fn predict_window(&self, sample: &WindowSample) -> Result<f64> {
        self.predict(sample)
    }
}

/// Classical adapter: filters the window's raw returns starting from the
/// unconditional variance, then emits the h-step volatility forecast.
pub struct ClassicalForecaster {
    pub params: GarchParams,
    pub horizon: usize,
}

pub fn classical_forecaster(params: GarchParams, horizon: usize) -> Result<ClassicalForecaster> {
    params.validate()?;
    if horizon == 0 {
        return Err(CoreError::param("horizon must be positive"));
    }
    Ok(ClassicalForecaster { params, horizon })
}

impl Predictor for ClassicalForecaster {
    fn predict_window(&self, sample: &WindowSample) -> Result<f64> {
        let series = series_from_window(sample);
        let init = InitVariance::Fixed(self.params.unconditional_variance());
        let filt = garch_filter(&self.params, &series, init)?;
        let (_, sigma) = forecast_garch(&self.params, &filt.state, self.horizon)?;
        Ok(sigma)
    }
}

fn series_from_window(sample: &WindowSample) -> ReturnSeries {
    let dates = (0..sample.raw_returns.len())
        .map(|i| sample.anchor - chrono::Days::new((sample.raw_returns.len() - 1 - i) as u64))
        .collect();
    ReturnSeries {
        dates,
        values: sample.raw_returns.clone(),
        percent: true,
    }
}

/// One forecast per sample, in date order. The predictor only ever sees the
/// input window, so lookahead is excluded structurally.
pub fn rolling_forecast(
    predictor: &dyn Predictor,
    dataset: &WindowedDataset,
    horizon: usize,
    model_id: &str,
    seed: u64,
) -> Result<Vec<ForecastRecord>> {
    if dataset.horizon != horizon {
        return Err(CoreError::Config(format!(
            "dataset built for horizon {} but horizon {} requested",
            dataset.horizon, horizon
        )));
    }
    let mut records = Vec::with_capacity(dataset.len());
    let mut prev_date: Option<NaiveDate> = None;
    for sample in &dataset.samples {
        let predicted = predictor.predict_window(sample)?;
        if !(predicted > 0.0) || !predicted.is_finite() {
            return Err(CoreError::numerical(format!(
                "non-positive prediction {predicted} at {}",
                sample.anchor
            )));
        }
        if let Some(p) = prev_date {
            if sample.anchor <= p {
                return Err(CoreError::data("forecast anchors not strictly increasing"));
            }
        }
        prev_date = Some(sample.anchor);
        records.push(ForecastRecord {
            model_id: model_id.to_string(),
            seed,
            horizon,
            anchor_date: sample.anchor,
            predicted_sigma: predicted,
            realized_sigma: sample.target,
        });
    }
    Ok(records)
}

/// Per-date (alpha * eps_t, beta * sigma_t) from a fitted classical GARCH,
/// used as inputs for the pipeline benchmark's plain recurrent model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineFeatures {
    pub dates: Vec<NaiveDate>,
    pub alpha_eps: Vec<f64>,
    pub beta_sigma: Vec<f64>,
}

pub fn pipeline_features(fitted: &GarchParams, returns: &ReturnSeries) -> Result<PipelineFeatures> {
    let filt = garch_filter(fitted, returns, InitVariance::Sample)?;
    let alpha_eps = filt.eps.iter().map(|e| fitted.alpha * e).collect();
    let beta_sigma = filt
        .sigma2
        .iter()
        .map(|s2| fitted.beta * s2.sqrt())
        .collect();
    Ok(PipelineFeatures {
        dates: returns.dates.clone(),
        alpha_eps,
        beta_sigma,
    })
}

/// CSV writer for forecast records; schema consumed by eval and risk.
pub fn write_forecast_csv<W: std::io::Write>(
    records: &[ForecastRecord],
    out: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "model_id",
        "seed",
        "horizon",
        "anchor_date",
        "predicted_sigma",
        "realized_sigma",
    ])
    .map_err(CoreError::from)?;
    for r in records {
        wtr.write_record([
            r.model_id.as_str(),
            &r.seed.to_string(),
            &r.horizon.to_string(),
            &r.anchor_date.to_string(),
            &format!("{:.12}", r.predicted_sigma),
            &format!("{:.12}", r.realized_sigma),
        ])
        .map_err(CoreError::from)?;
    }
    wtr.flush().map_err(|e| CoreError::data(e.to_string()))?;
    Ok(())
}

pub fn read_forecast_csv<R: std::io::Read>(input: R) -> Result<Vec<ForecastRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<ForecastRecord>().enumerate() {
        let r = row.map_err(|e| CoreError::data(format!("forecast csv row {}: {e}", i + 2)))?;
        records.push(r);
    }
    Ok(records)
}
