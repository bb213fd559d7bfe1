//! Price ingestion, return and realized-volatility construction, rolling
//! window datasets with chronological splits, and return-series diagnostics.

use crate::error::{CoreError, Result};
use crate::math;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use std::path::Path;

/// Dated closing prices. Dates strictly increasing, all closes positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceSeries {
    pub dates: Vec<NaiveDate>,
    pub closes: Vec<f64>,
}

impl PriceSeries {
    pub fn new(dates: Vec<NaiveDate>, closes: Vec<f64>) -> Result<Self> {
        if dates.len() != closes.len() {
            return Err(CoreError::data("dates and closes length mismatch"));
        }
        if dates.len() < 2 {
            return Err(CoreError::data("price series requires length ≥ 2"));
        }
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(CoreError::data(format!(
                    "dates not strictly increasing at {}",
                    w[1]
                )));
            }
        }
        if let Some((i, c)) = closes.iter().enumerate().find(|(_, c)| **c <= 0.0) {
            return Err(CoreError::data(format!(
                "non-positive price {} at {}",
                c, dates[i]
            )));
        }
        Ok(PriceSeries { dates, closes })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// Log returns, optionally in percent units (×100). Dates align to the later
/// price of each pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    /// true when values carry the ×100 percent scaling
    pub percent: bool,
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Rolling realized volatility over k prior returns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    pub k: usize,
}

impl VolSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One supervised sample: a w-step input window plus the realized volatility
/// h steps after the window end. Raw returns for the window steps ride along
/// so the GARCH recursions can form innovations without lookahead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowSample {
    pub anchor: NaiveDate,
    /// w × input_dim, row-major by time step
    pub features: Vec<f64>,
    /// raw (unstandardized) returns for the window steps, length w
    pub raw_returns: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub samples: Vec<WindowSample>,
    pub window: usize,
    pub horizon: usize,
    pub input_dim: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-feature standardization statistics, computed on the training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub t_stat: f64,
    pub t_pvalue: f64,
    pub lm_stat: f64,
    pub lm_pvalue: f64,
}

/// Load a daily close CSV with a header row. Rows are sorted ascending by
/// date; duplicate dates and non-positive prices are rejected.
pub fn load_price_csv(
    path: impl AsRef<Path>,
    date_column: &str,
    price_column: &str,
) -> Result<PriceSeries> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CoreError::data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let date_idx = headers
        .iter()
        .position(|h| h == date_column)
        .ok_or_else(|| CoreError::data(format!("missing column '{date_column}'")))?;
    let price_idx = headers
        .iter()
        .position(|h| h == price_column)
        .ok_or_else(|| CoreError::data(format!("missing column '{price_column}'")))?;

    let mut rows: Vec<(NaiveDate, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record?;
        let date_str = record
            .get(date_idx)
            .ok_or_else(|| CoreError::data(format!("line {line}: missing date field")))?;
        let date = NaiveDate::parse_from_str(date_str.trim(), "%Y-%m-%d")
            .map_err(|e| CoreError::data(format!("line {line}: unparseable date '{date_str}': {e}")))?;
        let price_str = record
            .get(price_idx)
            .ok_or_else(|| CoreError::data(format!("line {line}: missing price field")))?;
        let price: f64 = price_str
            .trim()
            .parse()
            .map_err(|e| CoreError::data(format!("line {line}: unparseable price '{price_str}': {e}")))?;
        if price <= 0.0 {
            return Err(CoreError::data(format!(
                "line {line}: non-positive price {price} on {date}"
            )));
        }
        rows.push((date, price));
    }
    rows.sort_by_key(|(d, _)| *d);
    for w in rows.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(CoreError::data(format!("duplicate date {}", w[0].0)));
        }
    }
    let (dates, closes): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    PriceSeries::new(dates, closes)
}

/// Daily log returns, ×100 when `percent` is set.
pub fn log_returns(prices: &PriceSeries, percent: bool) -> ReturnSeries {
    let scale = if percent { 100.0 } else { 1.0 };
    let values: Vec<f64> = prices
        .closes
        .windows(2)
        .map(|w| scale * (w[1] / w[0]).ln())
        .collect();
    ReturnSeries {
        dates: prices.dates[1..].to_vec(),
        values,
        percent,
    }
}

/// Rolling realized volatility: σ_t = sqrt((1/k) Σ_{i=1..k} (r_{t−i} − μ_k)²),
/// population normalization. The value at index t uses the k returns strictly
/// before t, so the first defined value requires k prior returns.
pub fn realized_volatility(returns: &ReturnSeries, k: usize) -> Result<VolSeries> {
    if k < 2 {
        return Err(CoreError::param("realized volatility requires k ≥ 2"));
    }
    if returns.len() < k + 1 {
        return Err(CoreError::data(format!(
            "realized volatility requires at least k+1={} returns, got {}",
            k + 1,
            returns.len()
        )));
    }
    let mut dates = Vec::with_capacity(returns.len() - k);
    let mut values = Vec::with_capacity(returns.len() - k);
    for t in k..returns.len() {
        let window = &returns.values[t - k..t];
        let mu = math::mean(window);
        let var = window.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / k as f64;
        dates.push(returns.dates[t]);
        values.push(var.sqrt());
    }
    Ok(VolSeries { dates, values, k })
}

/// Default per-step input features: [r_t, r_t², realized σ_t].
/// Rows align with the realized-vol dates (the first k return steps are dropped).
pub fn default_features(returns: &ReturnSeries, vol: &VolSeries) -> (Vec<NaiveDate>, Vec<Vec<f64>>, Vec<f64>) {
    let offset = returns.len() - vol.len();
    let mut dates = Vec::with_capacity(vol.len());
    let mut feats = Vec::with_capacity(vol.len());
    let mut raw = Vec::with_capacity(vol.len());
    for (i, &v) in vol.values.iter().enumerate() {
        let r = returns.values[offset + i];
        dates.push(vol.dates[i]);
        feats.push(vec![r, r * r, v]);
        raw.push(r);
    }
    (dates, feats, raw)
}

/// Build rolling-window samples. `features`, `raw_returns`, and `targets`
/// must be date-aligned step series of equal length L; the sample count is
/// L − w − h + 1. Sample j covers input steps [j, j+w) and targets the
/// realized volatility at step j+w−1+h.
pub fn build_windows(
    dates: &[NaiveDate],
    features: &[Vec<f64>],
    raw_returns: &[f64],
    targets: &[f64],
    w: usize,
    h: usize,
) -> Result<WindowedDataset> {
    let l = features.len();
    if dates.len() != l || raw_returns.len() != l || targets.len() != l {
        return Err(CoreError::data("feature/target series length mismatch"));
    }
    if w == 0 || h == 0 {
        return Err(CoreError::param("window and horizon must be positive"));
    }
    if l < w + h {
        return Err(CoreError::data(format!(
            "insufficient length: need at least w+h={} steps, got {l}",
            w + h
        )));
    }
    let input_dim = features[0].len();
    let n = l - w - h + 1;
    let mut samples = Vec::with_capacity(n);
    for j in 0..n {
        let end = j + w; // exclusive
        let mut flat = Vec::with_capacity(w * input_dim);
        for step in j..end {
            flat.extend_from_slice(&features[step]);
        }
        samples.push(WindowSample {
            anchor: dates[end - 1],
            features: flat,
            raw_returns: raw_returns[j..end].to_vec(),
            target: targets[end - 1 + h],
        });
    }
    Ok(WindowedDataset {
        samples,
        window: w,
        horizon: h,
        input_dim,
    })
}

/// Split a dataset chronologically: the final ⌈N·val_fraction⌉ samples by
/// anchor date become the validation set.
pub fn chronological_split(
    dataset: &WindowedDataset,
    val_fraction: f64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CoreError::param(format!(
            "val_fraction must lie in (0,1), got {val_fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(CoreError::data("cannot split an empty dataset"));
    }
    let n = dataset.len();
    let n_val = ((n as f64) * val_fraction).ceil() as usize;
    let n_train = n - n_val;
    if n_train == 0 {
        return Err(CoreError::data("split leaves no training samples"));
    }
    let mk = |samples: Vec<WindowSample>| WindowedDataset {
        samples,
        window: dataset.window,
        horizon: dataset.horizon,
        input_dim: dataset.input_dim,
    };
    Ok((
        mk(dataset.samples[..n_train].to_vec()),
        mk(dataset.samples[n_train..].to_vec()),
    ))
}

/// Compute per-feature mean/std over every step of every sample.
pub fn feature_stats(dataset: &WindowedDataset) -> FeatureStats {
    let d = dataset.input_dim;
    let mut sums = vec![0.0; d];
    let mut sqs = vec![0.0; d];
    let mut n = 0usize;
    for s in &dataset.samples {
        for step in s.features.chunks(d) {
            for (j, &x) in step.iter().enumerate() {
                sums[j] += x;
                sqs[j] += x * x;
            }
            n += 1;
        }
    }
    let nf = n as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let stds: Vec<f64> = sqs
        .iter()
        .zip(&means)
        .map(|(sq, m)| {
            let v = (sq / nf - m * m).max(0.0);
            let s = v.sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    FeatureStats { means, stds }
}

/// Standardize features in place using the given (train-split) statistics.
pub fn standardize(dataset: &mut WindowedDataset, stats: &FeatureStats) {
    let d = dataset.input_dim;
    for s in &mut dataset.samples {
        for step in s.features.chunks_mut(d) {
            for (j, x) in step.iter_mut().enumerate() {
                *x = (*x - stats.means[j]) / stats.stds[j];
            }
        }
    }
}

/// ARCH Lagrange-multiplier test: n·R² from regressing squared demeaned
/// returns on their own lags (with intercept); chi-square with `lags` dof.
pub fn arch_lm_test(returns: &ReturnSeries, lags: usize) -> Result<(f64, f64)> {
    let n = returns.len();
    if lags == 0 {
        return Err(CoreError::param("lags must be positive"));
    }
    if n <= lags + 1 {
        return Err(CoreError::data("series too short for the requested lags"));
    }
    let mu = math::mean(&returns.values);
    let sq: Vec<f64> = returns.values.iter().map(|r| (r - mu) * (r - mu)).collect();
    if math::variance_pop(&sq) < 1e-14 {
        return Err(CoreError::data("zero variance"));
    }

    // auxiliary regression: sq[t] on [1, sq[t-1], ..., sq[t-lags]]
    let n_obs = n - lags;
    let p = lags + 1;
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut y_sum = 0.0;
    let mut y_sq = 0.0;
    let mut row = vec![0.0; p];
    for t in lags..n {
        row[0] = 1.0;
        for l in 1..=lags {
            row[l] = sq[t - l];
        }
        let y = sq[t];
        y_sum += y;
        y_sq += y * y;
        for i in 0..p {
            xty[i] += row[i] * y;
            for j in 0..p {
                xtx[i * p + j] += row[i] * row[j];
            }
        }
    }
    let beta = math::solve_linear(&xtx, &xty, p)
        .ok_or_else(|| CoreError::numerical("singular auxiliary regression"))?;
    // SSR via normal equations: Σŷy = βᵀ XᵀY
    let explained: f64 = beta.iter().zip(&xty).map(|(b, v)| b * v).sum();
    let sse = y_sq - explained;
    let y_mean = y_sum / n_obs as f64;
    let sst = y_sq - n_obs as f64 * y_mean * y_mean;
    if sst <= 0.0 {
        return Err(CoreError::data("zero variance"));
    }
    let r2 = (1.0 - sse / sst).clamp(0.0, 1.0);
    let stat = n_obs as f64 * r2;
    let chi = ChiSquared::new(lags as f64).map_err(|e| CoreError::numerical(e.to_string()))?;
    let pvalue = 1.0 - chi.cdf(stat);
    Ok((stat, pvalue))
}

/// Two-sided t-test of zero mean: t = mean / (sample std / sqrt(n)).
pub fn mean_t_test(returns: &ReturnSeries) -> Result<(f64, f64)> {
    let n = returns.len();
    if n < 2 {
        return Err(CoreError::data("t-test requires length ≥ 2"));
    }
    let m = math::mean(&returns.values);
    let s = math::std_sample(&returns.values);
    if s < 1e-14 {
        return Err(CoreError::data("zero variance"));
    }
    let t = m / (s / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| CoreError::numerical(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}

/// Full diagnostics block: sample moments plus the ARCH LM and zero-mean tests.
pub fn diagnostics(returns: &ReturnSeries, lm_lags: usize) -> Result<DiagnosticsReport> {
    let (t_stat, t_pvalue) = mean_t_test(returns)?;
    let (lm_stat, lm_pvalue) = arch_lm_test(returns, lm_lags)?;
    Ok(DiagnosticsReport {
        count: returns.len(),
        mean: math::mean(&returns.values),
        std: math::std_sample(&returns.values),
        skewness: math::skewness(&returns.values),
        kurtosis: math::kurtosis(&returns.values),
        t_stat,
        t_pvalue,
        lm_stat,
        lm_pvalue,
    })
}
