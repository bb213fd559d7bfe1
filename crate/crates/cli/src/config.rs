use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use garchrnn_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const VALID_MODELS: &[&str] = &[
    "garch",
    "gjr",
    "garch_gru",
    "garch_lstm",
    "gru",
    "lstm",
    "bm_pipeline",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub price_csv: String,
    #[serde(default = "default_date_column")]
    pub date_column: String,
    #[serde(default = "default_price_column")]
    pub price_column: String,
}

fn default_date_column() -> String {
    "Date".into()
}

fn default_price_column() -> String {
    "Close".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub stress_start: Option<NaiveDate>,
    pub stress_end: Option<NaiveDate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub out_dir: String,
    pub models: Vec<String>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub split: SplitConfig,
    pub train: TrainConfig,
    /// realized-volatility lookback in returns
    #[serde(default = "default_k")]
    pub k: usize,
    /// input window length in trading days
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_var_alpha")]
    pub var_alpha: f64,
    #[serde(default = "default_high_vol_q")]
    pub high_vol_q: f64,
}

fn default_k() -> usize {
    5
}

fn default_window() -> usize {
    22
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_var_alpha() -> f64 {
    0.01
}

fn default_high_vol_q() -> f64 {
    0.9
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config JSON in {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            bail!("config: models list must be non-empty");
        }
        for m in &self.models {
            if !VALID_MODELS.contains(&m.as_str()) {
                bail!(
                    "config: unknown model '{m}'; valid names: {}",
                    VALID_MODELS.join(", ")
                );
            }
        }
        if self.seeds.is_empty() {
            bail!("config: seeds list must be non-empty");
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h == 0 || h > 30) {
            bail!("config: horizons must be a non-empty subset of 1..=30");
        }
        if self.split.train_end >= self.split.test_start {
            bail!("config: train_end must precede test_start");
        }
        if self.split.test_start > self.split.test_end {
            bail!("config: test_start must not exceed test_end");
        }
        if let (Some(s), Some(e)) = (self.split.stress_start, self.split.stress_end) {
            if s > e {
                bail!("config: stress_start must not exceed stress_end");
            }
            if s <= self.split.test_end {
                bail!("config: stress segment must follow the test segment");
            }
        }
        if !(0.0 < self.var_alpha && self.var_alpha < 1.0) {
            bail!("config: var_alpha must lie in (0,1)");
        }
        if !(0.0..1.0).contains(&self.high_vol_q) {
            bail!("config: high_vol_q must lie in [0,1)");
        }
        if self.k < 2 {
            bail!("config: k must be at least 2");
        }
        if self.window < 2 {
            bail!("config: window must be at least 2");
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            bail!("config: val_fraction must lie in (0,1)");
        }
        self.train
            .validate()
            .map_err(|e| anyhow::anyhow!("config: {e}"))?;
        Ok(())
    }

    pub fn stress_segment(&self) -> Option<(NaiveDate, NaiveDate)> {
        match (self.split.stress_start, self.split.stress_end) {
            (Some(s), Some(e)) => Some((s, e)),
            _ => None,
        }
    }
}
