//! Shared data assembly for the subcommands: loading prices, building
//! chronologically split window datasets, model construction, and the file
//! naming scheme for run artifacts.

use crate::config::RunConfig;
use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use garchrnn_core::data::{
    build_windows, chronological_split, default_features, feature_stats, load_price_csv,
    log_returns, realized_volatility, standardize, ReturnSeries, VolSeries,
    WindowedDataset,
};
use garchrnn_core::forecast::pipeline_features;
use garchrnn_core::garch::{fit_garch_mle, GarchParams, GarchSpec};
use garchrnn_core::math;
use garchrnn_core::model::{Model, ModelKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const NEURAL_MODELS: &[&str] = &["garch_gru", "garch_lstm", "gru", "lstm", "bm_pipeline"];

pub fn is_neural(model: &str) -> bool {
    NEURAL_MODELS.contains(&model)
}

pub fn model_kind(model: &str) -> Result<ModelKind> {
    Ok(match model {
        "gru" => ModelKind::Gru,
        // the pipeline benchmark feeds GARCH-derived features to a plain LSTM
        "lstm" | "bm_pipeline" => ModelKind::Lstm,
        "garch_gru" => ModelKind::GarchGru,
        "garch_lstm" => ModelKind::GarchLstm,
        other => bail!("'{other}' is not a trainable recurrent model"),
    })
}

pub fn garch_spec(model: &str) -> Result<GarchSpec> {
    Ok(match model {
        "garch" => GarchSpec::Plain,
        "gjr" => GarchSpec::Gjr,
        other => bail!("'{other}' is not a classical model"),
    })
}

pub struct Market {
    pub returns: ReturnSeries,
    pub vol: VolSeries,
}

pub fn load_market(cfg: &RunConfig) -> Result<Market> {
    let prices = load_price_csv(
        &cfg.data.price_csv,
        &cfg.data.date_column,
        &cfg.data.price_column,
    )
    .with_context(|| format!("loading {}", cfg.data.price_csv))?;
    let returns = log_returns(&prices, true);
    let vol = realized_volatility(&returns, cfg.k)?;
    Ok(Market { returns, vol })
}

/// Returns restricted to dates on or before `end`.
pub fn truncate_returns(returns: &ReturnSeries, end: NaiveDate) -> ReturnSeries {
    let n = returns.dates.iter().take_while(|&&d| d <= end).count();
    ReturnSeries {
        dates: returns.dates[..n].to_vec(),
        values: returns.values[..n].to_vec(),
        percent: returns.percent,
    }
}

/// Classical fit on the training segment only.
pub fn fit_classical(cfg: &RunConfig, market: &Market, spec: GarchSpec) -> Result<GarchParams> {
    let train_returns = truncate_returns(&market.returns, cfg.split.train_end);
    let (params, _) = fit_garch_mle(&train_returns, spec, false)?;
    Ok(params)
}

/// Step-aligned feature/target series over the full sample.
struct StepSeries {
    dates: Vec<NaiveDate>,
    feats: Vec<Vec<f64>>,
    raw: Vec<f64>,
    targets: Vec<f64>,
}

fn step_series(cfg: &RunConfig, market: &Market, model: &str) -> Result<StepSeries> {
    if model == "bm_pipeline" {
        // features come from a GARCH filter fitted on training data only
        let fitted = fit_classical(cfg, market, GarchSpec::Plain)?;
        let pf = pipeline_features(&fitted, &market.returns)?;
        let offset = market.returns.len() - market.vol.len();
        let feats = (0..market.vol.len())
            .map(|i| vec![pf.alpha_eps[offset + i], pf.beta_sigma[offset + i]])
            .collect();
        let raw = market.returns.values[offset..].to_vec();
        Ok(StepSeries {
            dates: market.vol.dates.clone(),
            feats,
            raw,
            targets: market.vol.values.clone(),
        })
    } else {
        let (dates, feats, raw) = default_features(&market.returns, &market.vol);
        Ok(StepSeries {
            dates,
            feats,
            raw,
            targets: market.vol.values.clone(),
        })
    }
}

fn windows_up_to(series: &StepSeries, end: NaiveDate, w: usize, h: usize) -> Result<WindowedDataset> {
    let n = series.dates.iter().take_while(|&&d| d <= end).count();
    build_windows(
        &series.dates[..n],
        &series.feats[..n],
        &series.raw[..n],
        &series.targets[..n],
        w,
        h,
    )
    .map_err(Into::into)
}

fn windows_between(
    series: &StepSeries,
    start: NaiveDate,
    end: NaiveDate,
    w: usize,
    h: usize,
) -> Result<WindowedDataset> {
    let full = build_windows(
        &series.dates,
        &series.feats,
        &series.raw,
        &series.targets,
        w,
        h,
    )?;
    let samples = full
        .samples
        .into_iter()
        .filter(|s| s.anchor >= start && s.anchor <= end)
        .collect::<Vec<_>>();
    if samples.is_empty() {
        bail!("no forecast windows with anchors in [{start}, {end}]");
    }
    Ok(WindowedDataset {
        samples,
        window: full.window,
        horizon: full.horizon,
        input_dim: full.input_dim,
    })
}

/// Everything a train or forecast job needs for one model family and horizon.
pub struct Assembled {
    pub train_set: WindowedDataset,
    pub val_set: WindowedDataset,
    pub test_set: WindowedDataset,
    pub stress_set: Option<WindowedDataset>,
    pub mu_hat: f64,
    pub sigma2_init: f64,
}

pub fn assemble(cfg: &RunConfig, market: &Market, model: &str, horizon: usize) -> Result<Assembled> {
    let series = step_series(cfg, market, model)?;
    let (w, h) = (cfg.window, horizon);

    let fit_windows = windows_up_to(&series, cfg.split.train_end, w, h)
        .context("building training windows")?;
    let (mut train_set, mut val_set) = chronological_split(&fit_windows, cfg.val_fraction)?;
    let stats = feature_stats(&train_set);
    standardize(&mut train_set, &stats);
    standardize(&mut val_set, &stats);

    let mut test_set = windows_between(&series, cfg.split.test_start, cfg.split.test_end, w, h)
        .context("building test windows")?;
    standardize(&mut test_set, &stats);

    let stress_set = match cfg.stress_segment() {
        Some((s, e)) => {
            let mut ds = windows_between(&series, s, e, w, h).context("building stress windows")?;
            standardize(&mut ds, &stats);
            Some(ds)
        }
        None => None,
    };

    let train_returns: Vec<f64> = train_set
        .samples
        .iter()
        .flat_map(|s| s.raw_returns.iter().copied())
        .collect();
    let mu_hat = math::mean(&train_returns);
    let sigma2_init = math::variance_pop(&train_returns);

    Ok(Assembled {
        train_set,
        val_set,
        test_set,
        stress_set,
        mu_hat,
        sigma2_init,
    })
}

pub fn new_model(cfg: &RunConfig, asm: &Assembled, model: &str, seed: u64) -> Result<Model> {
    let kind = model_kind(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Model::new(
        kind,
        asm.train_set.input_dim,
        cfg.train.hidden_dim,
        cfg.train.num_layers,
        cfg.train.lambda_max,
        asm.mu_hat,
        asm.sigma2_init,
        seed,
        &mut rng,
    ))
}

// file naming scheme under out_dir

pub fn returns_path(out: &Path) -> PathBuf {
    out.join("returns.csv")
}

pub fn vol_path(out: &Path) -> PathBuf {
    out.join("realized_vol.csv")
}

pub fn diagnostics_path(out: &Path) -> PathBuf {
    out.join("diagnostics.json")
}

pub fn classical_path(out: &Path, model: &str) -> PathBuf {
    out.join(format!("garch_{model}.json"))
}

pub fn checkpoint_path(out: &Path, model: &str, h: usize, seed: u64) -> PathBuf {
    out.join(format!("model_{model}_h{h}_s{seed}.json"))
}

pub fn train_report_path(out: &Path, model: &str, h: usize, seed: u64) -> PathBuf {
    out.join(format!("train_{model}_h{h}_s{seed}.json"))
}

pub fn timing_path(out: &Path, model: &str, h: usize, seed: u64) -> PathBuf {
    out.join(format!("timing_{model}_h{h}_s{seed}.json"))
}

pub fn forecast_path(out: &Path, model: &str, h: usize, seed: u64, segment: &str) -> PathBuf {
    out.join(format!("forecasts_{model}_h{h}_s{seed}_{segment}.csv"))
}

pub fn metrics_path(out: &Path, segment: &str) -> PathBuf {
    out.join(format!("metrics_{segment}.csv"))
}

pub fn metrics_seeds_path(out: &Path, segment: &str) -> PathBuf {
    out.join(format!("metrics_{segment}_seeds.csv"))
}

pub fn var_path(out: &Path, model: &str, seed: u64, segment: &str) -> PathBuf {
    out.join(format!("var_{model}_h1_s{seed}_{segment}.csv"))
}

pub fn backtest_path(out: &Path, model: &str, seed: u64, segment: &str) -> PathBuf {
    out.join(format!("backtest_{model}_h1_s{seed}_{segment}.json"))
}

pub fn params_path(out: &Path) -> PathBuf {
    out.join("params.csv")
}

/// Seeds relevant to a model: classical fits are seed-free and use 0.
pub fn model_seeds(cfg: &RunConfig, model: &str) -> Vec<u64> {
    if is_neural(model) {
        cfg.seeds.clone()
    } else {
        vec![0]
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let value: serde_json::Value = read_json(path)?;
    Model::from_json(&value).map_err(|e| anyhow!("checkpoint {}: {e}", path.display()))
}
