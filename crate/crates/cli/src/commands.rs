//! Implementations of the seven subcommands. Every command is idempotent:
//! rerunning it rewrites the same artifacts from the same inputs, with
//! wall-clock timings isolated in their own files.

use crate::config::RunConfig;
use crate::pipeline::{self, Assembled, Market};
use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use garchrnn_core::data::diagnostics;
use garchrnn_core::eval::{
    aggregate_seeds, compute_metrics, high_vol_subset, write_aggregate_csv, MetricsReport,
    SeedAggregate,
};
use garchrnn_core::forecast::{
    classical_forecaster, read_forecast_csv, rolling_forecast, write_forecast_csv, ForecastRecord,
    Predictor,
};
use garchrnn_core::garch::{fit_garch_mle, to_json, FittedGarchJson, GarchParams, Innovations};
use garchrnn_core::risk::{backtest, fit_student_t, t_quantile, var_forecast, write_var_csv};
use garchrnn_core::training::{train, GateSnapshot};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Marker error for non-finite training losses; mapped to exit code 4.
#[derive(Debug)]
pub struct Divergence(pub String);

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training diverged: {}", self.0)
    }
}

impl std::error::Error for Divergence {}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub model_id: String,
    pub horizon: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub final_gate: Option<GateSnapshot>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TimingArtifact {
    pub model_id: String,
    pub horizon: usize,
    pub seed: u64,
    pub epoch_seconds: Vec<f64>,
    pub mean_epoch_seconds: f64,
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))
}

pub fn cmd_prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let market = pipeline::load_market(cfg)?;

    let mut wtr = csv::Writer::from_path(pipeline::returns_path(out))?;
    wtr.write_record(["date", "log_return_pct"])?;
    for (d, v) in market.returns.dates.iter().zip(&market.returns.values) {
        wtr.write_record([d.to_string(), format!("{v:.12}")])?;
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_path(pipeline::vol_path(out))?;
    wtr.write_record(["date", "realized_vol"])?;
    for (d, v) in market.vol.dates.iter().zip(&market.vol.values) {
        wtr.write_record([d.to_string(), format!("{v:.12}")])?;
    }
    wtr.flush()?;

    let report = diagnostics(&market.returns, 10)?;
    pipeline::write_json(&pipeline::diagnostics_path(out), &report)?;
    println!(
        "prepare: {} returns, {} vol targets (k={}), ARCH LM p={:.4}",
        market.returns.len(),
        market.vol.len(),
        cfg.k,
        report.lm_pvalue
    );
    Ok(())
}

/// Classical specs the run needs: the pipeline benchmark consumes a plain
/// GARCH filter even when "garch" itself is not evaluated.
fn required_classical(cfg: &RunConfig) -> Vec<&'static str> {
    let mut specs = Vec::new();
    if cfg.models.iter().any(|m| m == "garch" || m == "bm_pipeline") {
        specs.push("garch");
    }
    if cfg.models.iter().any(|m| m == "gjr") {
        specs.push("gjr");
    }
    specs
}

pub fn cmd_fit_garch(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let market = pipeline::load_market(cfg)?;
    let train_returns = pipeline::truncate_returns(&market.returns, cfg.split.train_end);
    let specs = required_classical(cfg);
    if specs.is_empty() {
        println!("fit-garch: no classical models in config, nothing to do");
        return Ok(());
    }
    for name in specs {
        let spec = pipeline::garch_spec(name)?;
        let (params, report) = fit_garch_mle(&train_returns, spec, false)?;
        let json = to_json(&params, spec, &report);
        pipeline::write_json(&pipeline::classical_path(out, name), &json)?;
        println!(
            "fit-garch: {name} omega={:.6} alpha={:.4} beta={:.4} persistence={:.4} loglik={:.2}",
            params.omega,
            params.alpha,
            params.beta,
            params.persistence(),
            report.loglik
        );
    }
    Ok(())
}

fn load_classical(out: &Path, model: &str) -> Result<GarchParams> {
    let path = pipeline::classical_path(out, model);
    if !path.exists() {
        bail!(
            "missing {}; run the fit-garch command first",
            path.display()
        );
    }
    let json: FittedGarchJson = pipeline::read_json(&path)?;
    Ok(GarchParams {
        mu: json.mu,
        omega: json.omega,
        alpha: json.alpha,
        beta: json.beta,
        gamma_lev: json.gamma_lev,
        innovations: Innovations::Normal,
    })
}

fn train_one(
    cfg: &RunConfig,
    out: &Path,
    asm: &Assembled,
    model: &str,
    horizon: usize,
    seed: u64,
) -> Result<()> {
    let init = pipeline::new_model(cfg, asm, model, seed)?;
    let (fitted, report) = train(init, &asm.train_set, &asm.val_set, &cfg.train, seed)?;
    if report.diverged {
        return Err(anyhow!(Divergence(format!(
            "{model} h={horizon} seed={seed}"
        ))));
    }
    pipeline::write_json(
        &pipeline::checkpoint_path(out, model, horizon, seed),
        &fitted.to_json(),
    )?;
    let epochs_run = report.val_mse.len();
    let best_val = report.val_mse[report.best_epoch];
    pipeline::write_json(
        &pipeline::train_report_path(out, model, horizon, seed),
        &TrainArtifact {
            model_id: model.to_string(),
            horizon,
            seed,
            best_epoch: report.best_epoch,
            epochs_run,
            stopped_early: report.stopped_early,
            train_mse: report.train_mse,
            val_mse: report.val_mse,
            final_gate: report.final_gate,
        },
    )?;
    let mean = report.epoch_seconds.iter().sum::<f64>() / report.epoch_seconds.len().max(1) as f64;
    pipeline::write_json(
        &pipeline::timing_path(out, model, horizon, seed),
        &TimingArtifact {
            model_id: model.to_string(),
            horizon,
            seed,
            epoch_seconds: report.epoch_seconds,
            mean_epoch_seconds: mean,
        },
    )?;
    println!(
        "train: {model} h={horizon} seed={seed} best_epoch={} val_mse={:.6} ({} epochs)",
        report.best_epoch, best_val, epochs_run
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, parallel: usize) -> Result<()> {
    ensure_out_dir(out)?;
    let market = pipeline::load_market(cfg)?;
    let neural: Vec<&str> = cfg
        .models
        .iter()
        .map(String::as_str)
        .filter(|m| pipeline::is_neural(m))
        .collect();
    if neural.is_empty() {
        println!("train: no recurrent models in config, nothing to do");
        return Ok(());
    }

    // assemble once per (model, horizon); the per-seed jobs share the result
    let mut assembled: Vec<(&str, usize, Assembled)> = Vec::new();
    for &model in &neural {
        for &h in &cfg.horizons {
            let asm = pipeline::assemble(cfg, &market, model, h)
                .with_context(|| format!("assembling data for {model} h={h}"))?;
            assembled.push((model, h, asm));
        }
    }
    let jobs: Vec<(usize, u64)> = assembled
        .iter()
        .enumerate()
        .flat_map(|(i, _)| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();

    let workers = parallel.max(1).min(jobs.len().max(1));
    if workers == 1 {
        for &(i, seed) in &jobs {
            let (model, h, ref asm) = assembled[i];
            train_one(cfg, out, asm, model, h, seed)?;
        }
        return Ok(());
    }

    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<anyhow::Error>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= jobs.len() || !failures.lock().unwrap().is_empty() {
                    break;
                }
                let (i, seed) = jobs[j];
                let (model, h, ref asm) = assembled[i];
                if let Err(e) = train_one(cfg, out, asm, model, h, seed) {
                    failures.lock().unwrap().push(e);
                }
            });
        }
    });
    let mut failures = failures.into_inner().unwrap();
    match failures.pop() {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

fn predictor_for(out: &Path, model: &str, horizon: usize, seed: u64) -> Result<Box<dyn Predictor>> {
    if pipeline::is_neural(model) {
        let path = pipeline::checkpoint_path(out, model, horizon, seed);
        if !path.exists() {
            bail!("missing {}; run the train command first", path.display());
        }
        Ok(Box::new(pipeline::load_checkpoint(&path)?))
    } else {
        let params = load_classical(out, model)?;
        Ok(Box::new(classical_forecaster(params, horizon)?))
    }
}

pub fn cmd_forecast(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let market = pipeline::load_market(cfg)?;
    for model in &cfg.models {
        for &h in &cfg.horizons {
            let asm = pipeline::assemble(cfg, &market, model, h)?;
            for seed in pipeline::model_seeds(cfg, model) {
                let predictor = predictor_for(out, model, h, seed)?;
                let mut segments = vec![("test", &asm.test_set)];
                if let Some(stress) = &asm.stress_set {
                    segments.push(("stress", stress));
                }
                for (segment, dataset) in segments {
                    let records = rolling_forecast(predictor.as_ref(), dataset, h, model, seed)?;
                    let path = pipeline::forecast_path(out, model, h, seed, segment);
                    let file = File::create(&path)
                        .with_context(|| format!("cannot write {}", path.display()))?;
                    write_forecast_csv(&records, file)?;
                    println!(
                        "forecast: {model} h={h} seed={seed} {segment}: {} records",
                        records.len()
                    );
                }
            }
        }
    }
    Ok(())
}

fn segments(cfg: &RunConfig) -> Vec<&'static str> {
    if cfg.stress_segment().is_some() {
        vec!["test", "stress"]
    } else {
        vec!["test"]
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    for segment in segments(cfg) {
        let mut per_seed: Vec<MetricsReport> = Vec::new();
        let mut seed_of: Vec<u64> = Vec::new();
        for model in &cfg.models {
            for &h in &cfg.horizons {
                for seed in pipeline::model_seeds(cfg, model) {
                    let path = pipeline::forecast_path(out, model, h, seed, segment);
                    if !path.exists() {
                        bail!("missing {}; run the forecast command first", path.display());
                    }
                    let file = File::open(&path)?;
                    let records = read_forecast_csv(file)?;
                    per_seed.push(compute_metrics(&records, model, h, "all")?);
                    seed_of.push(seed);
                    let high = high_vol_subset(&records, cfg.high_vol_q)?;
                    per_seed.push(compute_metrics(&high, model, h, "high_vol")?);
                    seed_of.push(seed);
                }
            }
        }

        let path = pipeline::metrics_seeds_path(out, segment);
        let mut wtr = csv::Writer::from_path(&path)?;
        wtr.write_record([
            "model_id", "horizon", "subset", "seed", "n", "mse", "mae", "smape", "oos_r2",
        ])?;
        for (r, seed) in per_seed.iter().zip(&seed_of) {
            wtr.write_record([
                r.model_id.clone(),
                r.horizon.to_string(),
                r.subset.clone(),
                seed.to_string(),
                r.n.to_string(),
                format!("{:.12}", r.mse),
                format!("{:.12}", r.mae),
                format!("{:.12}", r.smape),
                r.oos_r2.map(|v| format!("{v:.12}")).unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;

        let mut groups: BTreeMap<(String, usize, String), Vec<MetricsReport>> = BTreeMap::new();
        for r in per_seed {
            groups
                .entry((r.model_id.clone(), r.horizon, r.subset.clone()))
                .or_default()
                .push(r);
        }
        let aggregates: Vec<SeedAggregate> = groups
            .values()
            .map(|g| aggregate_seeds(g))
            .collect::<std::result::Result<_, _>>()?;
        let path = pipeline::metrics_path(out, segment);
        let file = File::create(&path)?;
        write_aggregate_csv(&aggregates, file)?;
        println!(
            "evaluate: {segment}: {} aggregate rows across {} models",
            aggregates.len(),
            cfg.models.len()
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BacktestArtifact {
    model_id: String,
    seed: u64,
    segment: String,
    alpha: f64,
    nu: f64,
    mu: f64,
    n_forecasts: usize,
    n_violations: usize,
    violation_ratio: f64,
    mean_pinball_loss: f64,
}

/// Next-day return after each forecast anchor, from the full return series.
fn next_returns(
    market: &Market,
    records: &[ForecastRecord],
) -> Result<(Vec<NaiveDate>, Vec<f64>)> {
    let index: BTreeMap<NaiveDate, usize> = market
        .returns
        .dates
        .iter()
        .enumerate()
        .map(|(i, &d)| (d, i))
        .collect();
    let mut dates = Vec::with_capacity(records.len());
    let mut values = Vec::with_capacity(records.len());
    for r in records {
        let i = *index
            .get(&r.anchor_date)
            .ok_or_else(|| anyhow!("anchor {} not in return series", r.anchor_date))?;
        let j = i + 1;
        if j >= market.returns.len() {
            bail!("no realized return after anchor {}", r.anchor_date);
        }
        dates.push(market.returns.dates[j]);
        values.push(market.returns.values[j]);
    }
    Ok((dates, values))
}

pub fn cmd_backtest(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    if !cfg.horizons.contains(&1) {
        return Err(anyhow!(garchrnn_core::CoreError::Config(
            "backtest requires horizon 1 in the config".into()
        )));
    }
    let market = pipeline::load_market(cfg)?;
    let alpha = cfg.var_alpha;
    for model in &cfg.models {
        let asm = pipeline::assemble(cfg, &market, model, 1)?;
        for seed in pipeline::model_seeds(cfg, model) {
            let predictor = predictor_for(out, model, 1, seed)?;

            // tail fit on training-segment standardized residuals
            let train_records = rolling_forecast(predictor.as_ref(), &asm.train_set, 1, model, seed)?;
            let (_, train_next) = next_returns(&market, &train_records)?;
            let residuals: Vec<f64> = train_records
                .iter()
                .zip(&train_next)
                .map(|(r, ret)| (ret - asm.mu_hat) / r.predicted_sigma)
                .collect();
            let nu = fit_student_t(&residuals)?;
            let q = t_quantile(alpha, nu)?;

            for segment in segments(cfg) {
                let path = pipeline::forecast_path(out, model, 1, seed, segment);
                if !path.exists() {
                    bail!("missing {}; run the forecast command first", path.display());
                }
                let records = read_forecast_csv(File::open(&path)?)?;
                let (dates, returns) = next_returns(&market, &records)?;
                let var_values: Vec<f64> = records
                    .iter()
                    .map(|r| var_forecast(asm.mu_hat, r.predicted_sigma, q))
                    .collect();
                let report = backtest(&returns, &var_values, alpha)?;
                let var_file = File::create(pipeline::var_path(out, model, seed, segment))?;
                write_var_csv(&dates, &returns, &var_values, alpha, var_file)?;
                pipeline::write_json(
                    &pipeline::backtest_path(out, model, seed, segment),
                    &BacktestArtifact {
                        model_id: model.clone(),
                        seed,
                        segment: segment.to_string(),
                        alpha,
                        nu,
                        mu: asm.mu_hat,
                        n_forecasts: report.n_forecasts,
                        n_violations: report.n_violations,
                        violation_ratio: report.violation_ratio,
                        mean_pinball_loss: report.mean_pinball_loss,
                    },
                )?;
                println!(
                    "backtest: {model} seed={seed} {segment}: {}/{} violations (ratio {:.4}, target {alpha}), pinball {:.6}, nu={nu:.2}",
                    report.n_violations,
                    report.n_forecasts,
                    report.violation_ratio,
                    report.mean_pinball_loss
                );
            }
        }
    }
    Ok(())
}

pub fn cmd_params(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let path = pipeline::params_path(out);
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record([
        "model_id",
        "horizon",
        "seed",
        "omega",
        "alpha",
        "beta",
        "alpha_plus_beta",
        "gamma_lev",
        "coupling",
    ])?;
    let mut rows = 0usize;
    for model in &cfg.models {
        match model.as_str() {
            "garch" | "gjr" => {
                let p = load_classical(out, model)?;
                wtr.write_record([
                    model.clone(),
                    String::new(),
                    String::new(),
                    format!("{:.6}", p.omega),
                    format!("{:.6}", p.alpha),
                    format!("{:.6}", p.beta),
                    format!("{:.6}", p.alpha + p.beta),
                    format!("{:.6}", p.gamma_lev),
                    String::new(),
                ])?;
                rows += 1;
            }
            "garch_gru" | "garch_lstm" => {
                for &h in &cfg.horizons {
                    for &seed in &cfg.seeds {
                        let report_path = pipeline::train_report_path(out, model, h, seed);
                        if !report_path.exists() {
                            bail!(
                                "missing {}; run the train command first",
                                report_path.display()
                            );
                        }
                        let artifact: TrainArtifact = pipeline::read_json(&report_path)?;
                        let gate = artifact.final_gate.ok_or_else(|| {
                            anyhow!("train report for {model} lacks gate parameters")
                        })?;
                        wtr.write_record([
                            model.clone(),
                            h.to_string(),
                            seed.to_string(),
                            format!("{:.6}", gate.omega),
                            format!("{:.6}", gate.alpha),
                            format!("{:.6}", gate.beta),
                            format!("{:.6}", gate.persistence),
                            String::new(),
                            format!("{:.6}", gate.coupling),
                        ])?;
                        rows += 1;
                    }
                }
            }
            _ => {} // plain recurrent models carry no interpretable recursion parameters
        }
    }
    wtr.flush()?;
    println!("params: wrote {rows} rows to {}", path.display());
    Ok(())
}
