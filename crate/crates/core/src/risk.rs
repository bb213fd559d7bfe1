//! Value-at-Risk construction from volatility forecasts with a Student-t
//! residual model, violation backtesting, and pinball-loss scoring.

use crate::error::{CoreError, Result};
use crate::opt;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

pub const NU_MIN: f64 = 2.1;
pub const NU_MAX: f64 = 200.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaRSeries {
    pub dates: Vec<NaiveDate>,
    /// loss-scale VaR levels, one per forecast
    pub var_values: Vec<f64>,
    pub alpha: f64,
    pub nu: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub n_forecasts: usize,
    pub n_violations: usize,
    pub violation_ratio: f64,
    pub mean_pinball_loss: f64,
    pub alpha: f64,
}

/// Elementwise (r − μ)/σ.
pub fn standardized_residuals(returns: &[f64], mu: f64, sigmas: &[f64]) -> Result<Vec<f64>> {
    if returns.len() != sigmas.len() {
        return Err(CoreError::shape("returns and sigmas must align"));
    }
    if sigmas.iter().any(|&s| s <= 0.0) {
        return Err(CoreError::param("all sigmas must be > 0"));
    }
    Ok(returns
        .iter()
        .zip(sigmas)
        .map(|(r, s)| (r - mu) / s)
        .collect())
}

/// Maximum-likelihood degrees of freedom of a zero-location Student-t with a
/// jointly fitted scale, clamped to [2.1, 200].
pub fn fit_student_t(residuals: &[f64]) -> Result<f64> {
    if residuals.len() < 30 {
        return Err(CoreError::data("need at least 30 residuals"));
    }
    let var = crate::math::variance_pop(residuals);
    if !(var > 0.0) {
        return Err(CoreError::data("residuals are constant"));
    }
    // parameterization: nu = NU_MIN + exp(u0), scale = exp(u1)
    let mut neg_loglik = |u: &[f64]| -> f64 {
        let nu = (NU_MIN + u[0].exp()).min(NU_MAX + 50.0);
        let s = u[1].exp();
        let log_norm =
            ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln()
                - s.ln();
        let mut ll = 0.0;
        for &x in residuals {
            let z = x / s;
            ll += log_norm - (nu + 1.0) / 2.0 * (z * z / nu).ln_1p();
        }
        if ll.is_finite() {
            -ll
        } else {
            1e12
        }
    };
    let x0 = vec![(8.0f64 - NU_MIN).ln(), var.sqrt().ln()];
    let report = opt::minimize_bfgs(&mut neg_loglik, &x0, 300, 1e-8);
    let nu = (NU_MIN + report.x[0].exp()).clamp(NU_MIN, NU_MAX);
    Ok(nu)
}

/// Alpha-quantile of the variance-standardized Student-t: the standard t
/// quantile scaled by sqrt((nu−2)/nu) so the distribution has unit variance.
pub fn t_quantile(alpha: f64, nu: f64) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(CoreError::param("alpha must lie in (0,1)"));
    }
    if nu <= 2.0 {
        return Err(CoreError::param("nu must exceed 2"));
    }
    let t = StudentsT::new(0.0, 1.0, nu)
        .map_err(|e| CoreError::param(format!("student-t setup: {e}")))?;
    Ok(t.inverse_cdf(alpha) * ((nu - 2.0) / nu).sqrt())
}

/// Loss-scale VaR level: −μ − q_α·σ̂.
pub fn var_forecast(mu: f64, sigma_hat: f64, q_alpha: f64) -> f64 {
    -mu - q_alpha * sigma_hat
}

/// Violations (r < −VaR), violation ratio, and mean pinball loss:
/// α·(r + VaR) when r ≥ −VaR, else (1−α)·(−r − VaR).
pub fn backtest(returns: &[f64], var_values: &[f64], alpha: f64) -> Result<BacktestReport> {
    if returns.is_empty() || returns.len() != var_values.len() {
        return Err(CoreError::shape("returns and VaR series must align"));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(CoreError::param("alpha must lie in (0,1)"));
    }
    let mut violations = 0usize;
    let mut pinball = 0.0;
    for (&r, &v) in returns.iter().zip(var_values) {
        if r < -v {
            violations += 1;
            pinball += (1.0 - alpha) * (-r - v);
        } else {
            pinball += alpha * (r + v);
        }
    }
    let n = returns.len();
    Ok(BacktestReport {
        n_forecasts: n,
        n_violations: violations,
        violation_ratio: violations as f64 / n as f64,
        mean_pinball_loss: pinball / n as f64,
        alpha,
    })
}

/// CSV source for violation plots: date, return, var, violation, pinball.
pub fn write_var_csv<W: std::io::Write>(
    dates: &[NaiveDate],
    returns: &[f64],
    var_values: &[f64],
    alpha: f64,
    out: W,
) -> Result<()> {
    if dates.len() != returns.len() || returns.len() != var_values.len() {
        return Err(CoreError::shape("var csv inputs must align"));
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["date", "return", "var", "violation", "pinball"])
        .map_err(CoreError::from)?;
    for ((d, &r), &v) in dates.iter().zip(returns).zip(var_values) {
        let violated = r < -v;
        let pinball = if violated {
            (1.0 - alpha) * (-r - v)
        } else {
            alpha * (r + v)
        };
        wtr.write_record([
            d.to_string(),
            format!("{r:.12}"),
            format!("{v:.12}"),
            (violated as u8).to_string(),
            format!("{pinball:.12}"),
        ])
        .map_err(CoreError::from)?;
    }
    wtr.flush().map_err(|e| CoreError::data(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal, StudentT as StudentTDist};

    #[test]
    fn residuals_hand_examples() {
        assert_eq!(
            standardized_residuals(&[1.0, 3.0], 1.0, &[1.0, 2.0]).unwrap(),
            vec![0.0, 1.0]
        );
        assert_eq!(
            standardized_residuals(&[2.0, 2.0], 2.0, &[0.5, 3.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(standardized_residuals(&[1.0], 0.0, &[0.0]).is_err());
        assert!(standardized_residuals(&[1.0, 2.0], 0.0, &[1.0]).is_err());
    }

    #[test]
    fn fit_recovers_t5() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let dist = StudentTDist::new(5.0).unwrap();
        let sample: Vec<f64> = (0..50000).map(|_| dist.sample(&mut rng)).collect();
        let nu = fit_student_t(&sample).unwrap();
        assert!((4.5..=5.5).contains(&nu), "nu = {nu}");
    }

    #[test]
    fn fit_pushes_normal_data_to_upper_region() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let sample: Vec<f64> = (0..50000).map(|_| dist.sample(&mut rng)).collect();
        let nu = fit_student_t(&sample).unwrap();
        assert!(nu >= 30.0, "nu = {nu}");
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(fit_student_t(&vec![1.0; 100]).is_err());
        assert!(fit_student_t(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn quantile_symmetry_and_normal_limit() {
        for nu in [3.0, 5.0, 30.0] {
            assert_abs_diff_eq!(t_quantile(0.5, nu).unwrap(), 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(
                t_quantile(0.05, nu).unwrap(),
                -t_quantile(0.95, nu).unwrap(),
                epsilon = 1e-10
            );
        }
        assert_abs_diff_eq!(t_quantile(0.01, 1e6).unwrap(), -2.3263, epsilon = 1e-3);
        assert!(t_quantile(0.0, 5.0).is_err());
        assert!(t_quantile(0.5, 2.0).is_err());
    }

    #[test]
    fn var_forecast_examples() {
        assert_abs_diff_eq!(var_forecast(0.5, 0.0, -2.0), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(var_forecast(0.0, 1.0, -2.3263), 2.3263, epsilon = 1e-12);
        // doubling sigma doubles VaR + mu
        let mu = 0.2;
        let a = var_forecast(mu, 1.0, -2.0) + mu;
        let b = var_forecast(mu, 2.0, -2.0) + mu;
        assert_abs_diff_eq!(b, 2.0 * a, epsilon = 1e-12);
    }

    #[test]
    fn backtest_ratio_matches_reported_convention() {
        let mut returns = vec![0.5; 230];
        for r in returns.iter_mut().take(6) {
            *r = -5.0;
        }
        let var_values = vec![2.0; 230];
        let rep = backtest(&returns, &var_values, 0.01).unwrap();
        assert_eq!(rep.n_violations, 6);
        assert_abs_diff_eq!(rep.violation_ratio, 0.026087, epsilon = 1e-6);
    }

    #[test]
    fn pinball_branches() {
        let rep = backtest(&[1.0], &[2.0], 0.01).unwrap();
        assert_abs_diff_eq!(rep.mean_pinball_loss, 0.03, epsilon = 1e-12);
        let rep = backtest(&[-3.0], &[2.0], 0.01).unwrap();
        assert_abs_diff_eq!(rep.mean_pinball_loss, 0.99, epsilon = 1e-12);
        // boundary: r = -VaR exactly is not a violation and contributes zero
        let rep = backtest(&[-2.0], &[2.0], 0.01).unwrap();
        assert_eq!(rep.n_violations, 0);
        assert_abs_diff_eq!(rep.mean_pinball_loss, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_coverage_calibrated() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let alpha = 0.01;
        let q = t_quantile(alpha, 1e6).unwrap();
        let n = 10000;
        let returns: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let var_values = vec![var_forecast(0.0, 1.0, q); n];
        let rep = backtest(&returns, &var_values, alpha).unwrap();
        assert!(
            (0.0044..=0.0161).contains(&rep.violation_ratio),
            "ratio = {}",
            rep.violation_ratio
        );
    }

    #[test]
    fn pinball_minimized_at_empirical_quantile() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let alpha = 0.05;
        let returns: Vec<f64> = (0..20000).map(|_| normal.sample(&mut rng)).collect();
        let empirical_q = crate::math::quantile(&returns, alpha);
        // loss-scale VaR corresponding to the empirical return quantile
        let best_var = -empirical_q;
        let step = 0.02;
        let base = backtest(&returns, &vec![best_var; returns.len()], alpha)
            .unwrap()
            .mean_pinball_loss;
        let mut grid_best = f64::INFINITY;
        let mut grid_arg = 0.0;
        for i in -100..=100 {
            let v = best_var + step * i as f64;
            let loss = backtest(&returns, &vec![v; returns.len()], alpha)
                .unwrap()
                .mean_pinball_loss;
            if loss < grid_best {
                grid_best = loss;
                grid_arg = v;
            }
        }
        assert!((grid_arg - best_var).abs() <= step + 1e-12);
        assert!(base <= grid_best + step * 0.1);
    }

    #[test]
    fn violation_count_rank_invariant() {
        let returns = vec![-3.0, -1.0, 0.5, 2.0];
        let var_values = vec![1.5; 4];
        let before = backtest(&returns, &var_values, 0.05).unwrap().n_violations;
        // strictly increasing transform applied to r and -VaR simultaneously
        let f = |x: f64| x.exp();
        let tr: Vec<f64> = returns.iter().map(|&r| f(r)).collect();
        let tv: Vec<f64> = var_values.iter().map(|&v| -f(-v)).collect();
        let after = backtest(&tr, &tv, 0.05).unwrap().n_violations;
        assert_eq!(before, after);
    }

    #[test]
    fn var_csv_schema() {
        let dates = vec![
            NaiveDate::from_ymd_opt(2019, 1, 2).unwrap(),
            NaiveDate::from_ymd_opt(2019, 1, 3).unwrap(),
        ];
        let mut buf = Vec::new();
        write_var_csv(&dates, &[-3.0, 0.5], &[2.0, 2.0], 0.01, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "date,return,var,violation,pinball");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[3], "1");
    }
}
