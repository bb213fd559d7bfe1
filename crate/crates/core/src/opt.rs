//! Unconstrained quasi-Newton minimizer used by the maximum-likelihood fits.
//!
//! BFGS on the inverse Hessian with central-difference gradients and a
//! backtracking Armijo line search. Objectives are expected to return a large
//! finite value (or +inf) on invalid regions; non-finite values make the line
//! search shrink the step.

#[derive(Debug, Clone)]
pub struct OptReport {
    pub x: Vec<f64>,
    pub fval: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Minimize `f` starting from `x0`. Stops when the gradient max-norm drops
/// below `gtol` or after `max_iter` iterations.
pub fn minimize_bfgs(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    max_iter: usize,
    gtol: f64,
) -> OptReport {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut g = numeric_grad(f, &x);
    // inverse Hessian approximation, starts at identity
    let mut h_inv = identity(n);
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < gtol {
            return OptReport {
                x,
                fval: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            };
        }

        // search direction d = -H g
        let mut d = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += h_inv[i * n + j] * g[j];
            }
            d[i] = -acc;
        }
        let dg: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if dg >= 0.0 {
            // not a descent direction; reset to steepest descent
            h_inv = identity(n);
            for i in 0..n {
                d[i] = -g[i];
            }
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();

        // backtracking Armijo line search
        let mut step = 1.0;
        let mut x_new = x.clone();
        let mut f_new = f64::INFINITY;
        let mut ok = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            f_new = f(&x_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if !ok {
            let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return OptReport {
                x,
                fval: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: gnorm < gtol,
            };
        }

        let g_new = numeric_grad(f, &x_new);
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            bfgs_update(&mut h_inv, &s, &y, sy, n);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    OptReport {
        x,
        fval: fx,
        grad_norm: gnorm,
        iterations,
        converged: gnorm < gtol,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let mut hy = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += h[i * n + j] * y[j];
        }
        hy[i] = acc;
    }
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                + rho * rho * yhy * s[i] * s[j]
                + rho * s[i] * s[j];
        }
    }
}
