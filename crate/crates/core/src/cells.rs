//! Recurrent cells: plain GRU and LSTM, and the hybrid variants that embed a
//! GARCH(1,1) recursion in the hidden-state update — additively for the GRU
//! cell, multiplicatively for the LSTM cell — plus the softplus-sqrt
//! volatility head and the stationarity reparameterization for the embedded
//! gate parameters.

use crate::error::{CoreError, Result};
use crate::math::{dot, sigmoid, softplus, Mat};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// GRU weights: input-to-hidden W_*, hidden-to-hidden U_*, biases b_* for the
/// update (z), reset (r), and candidate (h) paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Mat,
    pub w_r: Mat,
    pub w_h: Mat,
    pub u_z: Mat,
    pub u_r: Mat,
    pub u_h: Mat,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GruParams {
            w_z: Mat::zeros(hidden_dim, input_dim),
            w_r: Mat::zeros(hidden_dim, input_dim),
            w_h: Mat::zeros(hidden_dim, input_dim),
            u_z: Mat::zeros(hidden_dim, hidden_dim),
            u_r: Mat::zeros(hidden_dim, hidden_dim),
            u_h: Mat::zeros(hidden_dim, hidden_dim),
            b_z: vec![0.0; hidden_dim],
            b_r: vec![0.0; hidden_dim],
            b_h: vec![0.0; hidden_dim],
        }
    }

    pub fn init_uniform(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| {
            Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
        };
        GruParams {
            w_z: mat(hidden_dim, input_dim),
            w_r: mat(hidden_dim, input_dim),
            w_h: mat(hidden_dim, input_dim),
            u_z: mat(hidden_dim, hidden_dim),
            u_r: mat(hidden_dim, hidden_dim),
            u_h: mat(hidden_dim, hidden_dim),
            b_z: vec![0.0; hidden_dim],
            b_r: vec![0.0; hidden_dim],
            b_h: vec![0.0; hidden_dim],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_z.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols
    }
}

/// LSTM weights for the forget (f), input (i), output (o), and candidate (c)
/// paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_f: Mat,
    pub w_i: Mat,
    pub w_o: Mat,
    pub w_c: Mat,
    pub u_f: Mat,
    pub u_i: Mat,
    pub u_o: Mat,
    pub u_c: Mat,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_c: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            w_f: Mat::zeros(hidden_dim, input_dim),
            w_i: Mat::zeros(hidden_dim, input_dim),
            w_o: Mat::zeros(hidden_dim, input_dim),
            w_c: Mat::zeros(hidden_dim, input_dim),
            u_f: Mat::zeros(hidden_dim, hidden_dim),
            u_i: Mat::zeros(hidden_dim, hidden_dim),
            u_o: Mat::zeros(hidden_dim, hidden_dim),
            u_c: Mat::zeros(hidden_dim, hidden_dim),
            b_f: vec![0.0; hidden_dim],
            b_i: vec![0.0; hidden_dim],
            b_o: vec![0.0; hidden_dim],
            b_c: vec![0.0; hidden_dim],
        }
    }

    pub fn init_uniform(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| {
            Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
        };
        LstmParams {
            w_f: mat(hidden_dim, input_dim),
            w_i: mat(hidden_dim, input_dim),
            w_o: mat(hidden_dim, input_dim),
            w_c: mat(hidden_dim, input_dim),
            u_f: mat(hidden_dim, hidden_dim),
            u_i: mat(hidden_dim, hidden_dim),
            u_o: mat(hidden_dim, hidden_dim),
            u_c: mat(hidden_dim, hidden_dim),
            b_f: vec![0.0; hidden_dim],
            b_i: vec![0.0; hidden_dim],
            b_o: vec![0.0; hidden_dim],
            b_c: vec![0.0; hidden_dim],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_f.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_f.cols
    }
}

/// Embedded GARCH gate: raw (unconstrained) recursion parameters, the linear
/// projection lifting the scalar variance to hidden dimensions, and the
/// coupling scalar (γ for the GRU hybrid, w for the LSTM hybrid).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GarchGateParams {
    pub u_omega: f64,
    pub u_s: f64,
    pub u_a: f64,
    pub w_g: Vec<f64>,
    pub b_g: Vec<f64>,
    pub coupling: f64,
    pub lambda_max: f64,
}

impl GarchGateParams {
    pub fn zeros(hidden_dim: usize, lambda_max: f64) -> Self {
        GarchGateParams {
            u_omega: 0.0,
            u_s: 0.0,
            u_a: 0.0,
            w_g: vec![0.0; hidden_dim],
            b_g: vec![0.0; hidden_dim],
            coupling: 0.0,
            lambda_max,
        }
    }

    /// Initialization: projection uniform like the cell weights, coupling 0.1
    /// so the GARCH path starts active but small, u_s chosen so α+β ≈ 0.9.
    pub fn init(hidden_dim: usize, lambda_max: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        GarchGateParams {
            u_omega: crate::math::softplus_inv(0.05),
            u_s: crate::math::logit((0.9f64 / lambda_max).min(0.999)),
            u_a: crate::math::logit(0.1),
            w_g: (0..hidden_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            b_g: vec![0.0; hidden_dim],
            coupling: 0.1,
            lambda_max,
        }
    }

    pub fn constrained(&self) -> (f64, f64, f64) {
        constrain_garch(self.u_omega, self.u_s, self.u_a, self.lambda_max)
    }
}

/// Recurrent state carried across time steps. `c` is used by LSTM variants
/// only; the (eps2, sigma2) pair drives the embedded variance recursion.
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub eps2_prev: f64,
    pub sigma2_prev: f64,
}

impl CellState {
    pub fn initial(hidden_dim: usize, sigma2_init: f64) -> Self {
        CellState {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
            eps2_prev: sigma2_init,
            sigma2_prev: sigma2_init.max(1e-12),
        }
    }
}

/// Map unconstrained gate parameters to the valid region:
/// ω = softplus(u_ω); s = λ_max·sigmoid(u_s); α = s·sigmoid(u_a);
/// β = s·(1 − sigmoid(u_a)). Hence α+β = s < λ_max for all finite inputs.
pub fn constrain_garch(u_omega: f64, u_s: f64, u_a: f64, lambda_max: f64) -> (f64, f64, f64) {
    let omega = softplus(u_omega);
    // clamp a hair under the cap so α+β stays strictly below λ_max (with
    // margin to spare for the α+β recomposition rounding) even when the
    // sigmoid saturates to 1.0 in floating point
    let s = (lambda_max * sigmoid(u_s)).min(lambda_max - 2e-12);
    let a = sigmoid(u_a);
    (omega, s * a, s * (1.0 - a))
}

// -- single-step forwards (with caches for BPTT) --

#[derive(Debug, Clone)]
pub struct GruStep {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_cand: Vec<f64>,
    pub h: Vec<f64>,
}

/// Plain GRU step: h_t = (1−z)⊙h_prev + z⊙h̃.
pub fn gru_forward_cached(p: &GruParams, x: &[f64], h_prev: &[f64]) -> Result<GruStep> {
    check_dims(p.input_dim(), x.len(), p.hidden_dim(), h_prev.len())?;
    let z = gate_sigmoid(&p.w_z, &p.u_z, &p.b_z, x, h_prev);
    let r = gate_sigmoid(&p.w_r, &p.u_r, &p.b_r, x, h_prev);
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(ri, hi)| ri * hi).collect();
    let h_cand = gate_tanh(&p.w_h, &p.u_h, &p.b_h, x, &rh);
    let h: Vec<f64> = (0..p.hidden_dim())
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * h_cand[i])
        .collect();
    Ok(GruStep { z, r, h_cand, h })
}

pub fn gru_forward(p: &GruParams, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    Ok(gru_forward_cached(p, x, h_prev)?.h)
}

#[derive(Debug, Clone)]
pub struct LstmStep {
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub o: Vec<f64>,
    pub c_cand: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Plain LSTM step: c_t = f⊙c_prev + i⊙c̃; h_t = o⊙tanh(c_t).
pub fn lstm_forward_cached(
    p: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<LstmStep> {
    check_dims(p.input_dim(), x.len(), p.hidden_dim(), h_prev.len())?;
    if c_prev.len() != p.hidden_dim() {
        return Err(CoreError::shape("cell state dimension mismatch"));
    }
    let f = gate_sigmoid(&p.w_f, &p.u_f, &p.b_f, x, h_prev);
    let i = gate_sigmoid(&p.w_i, &p.u_i, &p.b_i, x, h_prev);
    let o = gate_sigmoid(&p.w_o, &p.u_o, &p.b_o, x, h_prev);
    let c_cand = gate_tanh(&p.w_c, &p.u_c, &p.b_c, x, h_prev);
    let c: Vec<f64> = (0..p.hidden_dim())
        .map(|k| f[k] * c_prev[k] + i[k] * c_cand[k])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = o.iter().zip(&tanh_c).map(|(ok, tk)| ok * tk).collect();
    Ok(LstmStep {
        f,
        i,
        o,
        c_cand,
        c,
        tanh_c,
        h,
    })
}

pub fn lstm_forward(
    p: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let step = lstm_forward_cached(p, x, h_prev, c_prev)?;
    Ok((step.h, step.c))
}

/// One step of the embedded variance recursion plus the linear projection:
/// σ²_t = ω + α·ε²_{t−1} + β·σ²_{t−1}; g_t = W_g·σ²_t + b_g.
pub fn garch_gate(
    gate: &GarchGateParams,
    eps2_prev: f64,
    sigma2_prev: f64,
) -> Result<(Vec<f64>, f64)> {
    if !eps2_prev.is_finite() || !sigma2_prev.is_finite() {
        return Err(CoreError::numerical("non-finite gate inputs"));
    }
    let (omega, alpha, beta) = gate.constrained();
    let sigma2 = omega + alpha * eps2_prev + beta * sigma2_prev;
    let g: Vec<f64> = gate
        .w_g
        .iter()
        .zip(&gate.b_g)
        .map(|(w, b)| w * sigma2 + b)
        .collect();
    Ok((g, sigma2))
}

#[derive(Debug, Clone)]
pub struct GarchGruStep {
    pub gru: GruStep,
    /// ĥ under the swapped gate convention used by the hybrid cell
    pub h_hat: Vec<f64>,
    pub g: Vec<f64>,
    pub sigma2: f64,
    pub h: Vec<f64>,
}

/// Hybrid GRU step. Gates follow the standard equations, but the pre-output
/// combination is ĥ = (1−z)⊙h̃ + z⊙h_prev and the GARCH signal enters
/// additively: h_t = tanh(ĥ + γ·g_t).
pub fn garch_gru_cell_cached(
    p: &GruParams,
    gate: &GarchGateParams,
    x: &[f64],
    state: &CellState,
) -> Result<GarchGruStep> {
    if state.sigma2_prev <= 0.0 {
        return Err(CoreError::param("sigma2_prev must be > 0"));
    }
    let (g, sigma2) = garch_gate(gate, state.eps2_prev, state.sigma2_prev)?;
    let n = p.hidden_dim();
    let z = gate_sigmoid(&p.w_z, &p.u_z, &p.b_z, x, &state.h);
    let r = gate_sigmoid(&p.w_r, &p.u_r, &p.b_r, x, &state.h);
    let rh: Vec<f64> = r.iter().zip(&state.h).map(|(ri, hi)| ri * hi).collect();
    let h_cand = gate_tanh(&p.w_h, &p.u_h, &p.b_h, x, &rh);
    let h_hat: Vec<f64> = (0..n)
        .map(|i| (1.0 - z[i]) * h_cand[i] + z[i] * state.h[i])
        .collect();
    let h: Vec<f64> = (0..n)
        .map(|i| (h_hat[i] + gate.coupling * g[i]).tanh())
        .collect();
    Ok(GarchGruStep {
        gru: GruStep {
            z,
            r,
            h_cand,
            h: h.clone(),
        },
        h_hat,
        g,
        sigma2,
        h,
    })
}

/// Hybrid GRU step returning the new recurrent state. `next_eps2` is the
/// squared data innovation observed at this step, which drives the recursion
/// at the next step.
pub fn garch_gru_cell(
    p: &GruParams,
    gate: &GarchGateParams,
    x: &[f64],
    state: &CellState,
    next_eps2: f64,
) -> Result<(Vec<f64>, CellState)> {
    let step = garch_gru_cell_cached(p, gate, x, state)?;
    let new_state = CellState {
        h: step.h.clone(),
        c: Vec::new(),
        eps2_prev: next_eps2,
        sigma2_prev: step.sigma2,
    };
    Ok((step.h, new_state))
}

#[derive(Debug, Clone)]
pub struct GarchLstmStep {
    pub lstm: LstmStep,
    pub g: Vec<f64>,
    pub tanh_g: Vec<f64>,
    pub sigma2: f64,
    pub h: Vec<f64>,
}

/// Hybrid LSTM step: standard gates and cell update produce h̃ = o⊙tanh(c);
/// the GARCH signal rescales it multiplicatively: h_t = (1 + w·tanh(g_t))⊙h̃.
pub fn garch_lstm_cell_cached(
    p: &LstmParams,
    gate: &GarchGateParams,
    x: &[f64],
    state: &CellState,
) -> Result<GarchLstmStep> {
    if state.sigma2_prev <= 0.0 {
        return Err(CoreError::param("sigma2_prev must be > 0"));
    }
    let (g, sigma2) = garch_gate(gate, state.eps2_prev, state.sigma2_prev)?;
    let lstm = lstm_forward_cached(p, x, &state.h, &state.c)?;
    let tanh_g: Vec<f64> = g.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = lstm
        .h
        .iter()
        .zip(&tanh_g)
        .map(|(ht, tg)| (1.0 + gate.coupling * tg) * ht)
        .collect();
    Ok(GarchLstmStep {
        lstm,
        g,
        tanh_g,
        sigma2,
        h,
    })
}

pub fn garch_lstm_cell(
    p: &LstmParams,
    gate: &GarchGateParams,
    x: &[f64],
    state: &CellState,
    next_eps2: f64,
) -> Result<(Vec<f64>, CellState)> {
    let step = garch_lstm_cell_cached(p, gate, x, state)?;
    let new_state = CellState {
        h: step.h.clone(),
        c: step.lstm.c.clone(),
        eps2_prev: next_eps2,
        sigma2_prev: step.sigma2,
    };
    Ok((step.h, new_state))
}

/// Output head: σ̂ = sqrt(softplus(W_out·h + b_out)), strictly positive.
pub fn volatility_head(h: &[f64], w_out: &[f64], b_out: f64) -> Result<f64> {
    if h.len() != w_out.len() {
        return Err(CoreError::shape("head dimension mismatch"));
    }
    let pre = dot(w_out, h) + b_out;
    Ok(softplus(pre).max(1e-300).sqrt())
}

fn gate_sigmoid(w: &Mat, u: &Mat, b: &[f64], x: &[f64], h: &[f64]) -> Vec<f64> {
    let wx = w.matvec(x);
    let uh = u.matvec(h);
    (0..b.len()).map(|i| sigmoid(wx[i] + uh[i] + b[i])).collect()
}

fn gate_tanh(w: &Mat, u: &Mat, b: &[f64], x: &[f64], h: &[f64]) -> Vec<f64> {
    let wx = w.matvec(x);
    let uh = u.matvec(h);
    (0..b.len()).map(|i| (wx[i] + uh[i] + b[i]).tanh()).collect()
}

fn check_dims(input_dim: usize, x_len: usize, hidden_dim: usize, h_len: usize) -> Result<()> {
    if x_len != input_dim {
        return Err(CoreError::shape(format!(
            "input dim {x_len} != expected {input_dim}"
        )));
    }
    if h_len != hidden_dim {
        return Err(CoreError::shape(format!(
            "hidden dim {h_len} != expected {hidden_dim}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn constrain_map_at_zero() {
        let (omega, alpha, beta) = constrain_garch(0.0, 0.0, 0.0, 0.97);
        assert_abs_diff_eq!(omega, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(alpha, 0.97 * 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(beta, 0.97 * 0.25, epsilon = 1e-12);
    }

    #[test]
    fn constrain_saturates_below_lambda_max() {
        let (_, alpha, beta) = constrain_garch(0.0, 50.0, 0.0, 0.97);
        assert!(alpha + beta < 0.97);
        assert!(alpha + beta > 0.97 - 1e-9);
    }

    #[test]
    fn gru_zero_weights_hand_example() {
        let p = GruParams::zeros(1, 1);
        let step = gru_forward_cached(&p, &[0.3], &[1.0]).unwrap();
        assert_abs_diff_eq!(step.z[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(step.r[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(step.h_cand[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(step.h[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gru_zero_fixed_point() {
        let p = GruParams::zeros(2, 3);
        let h = gru_forward(&p, &[0.0, 0.0], &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
    }

    #[test]
    fn gru_shape_mismatch_rejected() {
        let p = GruParams::zeros(2, 3);
        assert!(gru_forward(&p, &[0.0], &[0.0; 3]).is_err());
        assert!(gru_forward(&p, &[0.0, 0.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn lstm_zero_weights_hand_example() {
        let p = LstmParams::zeros(1, 1);
        let (h, c) = lstm_forward(&p, &[0.0], &[0.0], &[2.0]).unwrap();
        // f=i=o=0.5, c̃=0 → c=1, h=0.5·tanh(1)
        assert_abs_diff_eq!(c[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[0], 0.5 * 1.0f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(h[0], 0.3808, epsilon = 1e-4);
    }

    #[test]
    fn lstm_zero_fixed_point() {
        let p = LstmParams::zeros(1, 2);
        let (h, c) = lstm_forward(&p, &[0.0], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h, vec![0.0; 2]);
        assert_eq!(c, vec![0.0; 2]);
    }

    fn gate_fixed_point() -> GarchGateParams {
        // ω=0.1, α=0.1, β=0.8 via direct inversion of the constraint map
        let s: f64 = 0.9;
        let a: f64 = 0.1 / 0.9;
        GarchGateParams {
            u_omega: crate::math::softplus_inv(0.1),
            u_s: crate::math::logit(s / 0.97),
            u_a: crate::math::logit(a),
            w_g: vec![1.0],
            b_g: vec![0.0],
            coupling: 1.0,
            lambda_max: 0.97,
        }
    }

    #[test]
    fn gate_fixed_point_identity_projection() {
        let gate = gate_fixed_point();
        let (omega, alpha, beta) = gate.constrained();
        assert_abs_diff_eq!(omega, 0.1, epsilon = 1e-10);
        assert_abs_diff_eq!(alpha, 0.1, epsilon = 1e-10);
        assert_abs_diff_eq!(beta, 0.8, epsilon = 1e-10);
        let (g, sigma2) = garch_gate(&gate, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(sigma2, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn gate_degenerate_floor() {
        let gate = gate_fixed_point();
        let (g, sigma2) = garch_gate(&gate, 0.0, 1e-300).unwrap();
        assert_abs_diff_eq!(sigma2, 0.1, epsilon = 1e-10);
        assert_abs_diff_eq!(g[0], 0.1, epsilon = 1e-10);
    }

    #[test]
    fn gate_zero_projection() {
        let mut gate = gate_fixed_point();
        gate.w_g = vec![0.0];
        gate.b_g = vec![0.0];
        let (g, _) = garch_gate(&gate, 5.0, 3.0).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn garch_gru_zero_coupling_reduces_to_tanh_hhat() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p = GruParams::init_uniform(2, 4, &mut rng);
        let mut gate = GarchGateParams::init(4, 0.97, &mut rng);
        gate.coupling = 0.0;
        let state = CellState {
            h: vec![0.2, -0.3, 0.1, 0.4],
            c: Vec::new(),
            eps2_prev: 1.0,
            sigma2_prev: 1.0,
        };
        let x = [0.5, -1.0];
        let step = garch_gru_cell_cached(&p, &gate, &x, &state).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(step.h[i], step.h_hat[i].tanh(), epsilon = 1e-15);
        }
    }

    #[test]
    fn garch_gru_hand_composition() {
        // zero weights, h_prev=[1], g=[1], γ=1 → ĥ=[0.5], h=[tanh(1.5)]
        let p = GruParams::zeros(1, 1);
        let mut gate = gate_fixed_point();
        gate.coupling = 1.0;
        let state = CellState {
            h: vec![1.0],
            c: Vec::new(),
            eps2_prev: 1.0,
            sigma2_prev: 1.0,
        };
        let step = garch_gru_cell_cached(&p, &gate, &[0.0], &state).unwrap();
        assert_abs_diff_eq!(step.h_hat[0], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(step.h[0], 1.5f64.tanh(), epsilon = 1e-9);
        assert_abs_diff_eq!(step.h[0], 0.9051, epsilon = 1e-4);
    }

    #[test]
    fn garch_gru_inverse_tanh_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let p = GruParams::init_uniform(3, 5, &mut rng);
        let gate = GarchGateParams::init(5, 0.97, &mut rng);
        let state = CellState {
            h: vec![0.1, -0.2, 0.3, 0.0, -0.4],
            c: Vec::new(),
            eps2_prev: 0.8,
            sigma2_prev: 1.2,
        };
        let x = [0.3, -0.7, 1.1];
        let step = garch_gru_cell_cached(&p, &gate, &x, &state).unwrap();
        let gamma = gate.coupling;
        for i in 0..5 {
            if step.h[i].abs() < 1.0 - 1e-6 {
                let lhs = step.h[i].atanh() / gamma - step.h_hat[i] / gamma;
                assert_abs_diff_eq!(lhs, step.g[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn garch_lstm_zero_coupling_matches_plain_lstm_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = LstmParams::init_uniform(2, 4, &mut rng);
        let mut gate = GarchGateParams::init(4, 0.97, &mut rng);
        gate.coupling = 0.0;
        let state = CellState {
            h: vec![0.2, -0.3, 0.1, 0.4],
            c: vec![0.5, -0.1, 0.0, 0.2],
            eps2_prev: 1.0,
            sigma2_prev: 1.0,
        };
        let x = [0.5, -1.0];
        let step = garch_lstm_cell_cached(&p, &gate, &x, &state).unwrap();
        let (h_plain, c_plain) = lstm_forward(&p, &x, &state.h, &state.c).unwrap();
        assert_eq!(step.h, h_plain);
        assert_eq!(step.lstm.c, c_plain);
    }

    #[test]
    fn garch_lstm_zero_gate_signal_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let p = LstmParams::init_uniform(2, 3, &mut rng);
        let mut gate = GarchGateParams::init(3, 0.97, &mut rng);
        gate.w_g = vec![0.0; 3];
        gate.b_g = vec![0.0; 3];
        gate.coupling = 0.7;
        let state = CellState {
            h: vec![0.1, 0.2, -0.1],
            c: vec![0.0, 0.3, -0.2],
            eps2_prev: 2.0,
            sigma2_prev: 1.5,
        };
        let x = [1.0, -0.5];
        let step = garch_lstm_cell_cached(&p, &gate, &x, &state).unwrap();
        assert_eq!(step.h, step.lstm.h);
    }

    #[test]
    fn garch_lstm_hand_scaling() {
        // w=1, g=[1], h̃=[0.3808] → h=[(1+tanh 1)·0.3808]
        let h_tilde = 0.5 * 1.0f64.tanh();
        let p = LstmParams::zeros(1, 1);
        let mut gate = gate_fixed_point(); // gives g=[1] at eps2=sigma2=1
        gate.coupling = 1.0;
        let state = CellState {
            h: vec![0.0],
            c: vec![2.0],
            eps2_prev: 1.0,
            sigma2_prev: 1.0,
        };
        let step = garch_lstm_cell_cached(&p, &gate, &[0.0], &state).unwrap();
        assert_abs_diff_eq!(step.h[0], (1.0 + 1.0f64.tanh()) * h_tilde, epsilon = 1e-9);
        assert_abs_diff_eq!(step.h[0], 0.6708, epsilon = 1e-4);
    }

    #[test]
    fn head_softplus_examples() {
        // pre-activation 0 → sqrt(ln 2)
        let s = volatility_head(&[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert_abs_diff_eq!(s, std::f64::consts::LN_2.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.8326, epsilon = 1e-4);
        // very negative pre-activation stays strictly positive
        let s = volatility_head(&[0.0], &[0.0], -500.0).unwrap();
        assert!(s > 0.0 && s < 1e-100);
        // large pre-activation approaches sqrt(a)
        let s = volatility_head(&[0.0], &[0.0], 400.0).unwrap();
        assert_abs_diff_eq!(s, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn hidden_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let gru = GruParams::init_uniform(2, 4, &mut rng);
        let lstm = LstmParams::init_uniform(2, 4, &mut rng);
        let gate = GarchGateParams::init(4, 0.97, &mut rng);
        let mut state_g = CellState::initial(4, 1.0);
        let mut state_l = CellState::initial(4, 1.0);
        for t in 0..50 {
            let x = [(t as f64 * 0.37).sin() * 3.0, (t as f64 * 0.11).cos() * 2.0];
            let eps2 = (t as f64 * 0.53).sin().powi(2) * 4.0;
            let (h, s) = garch_gru_cell(&gru, &gate, &x, &state_g, eps2).unwrap();
            assert!(h.iter().all(|v| v.abs() < 1.0));
            assert!(s.sigma2_prev > 0.0);
            state_g = s;
            let (h, s) = garch_lstm_cell(&lstm, &gate, &x, &state_l, eps2).unwrap();
            let bound = 1.0 + gate.coupling.abs();
            assert!(h.iter().all(|v| v.abs() < bound));
            assert!(s.sigma2_prev > 0.0);
            state_l = s;
        }
    }

    proptest! {
        #[test]
        fn prop_constrain_always_valid(
            u_omega in -50.0f64..50.0,
            u_s in -50.0f64..50.0,
            u_a in -50.0f64..50.0,
            lambda_max in 0.01f64..1.0,
        ) {
            let (omega, alpha, beta) = constrain_garch(u_omega, u_s, u_a, lambda_max);
            prop_assert!(omega > 0.0);
            prop_assert!(alpha >= 0.0 && beta >= 0.0);
            prop_assert!(alpha + beta <= lambda_max);
        }
    }
}
