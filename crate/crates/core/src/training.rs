//! Hand-derived backpropagation through time for all four cells, a central
//! finite-difference gradient oracle, Adam, plateau learning-rate scheduling,
//! early stopping, and the full training loop.

use crate::cells::{GarchGateParams, GruParams, LstmParams};
use crate::data::{WindowSample, WindowedDataset};
use crate::error::{CoreError, Result};
use crate::math::sigmoid;
use crate::model::{Forward, LayerCache, LayerWeights, Model, ParamSet, StepCache};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// early-stop patience in epochs
    pub patience: usize,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub dropout: f64,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub lambda_max: f64,
    /// optional gradient max-norm clip; disabled by default
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            lr_factor: 0.5,
            lr_patience: 5,
            dropout: 0.1,
            hidden_dim: 16,
            num_layers: 1,
            lambda_max: 0.97,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config("dropout must lie in [0,1)".into()));
        }
        if self.patience == 0 {
            return Err(CoreError::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
        {
            return Err(CoreError::Config("sizes must be positive".into()));
        }
        if !(0.0 < self.lr_factor && self.lr_factor < 1.0) {
            return Err(CoreError::Config("lr_factor must lie in (0,1)".into()));
        }
        if !(0.0 < self.lambda_max && self.lambda_max < 1.0) {
            return Err(CoreError::Config("lambda_max must lie in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateSnapshot {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub persistence: f64,
    pub coupling: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub diverged: bool,
    pub epoch_seconds: Vec<f64>,
    pub final_gate: Option<GateSnapshot>,
}

/// Mean squared error between aligned prediction/target slices.
pub fn loss_mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(CoreError::data("loss_mse requires equal non-empty inputs"));
    }
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Analytic gradient of the batch MSE with respect to every trainable
/// parameter, including the embedded recursion parameters through the full
/// variance chain. Returns the flat gradient (ordering matches
/// `Model::to_flat`) together with the batch loss.
pub fn bptt_gradients(model: &Model, batch: &[WindowSample]) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(CoreError::data("empty batch"));
    }
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    let inv_n = 1.0 / batch.len() as f64;
    for sample in batch {
        let fwd = model.forward(sample, None)?;
        let err = fwd.sigma_hat - sample.target;
        loss += err * err * inv_n;
        backward_sample(model, sample, &fwd, 2.0 * err * inv_n, None, &mut grads)?;
    }
    let mut flat = Vec::new();
    grads.flatten_into(&mut flat);
    if let Some(idx) = flat.iter().position(|v| !v.is_finite()) {
        return Err(CoreError::numerical(format!(
            "non-finite gradient at flat parameter index {idx}"
        )));
    }
    Ok((flat, loss))
}

/// Central finite differences over every scalar parameter; test oracle only.
pub fn finite_diff_oracle(model: &Model, batch: &[WindowSample], step: f64) -> Result<Vec<f64>> {
    if step <= 0.0 {
        return Err(CoreError::param("finite-difference step must be > 0"));
    }
    let theta = model.to_flat();
    let mut scratch = model.clone();
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        scratch.set_from_flat(&probe);
        let fp = batch_loss(&scratch, batch)?;
        probe[i] = theta[i] - step;
        scratch.set_from_flat(&probe);
        let fm = batch_loss(&scratch, batch)?;
        probe[i] = theta[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

fn batch_loss(model: &Model, batch: &[WindowSample]) -> Result<f64> {
    let mut loss = 0.0;
    for s in batch {
        let p = model.predict(s)?;
        loss += (p - s.target) * (p - s.target);
    }
    Ok(loss / batch.len() as f64)
}

/// One bias-corrected Adam update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(CoreError::shape("adam buffer length mismatch"));
    }
    if t == 0 {
        return Err(CoreError::param("adam step count starts at 1"));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
    }
    Ok(())
}

/// Pure plateau rule: reduce by `factor` when the last `lr_patience`
/// validation losses all fail to improve on the prior best by a relative
/// 1e-4; floored at 1e-6.
pub fn plateau_scheduler(history: &[f64], lr: f64, factor: f64, lr_patience: usize) -> f64 {
    if history.len() < lr_patience + 1 || lr_patience == 0 {
        return lr;
    }
    let cut = history.len() - lr_patience;
    let best_before = history[..cut].iter().cloned().fold(f64::INFINITY, f64::min);
    let improved = history[cut..]
        .iter()
        .any(|&v| v < best_before * (1.0 - 1e-4));
    if improved {
        lr
    } else {
        (lr * factor).max(1e-6)
    }
}

/// Early stopping: stop when `current epoch - best epoch >= patience`.
/// Best epoch is the argmin with earliest tie-break.
pub fn early_stopper(history: &[f64], patience: usize) -> (bool, usize) {
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < history[best] {
            best = i;
        }
    }
    let current = history.len().saturating_sub(1);
    (current - best >= patience, best)
}

/// Full training loop: mini-batch Adam with per-epoch shuffling, inverted
/// dropout between layers, plateau LR scheduling, early stopping, and
/// restore-best. Deterministic given the seed.
pub fn train(
    mut model: Model,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CoreError::data(
            "train and validation sets must be non-empty",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1007);

    let n_params = model.n_params();
    let mut theta = model.to_flat();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut adam_t = 0usize;
    let mut lr = config.learning_rate;

    let mut train_mse = Vec::new();
    let mut val_mse = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best_flat = theta.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stopped_early = false;
    let mut diverged = false;
    let mut lr_stall = 0usize;
    let mut lr_best = f64::INFINITY;

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let hidden = config.hidden_dim;
    let use_dropout = config.dropout > 0.0 && config.num_layers > 1;

    'epochs: for epoch in 0..config.max_epochs {
        let t0 = Instant::now();
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;

        for chunk in indices.chunks(config.batch_size) {
            model.set_from_flat(&theta);
            let mut grads = model.zeros_like();
            let mut batch_loss_acc = 0.0;
            let inv_n = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let sample = &train_set.samples[idx];
                let masks = if use_dropout {
                    Some(draw_masks(
                        config.num_layers - 1,
                        sample.raw_returns.len(),
                        hidden,
                        config.dropout,
                        &mut rng,
                    ))
                } else {
                    None
                };
                let fwd = model.forward(sample, masks.as_deref())?;
                let err = fwd.sigma_hat - sample.target;
                batch_loss_acc += err * err * inv_n;
                backward_sample(
                    &model,
                    sample,
                    &fwd,
                    2.0 * err * inv_n,
                    masks.as_deref(),
                    &mut grads,
                )?;
            }
            if !batch_loss_acc.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let mut flat_grads = Vec::with_capacity(n_params);
            grads.flatten_into(&mut flat_grads);
            if flat_grads.iter().any(|g| !g.is_finite()) {
                diverged = true;
                break 'epochs;
            }
            if let Some(clip) = config.grad_clip {
                let norm = flat_grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let scale = clip / norm;
                    for g in flat_grads.iter_mut() {
                        *g *= scale;
                    }
                }
            }
            adam_t += 1;
            adam_step(
                &mut theta,
                &flat_grads,
                &mut m1,
                &mut m2,
                adam_t,
                lr,
                0.9,
                0.999,
                1e-8,
            )?;
            epoch_loss += batch_loss_acc;
            epoch_batches += 1;
        }

        model.set_from_flat(&theta);
        let val = batch_loss(&model, &val_set.samples)?;
        if !val.is_finite() {
            diverged = true;
            break 'epochs;
        }
        train_mse.push(epoch_loss / epoch_batches.max(1) as f64);
        val_mse.push(val);
        epoch_seconds.push(t0.elapsed().as_secs_f64());

        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_flat = theta.clone();
        }

        // plateau tracking resets after each reduction
        if val < lr_best * (1.0 - 1e-4) {
            lr_best = val;
            lr_stall = 0;
        } else {
            lr_stall += 1;
            if lr_stall >= config.lr_patience {
                lr = (lr * config.lr_factor).max(1e-6);
                lr_stall = 0;
            }
        }

        let (stop, _) = early_stopper(&val_mse, config.patience);
        if stop {
            stopped_early = true;
            break;
        }
    }

    model.set_from_flat(&best_flat);
    let final_gate = model.params.gate.as_ref().map(|g| {
        let (omega, alpha, beta) = g.constrained();
        GateSnapshot {
            omega,
            alpha,
            beta,
            persistence: alpha + beta,
            coupling: g.coupling,
        }
    });
    Ok((
        model,
        TrainReport {
            train_mse,
            val_mse,
            best_epoch,
            stopped_early,
            diverged,
            epoch_seconds,
            final_gate,
        },
    ))
}

/// Inverted-scaling dropout masks, one per inter-layer boundary, flat w x hidden.
fn draw_masks(
    n_boundaries: usize,
    w: usize,
    hidden: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let keep = 1.0 - rate;
    (0..n_boundaries)
        .map(|_| {
            (0..w * hidden)
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode pass for one sample. `d_sigma_hat` is dL/d(sigma_hat) for
/// this sample (already scaled by the batch averaging). Gradients accumulate
/// into `grads`, which mirrors the model's parameter layout.
pub fn backward_sample(
    model: &Model,
    sample: &WindowSample,
    fwd: &Forward,
    d_sigma_hat: f64,
    dropout_masks: Option<&[Vec<f64>]>,
    grads: &mut ParamSet,
) -> Result<()> {
    let w = sample.raw_returns.len();
    let hidden = model.hidden_dim;
    let n_layers = model.num_layers;

    // head backward: sigma_hat = sqrt(softplus(pre))
    let d_pre = d_sigma_hat * sigmoid(fwd.head_pre) / (2.0 * fwd.sigma_hat);
    let final_h = fwd.layers[n_layers - 1].steps[w - 1].hidden();
    for i in 0..hidden {
        grads.head.w_out[i] += d_pre * final_h[i];
    }
    grads.head.b_out += d_pre;

    // gradient on each layer's post-dropout outputs, per step
    let mut d_out: Vec<Vec<f64>> = vec![vec![0.0; hidden]; w];
    for i in 0..hidden {
        d_out[w - 1][i] = d_pre * model.params.head.w_out[i];
    }

    for l in (0..n_layers).rev() {
        let cache = &fwd.layers[l];
        // undo dropout applied to this layer's outputs (non-final layers only)
        if l + 1 < n_layers {
            if let Some(masks) = dropout_masks {
                let mask = &masks[l];
                for (t, row) in d_out.iter_mut().enumerate() {
                    for (i, v) in row.iter_mut().enumerate() {
                        *v *= mask[t * hidden + i];
                    }
                }
            }
        }
        let gate = if l == 0 { model.params.gate.as_ref() } else { None };
        let gate_grads = if l == 0 { grads.gate.as_mut() } else { None };
        d_out = match (&model.params.layers[l], &mut grads.layers[l]) {
            (LayerWeights::Gru(p), LayerWeights::Gru(g)) => backward_gru_layer(
                p,
                g,
                gate,
                gate_grads,
                cache,
                &d_out,
                &fwd.eps2_in,
                model.sigma2_init,
            )?,
            (LayerWeights::Lstm(p), LayerWeights::Lstm(g)) => backward_lstm_layer(
                p,
                g,
                gate,
                gate_grads,
                cache,
                &d_out,
                &fwd.eps2_in,
                model.sigma2_init,
            )?,
            _ => return Err(CoreError::shape("gradient layout mismatch")),
        };
    }
    Ok(())
}

/// Accumulator for the embedded variance recursion and its reparameterized
/// gradients; `carry` holds beta * d(sigma2 at t+1) flowing backward.
struct GateBackward {
    d_omega: f64,
    d_alpha: f64,
    d_beta: f64,
    carry: f64,
    beta: f64,
    d_w_g: Vec<f64>,
    d_b_g: Vec<f64>,
    d_coupling: f64,
}

impl GateBackward {
    fn new(gate: &GarchGateParams) -> Self {
        let (_, _, beta) = gate.constrained();
        GateBackward {
            d_omega: 0.0,
            d_alpha: 0.0,
            d_beta: 0.0,
            carry: 0.0,
            beta,
            d_w_g: vec![0.0; gate.w_g.len()],
            d_b_g: vec![0.0; gate.b_g.len()],
            d_coupling: 0.0,
        }
    }

    /// Absorb the direct d(sigma2_t) contribution and push the recursion one
    /// step back through sigma2_t = omega + alpha*eps2_prev + beta*sigma2_prev.
    fn step_variance(&mut self, d_sigma2_direct: f64, eps2_prev: f64, sigma2_prev: f64) {
        let d_sigma2 = d_sigma2_direct + self.carry;
        self.d_omega += d_sigma2;
        self.d_alpha += eps2_prev * d_sigma2;
        self.d_beta += sigma2_prev * d_sigma2;
        self.carry = self.beta * d_sigma2;
    }

    /// Chain the constrained-parameter gradients back to the raw u-variables
    /// and write everything into the gradient container.
    fn finish(self, gate: &GarchGateParams, out: &mut GarchGateParams) {
        out.u_omega += sigmoid(gate.u_omega) * self.d_omega;
        let sig_s = sigmoid(gate.u_s);
        let s_raw = gate.lambda_max * sig_s;
        let s = s_raw.min(gate.lambda_max - 2e-12);
        let a = sigmoid(gate.u_a);
        let d_s = a * self.d_alpha + (1.0 - a) * self.d_beta;
        let d_a = s * (self.d_alpha - self.d_beta);
        if s_raw < gate.lambda_max - 2e-12 {
            out.u_s += gate.lambda_max * sig_s * (1.0 - sig_s) * d_s;
        }
        out.u_a += a * (1.0 - a) * d_a;
        for (o, d) in out.w_g.iter_mut().zip(&self.d_w_g) {
            *o += d;
        }
        for (o, d) in out.b_g.iter_mut().zip(&self.d_b_g) {
            *o += d;
        }
        out.coupling += self.d_coupling;
    }
}

fn sigma2_prev_at(t: usize, sigma2_path: &[f64], sigma2_init: f64) -> f64 {
    if t == 0 {
        sigma2_init.max(1e-12)
    } else {
        sigma2_path[t - 1]
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_gru_layer(
    p: &GruParams,
    g: &mut GruParams,
    gate: Option<&GarchGateParams>,
    gate_grads: Option<&mut GarchGateParams>,
    cache: &LayerCache,
    d_out: &[Vec<f64>],
    eps2_in: &[f64],
    sigma2_init: f64,
) -> Result<Vec<Vec<f64>>> {
    let w = cache.steps.len();
    let hidden = p.hidden_dim();
    let zeros = vec![0.0; hidden];
    let mut d_inputs = vec![vec![0.0; p.input_dim()]; w];
    let mut dh_carry = vec![0.0; hidden];
    let mut gate_bw = gate.map(GateBackward::new);

    for t in (0..w).rev() {
        let x = &cache.inputs[t];
        let h_prev: &[f64] = if t > 0 {
            cache.steps[t - 1].hidden()
        } else {
            &zeros
        };
        let dh: Vec<f64> = (0..hidden).map(|i| d_out[t][i] + dh_carry[i]).collect();

        match &cache.steps[t] {
            StepCache::Gru(s) => {
                // plain cell: h = (1-z)*h_prev + z*h_cand
                let mut dz = vec![0.0; hidden];
                let mut d_hcand = vec![0.0; hidden];
                let mut dh_prev = vec![0.0; hidden];
                for i in 0..hidden {
                    dz[i] = dh[i] * (s.h_cand[i] - h_prev[i]);
                    d_hcand[i] = dh[i] * s.z[i];
                    dh_prev[i] = dh[i] * (1.0 - s.z[i]);
                }
                accumulate_gru_gates(
                    p,
                    g,
                    x,
                    h_prev,
                    &s.z,
                    &s.r,
                    &s.h_cand,
                    &dz,
                    &d_hcand,
                    &mut dh_prev,
                    &mut d_inputs[t],
                );
                dh_carry = dh_prev;
            }
            StepCache::GarchGru(s) => {
                // hybrid cell: h = tanh(h_hat + gamma*g_t),
                // h_hat = (1-z)*h_cand + z*h_prev
                let gp = gate.ok_or_else(|| CoreError::shape("hybrid step without gate"))?;
                let bw = gate_bw.as_mut().unwrap();
                let mut dp = vec![0.0; hidden];
                for i in 0..hidden {
                    dp[i] = dh[i] * (1.0 - s.h[i] * s.h[i]);
                }
                let mut d_sigma2_direct = 0.0;
                for i in 0..hidden {
                    bw.d_coupling += dp[i] * s.g[i];
                    let dg = gp.coupling * dp[i];
                    bw.d_w_g[i] += dg * s.sigma2;
                    bw.d_b_g[i] += dg;
                    d_sigma2_direct += gp.w_g[i] * dg;
                }
                bw.step_variance(
                    d_sigma2_direct,
                    eps2_in[t],
                    sigma2_prev_at(t, &cache.sigma2_path, sigma2_init),
                );

                let mut dz = vec![0.0; hidden];
                let mut d_hcand = vec![0.0; hidden];
                let mut dh_prev = vec![0.0; hidden];
                for i in 0..hidden {
                    dz[i] = dp[i] * (h_prev[i] - s.gru.h_cand[i]);
                    d_hcand[i] = dp[i] * (1.0 - s.gru.z[i]);
                    dh_prev[i] = dp[i] * s.gru.z[i];
                }
                accumulate_gru_gates(
                    p,
                    g,
                    x,
                    h_prev,
                    &s.gru.z,
                    &s.gru.r,
                    &s.gru.h_cand,
                    &dz,
                    &d_hcand,
                    &mut dh_prev,
                    &mut d_inputs[t],
                );
                dh_carry = dh_prev;
            }
            _ => return Err(CoreError::shape("unexpected step cache in GRU layer")),
        }
    }

    if let (Some(bw), Some(gg)) = (gate_bw, gate_grads) {
        bw.finish(gate.unwrap(), gg);
    }
    Ok(d_inputs)
}

/// Shared GRU gate backward: given dz and d(h_cand), accumulate weight
/// gradients, add the recurrent contributions into `dh_prev`, and the input
/// contributions into `dx`.
#[allow(clippy::too_many_arguments)]
fn accumulate_gru_gates(
    p: &GruParams,
    g: &mut GruParams,
    x: &[f64],
    h_prev: &[f64],
    z: &[f64],
    r: &[f64],
    h_cand: &[f64],
    dz: &[f64],
    d_hcand: &[f64],
    dh_prev: &mut [f64],
    dx: &mut [f64],
) {
    let hidden = p.hidden_dim();
    // candidate path: h_cand = tanh(W_h x + U_h (r*h_prev) + b_h)
    let da_h: Vec<f64> = (0..hidden)
        .map(|i| d_hcand[i] * (1.0 - h_cand[i] * h_cand[i]))
        .collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(ri, hi)| ri * hi).collect();
    g.w_h.add_outer(&da_h, x);
    g.u_h.add_outer(&da_h, &rh);
    for i in 0..hidden {
        g.b_h[i] += da_h[i];
    }
    let back_h = p.u_h.matvec_t(&da_h);
    let mut dr = vec![0.0; hidden];
    for i in 0..hidden {
        dr[i] = back_h[i] * h_prev[i];
        dh_prev[i] += back_h[i] * r[i];
    }
    let wx_h = p.w_h.matvec_t(&da_h);

    // update gate
    let da_z: Vec<f64> = (0..hidden).map(|i| dz[i] * z[i] * (1.0 - z[i])).collect();
    g.w_z.add_outer(&da_z, x);
    g.u_z.add_outer(&da_z, h_prev);
    for i in 0..hidden {
        g.b_z[i] += da_z[i];
    }
    let back_z = p.u_z.matvec_t(&da_z);
    let wx_z = p.w_z.matvec_t(&da_z);

    // reset gate
    let da_r: Vec<f64> = (0..hidden).map(|i| dr[i] * r[i] * (1.0 - r[i])).collect();
    g.w_r.add_outer(&da_r, x);
    g.u_r.add_outer(&da_r, h_prev);
    for i in 0..hidden {
        g.b_r[i] += da_r[i];
    }
    let back_r = p.u_r.matvec_t(&da_r);
    let wx_r = p.w_r.matvec_t(&da_r);

    for i in 0..hidden {
        dh_prev[i] += back_z[i] + back_r[i];
    }
    for j in 0..p.input_dim() {
        dx[j] += wx_h[j] + wx_z[j] + wx_r[j];
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_lstm_layer(
    p: &LstmParams,
    g: &mut LstmParams,
    gate: Option<&GarchGateParams>,
    gate_grads: Option<&mut GarchGateParams>,
    cache: &LayerCache,
    d_out: &[Vec<f64>],
    eps2_in: &[f64],
    sigma2_init: f64,
) -> Result<Vec<Vec<f64>>> {
    let w = cache.steps.len();
    let hidden = p.hidden_dim();
    let zeros = vec![0.0; hidden];
    let mut d_inputs = vec![vec![0.0; p.input_dim()]; w];
    let mut dh_carry = vec![0.0; hidden];
    let mut dc_carry = vec![0.0; hidden];
    let mut gate_bw = gate.map(GateBackward::new);

    for t in (0..w).rev() {
        let x = &cache.inputs[t];
        let h_prev: &[f64] = if t > 0 {
            cache.steps[t - 1].hidden()
        } else {
            &zeros
        };
        let c_prev: &[f64] = if t > 0 {
            match &cache.steps[t - 1] {
                StepCache::Lstm(s) => &s.c,
                StepCache::GarchLstm(s) => &s.lstm.c,
                _ => return Err(CoreError::shape("unexpected step cache in LSTM layer")),
            }
        } else {
            &zeros
        };
        let dh: Vec<f64> = (0..hidden).map(|i| d_out[t][i] + dh_carry[i]).collect();

        // unwind the multiplicative tail: h = (1 + w*tanh(g)) * h_tilde
        let (lstm, d_htilde) = match &cache.steps[t] {
            StepCache::Lstm(s) => (s, dh),
            StepCache::GarchLstm(s) => {
                let gp = gate.ok_or_else(|| CoreError::shape("hybrid step without gate"))?;
                let bw = gate_bw.as_mut().unwrap();
                let mut d_htilde = vec![0.0; hidden];
                let mut d_sigma2_direct = 0.0;
                for i in 0..hidden {
                    let h_tilde = s.lstm.h[i];
                    d_htilde[i] = dh[i] * (1.0 + gp.coupling * s.tanh_g[i]);
                    bw.d_coupling += dh[i] * s.tanh_g[i] * h_tilde;
                    let dg = dh[i] * gp.coupling * h_tilde * (1.0 - s.tanh_g[i] * s.tanh_g[i]);
                    bw.d_w_g[i] += dg * s.sigma2;
                    bw.d_b_g[i] += dg;
                    d_sigma2_direct += gp.w_g[i] * dg;
                }
                bw.step_variance(
                    d_sigma2_direct,
                    eps2_in[t],
                    sigma2_prev_at(t, &cache.sigma2_path, sigma2_init),
                );
                (&s.lstm, d_htilde)
            }
            _ => return Err(CoreError::shape("unexpected step cache in LSTM layer")),
        };

        // standard LSTM backward: h_tilde = o * tanh(c); c = f*c_prev + i*c_cand
        let mut d_o = vec![0.0; hidden];
        let mut dc = vec![0.0; hidden];
        for i in 0..hidden {
            d_o[i] = d_htilde[i] * lstm.tanh_c[i];
            dc[i] =
                dc_carry[i] + d_htilde[i] * lstm.o[i] * (1.0 - lstm.tanh_c[i] * lstm.tanh_c[i]);
        }
        let mut d_f = vec![0.0; hidden];
        let mut d_i = vec![0.0; hidden];
        let mut d_ccand = vec![0.0; hidden];
        let mut dc_prev = vec![0.0; hidden];
        for i in 0..hidden {
            d_f[i] = dc[i] * c_prev[i];
            d_i[i] = dc[i] * lstm.c_cand[i];
            d_ccand[i] = dc[i] * lstm.i[i];
            dc_prev[i] = dc[i] * lstm.f[i];
        }

        let da_f: Vec<f64> = (0..hidden)
            .map(|i| d_f[i] * lstm.f[i] * (1.0 - lstm.f[i]))
            .collect();
        let da_i: Vec<f64> = (0..hidden)
            .map(|i| d_i[i] * lstm.i[i] * (1.0 - lstm.i[i]))
            .collect();
        let da_o: Vec<f64> = (0..hidden)
            .map(|i| d_o[i] * lstm.o[i] * (1.0 - lstm.o[i]))
            .collect();
        let da_c: Vec<f64> = (0..hidden)
            .map(|i| d_ccand[i] * (1.0 - lstm.c_cand[i] * lstm.c_cand[i]))
            .collect();

        g.w_f.add_outer(&da_f, x);
        g.w_i.add_outer(&da_i, x);
        g.w_o.add_outer(&da_o, x);
        g.w_c.add_outer(&da_c, x);
        g.u_f.add_outer(&da_f, h_prev);
        g.u_i.add_outer(&da_i, h_prev);
        g.u_o.add_outer(&da_o, h_prev);
        g.u_c.add_outer(&da_c, h_prev);
        for i in 0..hidden {
            g.b_f[i] += da_f[i];
            g.b_i[i] += da_i[i];
            g.b_o[i] += da_o[i];
            g.b_c[i] += da_c[i];
        }

        let mut dh_prev = vec![0.0; hidden];
        for back in [
            p.u_f.matvec_t(&da_f),
            p.u_i.matvec_t(&da_i),
            p.u_o.matvec_t(&da_o),
            p.u_c.matvec_t(&da_c),
        ] {
            for i in 0..hidden {
                dh_prev[i] += back[i];
            }
        }
        for wx in [
            p.w_f.matvec_t(&da_f),
            p.w_i.matvec_t(&da_i),
            p.w_o.matvec_t(&da_o),
            p.w_c.matvec_t(&da_c),
        ] {
            for (j, v) in wx.iter().enumerate() {
                d_inputs[t][j] += v;
            }
        }

        dh_carry = dh_prev;
        dc_carry = dc_prev;
    }

    if let (Some(bw), Some(gg)) = (gate_bw, gate_grads) {
        bw.finish(gate.unwrap(), gg);
    }
    Ok(d_inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use rand::SeedableRng;

    fn sample(w: usize, d: usize, phase: f64) -> WindowSample {
        let features: Vec<f64> = (0..w * d)
            .map(|i| ((i as f64) * 0.37 + phase).sin())
            .collect();
        let raw_returns: Vec<f64> = (0..w)
            .map(|i| ((i as f64) * 0.53 + phase).cos() * 1.3)
            .collect();
        WindowSample {
            anchor: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            features,
            raw_returns,
            target: 0.8 + 0.3 * phase.sin().abs(),
        }
    }

    fn make(kind: ModelKind, layers: usize, seed: u64) -> Model {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Model::new(kind, 3, 4, layers, 0.97, 0.05, 1.2, seed, &mut rng)
    }

    fn dataset(n: usize, w: usize, d: usize) -> WindowedDataset {
        WindowedDataset {
            samples: (0..n).map(|i| sample(w, d, i as f64 * 0.7)).collect(),
            window: w,
            horizon: 1,
            input_dim: d,
        }
    }

    #[test]
    fn gradients_match_finite_differences_all_kinds() {
        for (kind, layers) in [
            (ModelKind::Gru, 1),
            (ModelKind::Gru, 2),
            (ModelKind::Lstm, 1),
            (ModelKind::Lstm, 2),
            (ModelKind::GarchGru, 1),
            (ModelKind::GarchGru, 2),
            (ModelKind::GarchLstm, 1),
            (ModelKind::GarchLstm, 2),
        ] {
            let model = make(kind, layers, 40 + layers as u64);
            let batch: Vec<WindowSample> = (0..3).map(|i| sample(6, 3, i as f64)).collect();
            let (analytic, _) = bptt_gradients(&model, &batch).unwrap();
            let numeric = finite_diff_oracle(&model, &batch, 1e-5).unwrap();
            assert_eq!(analytic.len(), numeric.len());
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let tol = 1e-4 * a.abs().max(n.abs()) + 1e-7;
                assert!(
                    (a - n).abs() <= tol,
                    "{kind:?} layers={layers} param {i}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn gradient_descent_reduces_loss() {
        let mut model = make(ModelKind::GarchGru, 2, 77);
        let batch: Vec<WindowSample> = (0..4).map(|i| sample(8, 3, i as f64 * 0.4)).collect();
        let (_, l0) = bptt_gradients(&model, &batch).unwrap();
        for _ in 0..50 {
            let (g, _) = bptt_gradients(&model, &batch).unwrap();
            let mut theta = model.to_flat();
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= 0.05 * gi;
            }
            model.set_from_flat(&theta);
        }
        let (_, l1) = bptt_gradients(&model, &batch).unwrap();
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }

    #[test]
    fn loss_mse_hand_example() {
        assert_abs_diff_eq!(
            loss_mse(&[2.0, 2.0], &[1.0, 3.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert!(loss_mse(&[], &[]).is_err());
        assert!(loss_mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8).unwrap();
        // bias correction makes the first update exactly lr (up to eps)
        assert_abs_diff_eq!(p[0], -0.1, epsilon = 1e-8);
    }

    #[test]
    fn plateau_rule_examples() {
        let flat = vec![1.0; 6];
        assert_abs_diff_eq!(plateau_scheduler(&flat, 1e-3, 0.5, 5), 5e-4, epsilon = 1e-18);
        let falling: Vec<f64> = (0..6).map(|i| 1.0 - 0.1 * i as f64).collect();
        assert_abs_diff_eq!(
            plateau_scheduler(&falling, 1e-3, 0.5, 5),
            1e-3,
            epsilon = 1e-18
        );
        let short = vec![1.0; 5];
        assert_abs_diff_eq!(
            plateau_scheduler(&short, 1e-3, 0.5, 5),
            1e-3,
            epsilon = 1e-18
        );
        // floor
        assert_abs_diff_eq!(
            plateau_scheduler(&flat, 1.5e-6, 0.5, 5),
            1e-6,
            epsilon = 1e-18
        );
    }

    #[test]
    fn early_stop_examples() {
        let mut h = vec![1.0, 0.9, 0.8];
        assert_eq!(early_stopper(&h, 3), (false, 2));
        h.extend(vec![0.85; 3]);
        assert_eq!(early_stopper(&h, 3), (true, 2));
        // earliest tie-break
        let ties = vec![0.5, 0.5, 0.5];
        assert_eq!(early_stopper(&ties, 2), (true, 0));
    }

    #[test]
    fn training_is_deterministic_and_converging() {
        let cfg = TrainConfig {
            max_epochs: 15,
            patience: 15,
            batch_size: 8,
            hidden_dim: 4,
            num_layers: 2,
            dropout: 0.1,
            learning_rate: 5e-3,
            ..TrainConfig::default()
        };
        let train_set = dataset(24, 6, 3);
        let val_set = dataset(8, 6, 3);
        let run = |seed: u64| {
            let model = make(ModelKind::GarchLstm, 2, seed);
            train(model, &train_set, &val_set, &cfg, seed).unwrap()
        };
        let (m1, r1) = run(3);
        let (m2, r2) = run(3);
        assert_eq!(m1.to_flat(), m2.to_flat());
        assert_eq!(r1.val_mse, r2.val_mse);
        assert!(!r1.diverged);
        assert_eq!(r1.val_mse.len(), r1.epoch_seconds.len());
        let first = r1.val_mse[0];
        let best = r1.val_mse[r1.best_epoch];
        assert!(best <= first);
        let gate = r1.final_gate.unwrap();
        assert!(gate.persistence < 0.97 && gate.omega > 0.0);
        // a different seed gives a different trajectory
        let (_, r3) = run(4);
        assert_ne!(r1.val_mse, r3.val_mse);
    }

    #[test]
    fn training_restores_best_epoch_weights() {
        let cfg = TrainConfig {
            max_epochs: 10,
            patience: 10,
            batch_size: 8,
            hidden_dim: 4,
            num_layers: 1,
            dropout: 0.0,
            learning_rate: 2e-2,
            ..TrainConfig::default()
        };
        let train_set = dataset(16, 5, 3);
        let val_set = dataset(6, 5, 3);
        let model = make(ModelKind::Gru, 1, 9);
        let (best_model, report) = train(model, &train_set, &val_set, &cfg, 9).unwrap();
        let val = batch_loss(&best_model, &val_set.samples).unwrap();
        assert_abs_diff_eq!(val, report.val_mse[report.best_epoch], epsilon = 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.dropout = 0.1;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 1e-3;
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
    }
}
