//! Stacked recurrent model: layer 1 optionally carries the embedded GARCH
//! gate (driven by data innovations), deeper layers are plain cells, and the
//! softplus-sqrt head maps the final hidden state to a volatility forecast.

use crate::cells::{
    self, CellState, GarchGateParams, GruParams, LstmParams,
};
use crate::data::WindowSample;
use crate::error::{CoreError, Result};
use crate::math::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gru,
    Lstm,
    GarchGru,
    GarchLstm,
}

impl ModelKind {
    pub fn is_hybrid(&self) -> bool {
        matches!(self, ModelKind::GarchGru | ModelKind::GarchLstm)
    }

    pub fn is_lstm_family(&self) -> bool {
        matches!(self, ModelKind::Lstm | ModelKind::GarchLstm)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerWeights {
    Gru(GruParams),
    Lstm(LstmParams),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

/// All trainable parameters. The same container doubles as gradient and
/// optimizer-moment storage via `zeros_like` and the flat-vector views.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerWeights>,
    pub gate: Option<GarchGateParams>,
    pub head: HeadWeights,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub lambda_max: f64,
    /// training-sample mean return: innovations are ε_t = r_t − mu_hat
    pub mu_hat: f64,
    /// initial value for the embedded variance recursion at each window start
    pub sigma2_init: f64,
    pub seed: u64,
    pub params: ParamSet,
}

impl Model {
    pub fn new(
        kind: ModelKind,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        lambda_max: f64,
        mu_hat: f64,
        sigma2_init: f64,
        seed: u64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(num_layers >= 1);
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_dim = if l == 0 { input_dim } else { hidden_dim };
            layers.push(if kind.is_lstm_family() {
                LayerWeights::Lstm(LstmParams::init_uniform(in_dim, hidden_dim, rng))
            } else {
                LayerWeights::Gru(GruParams::init_uniform(in_dim, hidden_dim, rng))
            });
        }
        let gate = if kind.is_hybrid() {
            Some(GarchGateParams::init(hidden_dim, lambda_max, rng))
        } else {
            None
        };
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let head = HeadWeights {
            w_out: (0..hidden_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            b_out: 0.0,
        };
        Model {
            kind,
            input_dim,
            hidden_dim,
            num_layers,
            lambda_max,
            mu_hat,
            sigma2_init: sigma2_init.max(1e-12),
            seed,
            params: ParamSet { layers, gate, head },
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        let layers = self
            .params
            .layers
            .iter()
            .map(|l| match l {
                LayerWeights::Gru(p) => {
                    LayerWeights::Gru(GruParams::zeros(p.input_dim(), p.hidden_dim()))
                }
                LayerWeights::Lstm(p) => {
                    LayerWeights::Lstm(LstmParams::zeros(p.input_dim(), p.hidden_dim()))
                }
            })
            .collect();
        let gate = self
            .params
            .gate
            .as_ref()
            .map(|g| {
                let mut z = GarchGateParams::zeros(g.w_g.len(), g.lambda_max);
                z.lambda_max = g.lambda_max;
                z
            });
        ParamSet {
            layers,
            gate,
            head: HeadWeights {
                w_out: vec![0.0; self.params.head.w_out.len()],
                b_out: 0.0,
            },
        }
    }

    pub fn n_params(&self) -> usize {
        let mut v = Vec::new();
        self.params.flatten_into(&mut v);
        v.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.params.flatten_into(&mut v);
        v
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        self.params.assign_from(&mut it);
        debug_assert!(it.next().is_none());
    }

    /// Innovation sequence feeding the gate recursion for one window:
    /// the value at step t is ε²_{t−1} (data innovation of the previous step);
    /// the window start uses the unconditional initializer.
    pub fn gate_inputs(&self, sample: &WindowSample) -> Vec<f64> {
        let mut eps2 = Vec::with_capacity(sample.raw_returns.len());
        for (t, _) in sample.raw_returns.iter().enumerate() {
            if t == 0 {
                eps2.push(self.sigma2_init);
            } else {
                let e = sample.raw_returns[t - 1] - self.mu_hat;
                eps2.push(e * e);
            }
        }
        eps2
    }

    /// Eval-mode prediction (no dropout).
    pub fn predict(&self, sample: &WindowSample) -> Result<f64> {
        let fwd = self.forward(sample, None)?;
        Ok(fwd.sigma_hat)
    }

    /// Full forward pass over a window with per-step caches for BPTT.
    /// `dropout_masks[l]` (one per non-final layer) scales that layer's
    /// output sequence elementwise; masks already carry the inverted scaling.
    pub fn forward(
        &self,
        sample: &WindowSample,
        dropout_masks: Option<&[Vec<f64>]>,
    ) -> Result<Forward> {
        let w = sample.raw_returns.len();
        let d = self.input_dim;
        if sample.features.len() != w * d {
            return Err(CoreError::shape(format!(
                "window features {} != w·d = {}",
                sample.features.len(),
                w * d
            )));
        }
        let eps2_in = self.gate_inputs(sample);

        let mut layer_caches: Vec<LayerCache> = Vec::with_capacity(self.num_layers);
        // inputs to the current layer, per step
        let mut inputs: Vec<Vec<f64>> = sample
            .features
            .chunks(d)
            .map(|c| c.to_vec())
            .collect();

        for l in 0..self.num_layers {
            let gate = if l == 0 { self.params.gate.as_ref() } else { None };
            let mut cache = LayerCache {
                inputs: inputs.clone(),
                steps: Vec::with_capacity(w),
                sigma2_path: Vec::new(),
            };
            let hidden = self.hidden_dim;
            let mut state = CellState::initial(hidden, self.sigma2_init);
            let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(w);
            for t in 0..w {
                let x = &inputs[t];
                let step = match (&self.params.layers[l], gate) {
                    (LayerWeights::Gru(p), None) => {
                        let s = cells::gru_forward_cached(p, x, &state.h)?;
                        state.h = s.h.clone();
                        StepCache::Gru(s)
                    }
                    (LayerWeights::Lstm(p), None) => {
                        let s = cells::lstm_forward_cached(p, x, &state.h, &state.c)?;
                        state.h = s.h.clone();
                        state.c = s.c.clone();
                        StepCache::Lstm(s)
                    }
                    (LayerWeights::Gru(p), Some(g)) => {
                        let s = cells::garch_gru_cell_cached(p, g, x, &state)?;
                        state.h = s.h.clone();
                        state.eps2_prev = if t + 1 < w { eps2_in[t + 1] } else { 0.0 };
                        state.sigma2_prev = s.sigma2;
                        cache.sigma2_path.push(s.sigma2);
                        StepCache::GarchGru(s)
                    }
                    (LayerWeights::Lstm(p), Some(g)) => {
                        let s = cells::garch_lstm_cell_cached(p, g, x, &state)?;
                        state.h = s.h.clone();
                        state.c = s.lstm.c.clone();
                        state.eps2_prev = if t + 1 < w { eps2_in[t + 1] } else { 0.0 };
                        state.sigma2_prev = s.sigma2;
                        cache.sigma2_path.push(s.sigma2);
                        StepCache::GarchLstm(s)
                    }
                };
                let mut out = step.hidden().to_vec();
                if l + 1 < self.num_layers {
                    if let Some(masks) = dropout_masks {
                        let mask = &masks[l];
                        for (i, o) in out.iter_mut().enumerate() {
                            *o *= mask[t * hidden + i];
                        }
                    }
                }
                outputs.push(out);
                cache.steps.push(step);
            }
            layer_caches.push(cache);
            inputs = outputs;
        }

        let final_h = inputs.last().unwrap().clone();
        let head = &self.params.head;
        let pre = crate::math::dot(&head.w_out, &final_h) + head.b_out;
        let softplus_pre = crate::math::softplus(pre).max(1e-300);
        let sigma_hat = softplus_pre.sqrt();
        Ok(Forward {
            sigma_hat,
            head_pre: pre,
            eps2_in,
            layers: layer_caches,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("model serializes");
        if let Some(gate) = &self.params.gate {
            let (omega, alpha, beta) = gate.constrained();
            v["gate_constrained"] = serde_json::json!({
                "omega": omega,
                "alpha": alpha,
                "beta": beta,
                "persistence": alpha + beta,
                "coupling": gate.coupling,
            });
        }
        v
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Model> {
        serde_json::from_value(v.clone())
            .map_err(|e| CoreError::data(format!("invalid checkpoint: {e}")))
    }
}

#[derive(Debug, Clone)]
pub enum StepCache {
    Gru(cells::GruStep),
    Lstm(cells::LstmStep),
    GarchGru(cells::GarchGruStep),
    GarchLstm(cells::GarchLstmStep),
}

impl StepCache {
    pub fn hidden(&self) -> &[f64] {
        match self {
            StepCache::Gru(s) => &s.h,
            StepCache::Lstm(s) => &s.h,
            StepCache::GarchGru(s) => &s.h,
            StepCache::GarchLstm(s) => &s.h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// inputs seen by this layer (post-dropout outputs of the layer below)
    pub inputs: Vec<Vec<f64>>,
    pub steps: Vec<StepCache>,
    /// embedded variance path, layer 1 of hybrid models only
    pub sigma2_path: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub sigma_hat: f64,
    pub head_pre: f64,
    pub eps2_in: Vec<f64>,
    pub layers: Vec<LayerCache>,
}

// -- flat parameter views (canonical ordering shared by grads and moments) --

impl ParamSet {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            match layer {
                LayerWeights::Gru(p) => {
                    for m in [&p.w_z, &p.w_r, &p.w_h, &p.u_z, &p.u_r, &p.u_h] {
                        out.extend_from_slice(&m.data);
                    }
                    for b in [&p.b_z, &p.b_r, &p.b_h] {
                        out.extend_from_slice(b);
                    }
                }
                LayerWeights::Lstm(p) => {
                    for m in [&p.w_f, &p.w_i, &p.w_o, &p.w_c, &p.u_f, &p.u_i, &p.u_o, &p.u_c] {
                        out.extend_from_slice(&m.data);
                    }
                    for b in [&p.b_f, &p.b_i, &p.b_o, &p.b_c] {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        if let Some(g) = &self.gate {
            out.push(g.u_omega);
            out.push(g.u_s);
            out.push(g.u_a);
            out.extend_from_slice(&g.w_g);
            out.extend_from_slice(&g.b_g);
            out.push(g.coupling);
        }
        out.extend_from_slice(&self.head.w_out);
        out.push(self.head.b_out);
    }

    pub fn assign_from(&mut self, it: &mut impl Iterator<Item = f64>) {
        fn fill_mat(m: &mut Mat, it: &mut impl Iterator<Item = f64>) {
            for v in m.data.iter_mut() {
                *v = it.next().expect("flat vector too short");
            }
        }
        fn fill_vec(b: &mut [f64], it: &mut impl Iterator<Item = f64>) {
            for v in b.iter_mut() {
                *v = it.next().expect("flat vector too short");
            }
        }
        for layer in &mut self.layers {
            match layer {
                LayerWeights::Gru(p) => {
                    for m in [&mut p.w_z, &mut p.w_r, &mut p.w_h, &mut p.u_z, &mut p.u_r, &mut p.u_h]
                    {
                        fill_mat(m, it);
                    }
                    for b in [&mut p.b_z, &mut p.b_r, &mut p.b_h] {
                        fill_vec(b, it);
                    }
                }
                LayerWeights::Lstm(p) => {
                    for m in [
                        &mut p.w_f, &mut p.w_i, &mut p.w_o, &mut p.w_c, &mut p.u_f, &mut p.u_i,
                        &mut p.u_o, &mut p.u_c,
                    ] {
                        fill_mat(m, it);
                    }
                    for b in [&mut p.b_f, &mut p.b_i, &mut p.b_o, &mut p.b_c] {
                        fill_vec(b, it);
                    }
                }
            }
        }
        if let Some(g) = &mut self.gate {
            g.u_omega = it.next().expect("flat vector too short");
            g.u_s = it.next().expect("flat vector too short");
            g.u_a = it.next().expect("flat vector too short");
            fill_vec(&mut g.w_g, it);
            fill_vec(&mut g.b_g, it);
            g.coupling = it.next().expect("flat vector too short");
        }
        fill_vec(&mut self.head.w_out, it);
        self.head.b_out = it.next().expect("flat vector too short");
    }
}
