//! Independent reference cells used only by the acceptance suite. Written
//! deliberately in a different style from the library (plain nested vectors,
//! scalar loops) so agreement between the two is meaningful.

pub struct ReferenceGru {
    pub weight_input: [Vec<Vec<f64>>; 3],  // z, r, candidate
    pub weight_hidden: [Vec<Vec<f64>>; 3], // z, r, candidate
    pub bias: [Vec<f64>; 3],
}

pub struct ReferenceLstm {
    pub weight_input: [Vec<Vec<f64>>; 4],  // f, i, o, candidate
    pub weight_hidden: [Vec<Vec<f64>>; 4], // f, i, o, candidate
    pub bias: [Vec<f64>; 4],
}

fn logistic(value: f64) -> f64 {
    1.0 / (1.0 + (-value).exp())
}

fn affine(
    weight_input: &[Vec<f64>],
    weight_hidden: &[Vec<f64>],
    bias: &[f64],
    input: &[f64],
    hidden: &[f64],
) -> Vec<f64> {
    let mut result = Vec::with_capacity(bias.len());
    for row in 0..bias.len() {
        let mut acc = bias[row];
        for col in 0..input.len() {
            acc += weight_input[row][col] * input[col];
        }
        for col in 0..hidden.len() {
            acc += weight_hidden[row][col] * hidden[col];
        }
        result.push(acc);
    }
    result
}

impl ReferenceGru {
    pub fn step(&self, input: &[f64], hidden_prev: &[f64]) -> Vec<f64> {
        let update: Vec<f64> = affine(
            &self.weight_input[0],
            &self.weight_hidden[0],
            &self.bias[0],
            input,
            hidden_prev,
        )
        .into_iter()
        .map(logistic)
        .collect();
        let reset: Vec<f64> = affine(
            &self.weight_input[1],
            &self.weight_hidden[1],
            &self.bias[1],
            input,
            hidden_prev,
        )
        .into_iter()
        .map(logistic)
        .collect();
        let gated_hidden: Vec<f64> = reset
            .iter()
            .zip(hidden_prev)
            .map(|(r, h)| r * h)
            .collect();
        let candidate: Vec<f64> = affine(
            &self.weight_input[2],
            &self.weight_hidden[2],
            &self.bias[2],
            input,
            &gated_hidden,
        )
        .into_iter()
        .map(f64::tanh)
        .collect();
        let mut hidden_next = Vec::with_capacity(hidden_prev.len());
        for idx in 0..hidden_prev.len() {
            hidden_next.push((1.0 - update[idx]) * hidden_prev[idx] + update[idx] * candidate[idx]);
        }
        hidden_next
    }
}

impl ReferenceLstm {
    pub fn step(
        &self,
        input: &[f64],
        hidden_prev: &[f64],
        cell_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut gates: Vec<Vec<f64>> = Vec::with_capacity(4);
        for which in 0..4 {
            let pre = affine(
                &self.weight_input[which],
                &self.weight_hidden[which],
                &self.bias[which],
                input,
                hidden_prev,
            );
            let activated = if which == 3 {
                pre.into_iter().map(f64::tanh).collect()
            } else {
                pre.into_iter().map(logistic).collect()
            };
            gates.push(activated);
        }
        let mut cell_next = Vec::with_capacity(cell_prev.len());
        let mut hidden_next = Vec::with_capacity(cell_prev.len());
        for idx in 0..cell_prev.len() {
            let c = gates[0][idx] * cell_prev[idx] + gates[1][idx] * gates[3][idx];
            hidden_next.push(gates[2][idx] * c.tanh());
            cell_next.push(c);
        }
        (hidden_next, cell_next)
    }
}
