//! Minimal neural building blocks over the tape: MLP, LSTM cell, parameter
//! initialization, and the Adam update.
//!
//! Parameters live in flat `Vec<f64>` buffers with a fixed layout, so the
//! optimizer state, checkpoints, and tape gradients all share one indexing
//! scheme. On the tape, a whole parameter vector is lifted as a single input
//! node and the per-layer weight matrices are bound as slices of it once per
//! tape; the gradient with respect to the lifted node is then already in
//! parameter layout.

use crate::autodiff::{stable_sigmoid, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient; update skipped")]
    NonFiniteGradient,
}

/// Layer widths of a multilayer perceptron: input, hidden..., output.
/// Hidden activations are tanh, the output is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

/// Placement of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerLayout {
    pub w_off: usize,
    pub b_off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl MlpSpec {
    pub fn new(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output");
        assert!(widths.iter().all(|w| *w >= 1), "layer widths must be >= 1");
        Self {
            widths: widths.to_vec(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.widths[0]
    }

    pub fn output_size(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Total parameter count: sum of (fan_in + 1) * fan_out over layers.
    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.rows * l.cols + l.rows).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerLayout> + '_ {
        let mut off = 0;
        self.widths.windows(2).map(move |pair| {
            let (cols, rows) = (pair[0], pair[1]);
            let layout = LayerLayout {
                w_off: off,
                b_off: off + rows * cols,
                rows,
                cols,
            };
            off += rows * cols + rows;
            layout
        })
    }
}

/// MLP parameters as a flat vector plus the spec that gives it shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub theta: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(spec: MlpSpec) -> Self {
        let n = spec.param_count();
        Self {
            spec,
            theta: vec![0.0; n],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(spec);
        let layouts: Vec<LayerLayout> = p.spec.layers().collect();
        for l in layouts {
            let bound = (6.0 / (l.rows + l.cols) as f64).sqrt();
            for w in &mut p.theta[l.w_off..l.w_off + l.rows * l.cols] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    /// Zeroes the final layer (weights and bias). Used by the physics model
    /// so the net starts out predicting a zero net wrench.
    pub fn zero_output_layer(&mut self) {
        let last = self.spec.layers().last().unwrap();
        for w in &mut self.theta[last.w_off..last.b_off + last.rows] {
            *w = 0.0;
        }
    }

    /// Split the flat vector into per-layer (weights, bias) pairs.
    pub fn unflatten(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.spec
            .layers()
            .map(|l| {
                (
                    self.theta[l.w_off..l.w_off + l.rows * l.cols].to_vec(),
                    self.theta[l.b_off..l.b_off + l.rows].to_vec(),
                )
            })
            .collect()
    }

    /// Rebuild the flat vector from per-layer pairs.
    pub fn flatten(spec: MlpSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Self {
        let mut theta = Vec::with_capacity(spec.param_count());
        for (w, b) in layers {
            theta.extend_from_slice(w);
            theta.extend_from_slice(b);
        }
        assert_eq!(theta.len(), spec.param_count());
        Self { spec, theta }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        mlp_forward(&self.spec, &self.theta, input)
    }
}

/// Deterministic forward pass: tanh hidden activations, linear output.
pub fn mlp_forward(spec: &MlpSpec, theta: &[f64], input: &[f64]) -> Result<Vec<f64>, NnError> {
    if input.len() != spec.input_size() {
        return Err(NnError::ShapeMismatch {
            what: "mlp input",
            expected: spec.input_size(),
            got: input.len(),
        });
    }
    if theta.len() != spec.param_count() {
        return Err(NnError::ShapeMismatch {
            what: "mlp parameters",
            expected: spec.param_count(),
            got: theta.len(),
        });
    }
    let n_layers = spec.widths.len() - 1;
    let mut act = input.to_vec();
    for (li, l) in spec.layers().enumerate() {
        let mut next = vec![0.0; l.rows];
        for r in 0..l.rows {
            let row = &theta[l.w_off + r * l.cols..l.w_off + (r + 1) * l.cols];
            let mut acc = theta[l.b_off + r];
            for (w, x) in row.iter().zip(&act) {
                acc += w * x;
            }
            next[r] = if li + 1 < n_layers { acc.tanh() } else { acc };
        }
        act = next;
    }
    Ok(act)
}

/// An MLP bound onto a tape: per-layer weight/bias slices of a lifted flat
/// parameter node. Bind once per tape, then run `forward` per step.
pub struct MlpOnTape<'t> {
    layers: Vec<(Var<'t>, Var<'t>, usize, usize)>,
    n_layers: usize,
    input_size: usize,
}

impl<'t> MlpOnTape<'t> {
    /// `theta` is a tape node holding (at least) this MLP's parameters
    /// starting at `base`.
    pub fn bind(tape: &'t Tape, spec: &MlpSpec, theta: Var<'t>, base: usize) -> Self {
        let layers = spec
            .layers()
            .map(|l| {
                let w = tape.slice(theta, base + l.w_off, l.rows * l.cols);
                let b = tape.slice(theta, base + l.b_off, l.rows);
                (w, b, l.rows, l.cols)
            })
            .collect();
        Self {
            layers,
            n_layers: spec.widths.len() - 1,
            input_size: spec.input_size(),
        }
    }

    pub fn forward(&self, tape: &'t Tape, input: Var<'t>) -> Var<'t> {
        assert_eq!(tape.len_of(input), self.input_size, "mlp tape input size");
        let mut act = input;
        for (li, (w, b, rows, cols)) in self.layers.iter().enumerate() {
            let z = tape.matvec(*w, act, *rows, *cols) + *b;
            act = if li + 1 < self.n_layers { tape.tanh(z) } else { z };
        }
        act
    }
}

/// LSTM cell parameters. Gate order in the flat layout is input, forget,
/// cell candidate, output; per gate: input weights (hidden x input), recurrent
/// weights (hidden x hidden), bias (hidden).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub theta: Vec<f64>,
}

const GATES: usize = 4;
const GATE_FORGET: usize = 1;

impl LstmParams {
    pub fn param_count_for(input_size: usize, hidden_size: usize) -> usize {
        GATES * (hidden_size * input_size + hidden_size * hidden_size + hidden_size)
    }

    fn gate_stride(&self) -> usize {
        self.hidden_size * self.input_size + self.hidden_size * self.hidden_size
            + self.hidden_size
    }

    /// Offsets of (w_x, w_h, b) for one gate.
    fn gate_layout(&self, gate: usize) -> (usize, usize, usize) {
        let base = gate * self.gate_stride();
        let wx = base;
        let wh = wx + self.hidden_size * self.input_size;
        let b = wh + self.hidden_size * self.hidden_size;
        (wx, wh, b)
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_size,
            hidden_size,
            theta: vec![0.0; Self::param_count_for(input_size, hidden_size)],
        }
    }

    /// Xavier-uniform weights, zero biases except the forget gate at +1.
    pub fn xavier(input_size: usize, hidden_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(input_size, hidden_size);
        for gate in 0..GATES {
            let (wx, wh, b) = p.gate_layout(gate);
            let bound_x = (6.0 / (input_size + hidden_size) as f64).sqrt();
            for w in &mut p.theta[wx..wx + hidden_size * input_size] {
                *w = rng.gen_range(-bound_x..bound_x);
            }
            let bound_h = (6.0 / (2 * hidden_size) as f64).sqrt();
            for w in &mut p.theta[wh..wh + hidden_size * hidden_size] {
                *w = rng.gen_range(-bound_h..bound_h);
            }
            if gate == GATE_FORGET {
                for w in &mut p.theta[b..b + hidden_size] {
                    *w = 1.0;
                }
            }
        }
        p
    }

    /// Standard LSTM cell update:
    /// i,f,o = sigmoid(pre), g = tanh(pre), c' = f.c + i.g, h' = o.tanh(c').
    pub fn step(
        &self,
        h: &[f64],
        c: &[f64],
        input: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        if input.len() != self.input_size {
            return Err(NnError::ShapeMismatch {
                what: "lstm input",
                expected: self.input_size,
                got: input.len(),
            });
        }
        if h.len() != self.hidden_size || c.len() != self.hidden_size {
            return Err(NnError::ShapeMismatch {
                what: "lstm state",
                expected: self.hidden_size,
                got: h.len().max(c.len()),
            });
        }
        let nh = self.hidden_size;
        let mut pre = vec![0.0; GATES * nh];
        for gate in 0..GATES {
            let (wx, wh, b) = self.gate_layout(gate);
            for r in 0..nh {
                let mut acc = self.theta[b + r];
                let row_x = &self.theta[wx + r * self.input_size..wx + (r + 1) * self.input_size];
                for (w, x) in row_x.iter().zip(input) {
                    acc += w * x;
                }
                let row_h = &self.theta[wh + r * nh..wh + (r + 1) * nh];
                for (w, x) in row_h.iter().zip(h) {
                    acc += w * x;
                }
                pre[gate * nh + r] = acc;
            }
        }
        let mut c_next = vec![0.0; nh];
        let mut h_next = vec![0.0; nh];
        for r in 0..nh {
            let i = stable_sigmoid(pre[r]);
            let f = stable_sigmoid(pre[nh + r]);
            let g = pre[2 * nh + r].tanh();
            let o = stable_sigmoid(pre[3 * nh + r]);
            c_next[r] = f * c[r] + i * g;
            h_next[r] = o * c_next[r].tanh();
        }
        Ok((h_next, c_next))
    }
}

/// LSTM cell bound onto a tape, gate slices fixed once per tape.
pub struct LstmOnTape<'t> {
    gates: [(Var<'t>, Var<'t>, Var<'t>); GATES],
    input_size: usize,
    hidden_size: usize,
}

impl<'t> LstmOnTape<'t> {
    pub fn bind(tape: &'t Tape, params: &LstmParams, theta: Var<'t>, base: usize) -> Self {
        let (ni, nh) = (params.input_size, params.hidden_size);
        let mut gates = Vec::with_capacity(GATES);
        for gate in 0..GATES {
            let (wx, wh, b) = params.gate_layout(gate);
            gates.push((
                tape.slice(theta, base + wx, nh * ni),
                tape.slice(theta, base + wh, nh * nh),
                tape.slice(theta, base + b, nh),
            ));
        }
        Self {
            gates: gates.try_into().ok().unwrap(),
            input_size: ni,
            hidden_size: nh,
        }
    }

    pub fn step(
        &self,
        tape: &'t Tape,
        h: Var<'t>,
        c: Var<'t>,
        input: Var<'t>,
    ) -> (Var<'t>, Var<'t>) {
        let (ni, nh) = (self.input_size, self.hidden_size);
        let pre = |gate: usize| {
            let (wx, wh, b) = self.gates[gate];
            tape.matvec(wx, input, nh, ni) + tape.matvec(wh, h, nh, nh) + b
        };
        let i = tape.sigmoid(pre(0));
        let f = tape.sigmoid(pre(1));
        let g = tape.tanh(pre(2));
        let o = tape.sigmoid(pre(3));
        let c_next = f * c + i * g;
        let h_next = o * tape.tanh(c_next);
        (h_next, c_next)
    }
}

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    /// One bias-corrected Adam step in place. Rejects non-finite gradients
    /// without touching parameters or moments.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        assert_eq!(params.len(), self.m.len(), "adam parameter length");
        assert_eq!(grads.len(), self.m.len(), "adam gradient length");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grads[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grads[k] * grads[k];
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Scales `grads` in place so its L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradient_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, func, grad};
    use rand::SeedableRng;

    #[test]
    fn zero_mlp_outputs_zero() {
        let p = MlpParams::zeros(MlpSpec::new(&[3, 8, 2]));
        let out = p.forward(&[0.3, -1.0, 2.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let spec = MlpSpec::new(&[3, 3]);
        let mut p = MlpParams::zeros(spec);
        for i in 0..3 {
            p.theta[i * 3 + i] = 1.0;
        }
        let input = [0.7, -0.1, 4.0];
        assert_eq!(p.forward(&input).unwrap(), input.to_vec());
    }

    /// Straight-line matrix-arithmetic oracle for a 2-16-3 net.
    #[test]
    fn seeded_mlp_matches_straight_line_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let p = MlpParams::xavier(MlpSpec::new(&[2, 16, 3]), &mut rng);
        let input = [0.4, -1.2];
        let got = p.forward(&input).unwrap();

        let w1 = &p.theta[0..32];
        let b1 = &p.theta[32..48];
        let w2 = &p.theta[48..48 + 48];
        let b2 = &p.theta[96..99];
        let mut hidden = [0.0; 16];
        for r in 0..16 {
            hidden[r] = (w1[r * 2] * input[0] + w1[r * 2 + 1] * input[1] + b1[r]).tanh();
        }
        for r in 0..3 {
            let mut acc = b2[r];
            for c in 0..16 {
                acc += w2[r * 16 + c] * hidden[c];
            }
            let rel = (got[r] - acc).abs() / acc.abs().max(1.0);
            assert!(rel < 1e-15, "output {r}: {} vs {}", got[r], acc);
        }
    }

    #[test]
    fn mlp_rejects_wrong_input_length() {
        let p = MlpParams::zeros(MlpSpec::new(&[3, 2]));
        assert!(matches!(
            p.forward(&[1.0, 2.0]),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn lstm_zero_everything_stays_zero() {
        let p = LstmParams::zeros(4, 8);
        let (h, c) = p.step(&vec![0.0; 8], &vec![0.0; 8], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 8]);
        assert_eq!(c, vec![0.0; 8]);
    }

    #[test]
    fn saturated_gates_copy_the_cell() {
        let mut p = LstmParams::zeros(2, 3);
        let (_, _, bf) = p.gate_layout(GATE_FORGET);
        for w in &mut p.theta[bf..bf + 3] {
            *w = 50.0;
        }
        let (_, _, bi) = p.gate_layout(0);
        for w in &mut p.theta[bi..bi + 3] {
            *w = -50.0;
        }
        let c = vec![0.3, -0.8, 0.5];
        let (_, c_next) = p.step(&vec![0.0; 3], &c, &[1.0, -1.0]).unwrap();
        for (a, b) in c_next.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Straight-line oracle for a seeded 4-input 8-hidden cell.
    #[test]
    fn seeded_lstm_matches_straight_line_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let p = LstmParams::xavier(4, 8, &mut rng);
        let h: Vec<f64> = (0..8).map(|i| 0.05 * i as f64 - 0.2).collect();
        let c: Vec<f64> = (0..8).map(|i| -0.03 * i as f64 + 0.1).collect();
        let x = [0.2, -0.4, 0.8, -1.0];
        let (h1, c1) = p.step(&h, &c, &x).unwrap();

        for r in 0..8 {
            let mut pre = [0.0; 4];
            for (gate, pg) in pre.iter_mut().enumerate() {
                let (wx, wh, b) = p.gate_layout(gate);
                let mut acc = p.theta[b + r];
                for (k, xv) in x.iter().enumerate() {
                    acc += p.theta[wx + r * 4 + k] * xv;
                }
                for (k, hv) in h.iter().enumerate() {
                    acc += p.theta[wh + r * 8 + k] * hv;
                }
                *pg = acc;
            }
            let i = 1.0 / (1.0 + (-pre[0]).exp());
            let f = 1.0 / (1.0 + (-pre[1]).exp());
            let g = pre[2].tanh();
            let o = 1.0 / (1.0 + (-pre[3]).exp());
            let want_c = f * c[r] + i * g;
            let want_h = o * want_c.tanh();
            assert!((c1[r] - want_c).abs() < 1e-12);
            assert!((h1[r] - want_h).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_flatten_unflatten_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let p = MlpParams::xavier(MlpSpec::new(&[5, 7, 7, 2]), &mut rng);
        let rebuilt = MlpParams::flatten(p.spec.clone(), &p.unflatten());
        assert_eq!(p, rebuilt);
    }

    #[test]
    fn tape_mlp_matches_plain_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let p = MlpParams::xavier(MlpSpec::new(&[4, 12, 12, 3]), &mut rng);
        let input = [0.3, -0.7, 1.1, 0.05];
        let plain = p.forward(&input).unwrap();

        let tape = Tape::new();
        let theta = tape.input(&p.theta);
        let bound = MlpOnTape::bind(&tape, &p.spec, theta, 0);
        let x = tape.input(&input);
        let out = tape.value(bound.forward(&tape, x));
        for (a, b) in out.iter().zip(&plain) {
            let rel = (a - b).abs() / b.abs().max(1.0);
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn tape_lstm_matches_plain_step() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p = LstmParams::xavier(3, 6, &mut rng);
        let h: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.3).collect();
        let c: Vec<f64> = (0..6).map(|i| 0.05 * i as f64).collect();
        let x = [0.5, -0.25, 0.8];
        let (h1, c1) = p.step(&h, &c, &x).unwrap();

        let tape = Tape::new();
        let theta = tape.input(&p.theta);
        let bound = LstmOnTape::bind(&tape, &p, theta, 0);
        let hv = tape.input(&h);
        let cv = tape.input(&c);
        let xv = tape.input(&x);
        let (h1v, c1v) = bound.step(&tape, hv, cv, xv);
        for (a, b) in tape.value(h1v).iter().zip(&h1) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-12);
        }
        for (a, b) in tape.value(c1v).iter().zip(&c1) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-12);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let spec = MlpSpec::new(&[3, 5, 2]);
        let n_params = spec.param_count();
        for seed in 0..10 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            let p = MlpParams::xavier(spec.clone(), &mut rng);
            let mut x: Vec<f64> = p.theta.clone();
            for _ in 0..3 {
                x.push(rng.gen_range(-1.0..1.0));
            }
            let spec_ref = &spec;
            let f = func(move |c| {
                let t = c.tape();
                let theta = t.concat(&c.all()[..n_params]);
                let input = t.concat(&c.all()[n_params..]);
                let bound = MlpOnTape::bind(t, spec_ref, theta, 0);
                let out = bound.forward(t, input);
                t.sum(t.mul(out, out))
            });
            let err = check_gradient(f, &x, 1e-5).unwrap();
            assert!(err < 1e-5, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let (ni, nh) = (2, 3);
        for seed in 0..10 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(200 + seed);
            let p = LstmParams::xavier(ni, nh, &mut rng);
            let n_params = p.theta.len();
            let mut x = p.theta.clone();
            for _ in 0..(2 * nh + ni) {
                x.push(rng.gen_range(-0.8..0.8));
            }
            let p_ref = &p;
            let f = func(move |cx| {
                let t = cx.tape();
                let theta = t.concat(&cx.all()[..n_params]);
                let h = t.concat(&cx.all()[n_params..n_params + nh]);
                let c = t.concat(&cx.all()[n_params + nh..n_params + 2 * nh]);
                let input = t.concat(&cx.all()[n_params + 2 * nh..]);
                let bound = LstmOnTape::bind(t, p_ref, theta, 0);
                let (h1, c1) = bound.step(t, h, c, input);
                t.sum(t.mul(h1, h1)) + t.sum(t.mul(c1, c1))
            });
            let err = check_gradient(f, &x, 1e-5).unwrap();
            assert!(err < 1e-5, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(3, 0.1);
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        st.update(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_moments_decay_without_gradient() {
        let mut st = AdamState::new(1, 0.1);
        st.m[0] = 1.0;
        st.v[0] = 1.0;
        let mut params = vec![0.0];
        st.update(&mut params, &[0.0]).unwrap();
        assert!((st.m[0] - 0.9).abs() < 1e-15);
        assert!((st.v[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        for &g in &[3.0, -0.25, 1e3] {
            let mut st = AdamState::new(1, 0.01);
            let mut params = vec![0.0];
            st.update(&mut params, &[g]).unwrap();
            let want = -0.01 * g.signum();
            assert!(
                (params[0] - want).abs() < 0.01 * 1e-5,
                "g={g}: step {} vs {}",
                params[0],
                want
            );
        }
    }

    /// Oracle: the scalar Adam recursion written out directly.
    #[test]
    fn adam_descends_a_parabola() {
        let lr = 0.1;
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut x_oracle: f64 = 5.0;
        let (mut m, mut v): (f64, f64) = (0.0, 0.0);
        for t in 1..=100i32 {
            let g = 2.0 * x_oracle;
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powi(t));
            let v_hat = v / (1.0 - beta2.powi(t));
            x_oracle -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!(x_oracle.abs() < 0.5, "oracle ended at {x_oracle}");

        let mut st = AdamState::new(1, lr);
        let mut params = vec![5.0];
        for _ in 0..100 {
            let g = [2.0 * params[0]];
            st.update(&mut params, &g).unwrap();
        }
        assert_eq!(params[0].to_bits(), x_oracle.to_bits());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut st = AdamState::new(2, 0.1);
        let mut params = vec![1.0, 2.0];
        let before = params.clone();
        let res = st.update(&mut params, &[f64::NAN, 0.0]);
        assert!(matches!(res, Err(NnError::NonFiniteGradient)));
        assert_eq!(params, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn xavier_initialization_is_reproducible() {
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let a = MlpParams::xavier(MlpSpec::new(&[4, 16, 4]), &mut r1);
        let b = MlpParams::xavier(MlpSpec::new(&[4, 16, 4]), &mut r2);
        for (x, y) in a.theta.iter().zip(&b.theta) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let mut r3 = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let l1 = LstmParams::xavier(4, 8, &mut r3);
        let mut r4 = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let l2 = LstmParams::xavier(4, 8, &mut r4);
        assert_eq!(l1, l2);
    }

    #[test]
    fn clip_rescales_long_gradients_only() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_gradient_norm(&mut g, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        let norm = clip_gradient_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zeroed_output_layer_silences_random_net() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = MlpParams::xavier(MlpSpec::new(&[3, 9, 2]), &mut rng);
        p.zero_output_layer();
        let out = p.forward(&[1.0, -0.5, 0.25]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_helper_composes_with_tape_mlp() {
        let spec = MlpSpec::new(&[2, 4, 1]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        let p = MlpParams::xavier(spec.clone(), &mut rng);
        let theta = p.theta.clone();
        let spec_ref = &spec;
        let (value, g) = grad(
            move |c| {
                let t = c.tape();
                let th = t.constant(&theta);
                let bound = MlpOnTape::bind(t, spec_ref, th, 0);
                let input = t.concat(c.all());
                bound.forward(t, input)
            },
            &[0.2, -0.9],
        )
        .unwrap();
        let plain = p.forward(&[0.2, -0.9]).unwrap();
        assert!((value - plain[0]).abs() < 1e-14);
        assert_eq!(g.len(), 2);
    }
}
