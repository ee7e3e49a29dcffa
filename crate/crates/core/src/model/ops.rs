//! The differentiable building blocks of the encoder.

use std::f64::consts::PI;

use rand::Rng;

use super::params::{uniform, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Tape handles of one gated-transition weight set.
///
/// Shapes, with rows as batch items: `w_p: in × out`, `w_z, w_r, w_h:
/// ctx × out`, `u_z, u_r, u_h: out × out`, biases `1 × out`.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w_p: Var,
    pub b_p: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

pub(crate) const GATE_PARTS: [&str; 11] = [
    "w_p", "b_p", "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h",
];

/// Registers a gated-transition weight set under `prefix`. Matrices are
/// uniform in `±1/√fan_in`, biases zero.
pub(crate) fn init_gate<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, output: usize, ctx: usize, rng: &mut R) {
    for part in GATE_PARTS {
        let (rows, cols) = match part {
            "w_p" => (input, output),
            "w_z" | "w_r" | "w_h" => (ctx, output),
            "u_z" | "u_r" | "u_h" => (output, output),
            _ => (1, output),
        };
        let t = if part.starts_with('b') {
            Tensor::zeros(rows, cols)
        } else {
            uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
        };
        store.insert(&format!("{prefix}.{part}"), t);
    }
}

/// `p = x·W_p + b_p`, `z = σ(c·W_z + p·U_z + b_z)`, `r = σ(c·W_r + p·U_r + b_r)`,
/// `t = tanh(c·W_h + (r⊙p)·U_h + b_h)`, output `(1 − z)⊙p + z⊙t`.
pub fn gated_transition(tape: &mut Tape, w: &GateVars, x: Var, ctx: Var) -> Var {
    let xp = tape.matmul(x, w.w_p);
    let p = tape.add_row(xp, w.b_p);

    let gate = |tape: &mut Tape, wc: Var, u: Var, b: Var, input: Var| {
        let a = tape.matmul(ctx, wc);
        let c = tape.matmul(input, u);
        let s = tape.add(a, c);
        tape.add_row(s, b)
    };
    let z_pre = gate(tape, w.w_z, w.u_z, w.b_z, p);
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, w.w_r, w.u_r, w.b_r, p);
    let r = tape.sigmoid(r_pre);
    let rp = tape.mul(r, p);
    let h_pre = gate(tape, w.w_h, w.u_h, w.b_h, rp);
    let t = tape.tanh(h_pre);

    let keep = tape.affine(z, -1.0, 1.0);
    let a = tape.mul(keep, p);
    let b = tape.mul(z, t);
    tape.add(a, b)
}

/// Tape handles of one DeepSet weight set: attention projections `w × w`
/// and a two-layer perceptron `w → 2w → w`.
#[derive(Debug, Clone, Copy)]
pub struct DeepSetVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

pub(crate) const DEEPSET_PARTS: [&str; 7] = ["w_q", "w_k", "w_v", "w_1", "b_1", "w_2", "b_2"];

pub(crate) fn init_deepset<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) {
    for part in DEEPSET_PARTS {
        let (rows, cols) = match part {
            "w_1" => (width, 2 * width),
            "b_1" => (1, 2 * width),
            "w_2" => (2 * width, width),
            "b_2" => (1, width),
            _ => (width, width),
        };
        let t = if part.starts_with('b') {
            Tensor::zeros(rows, cols)
        } else {
            uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
        };
        store.insert(&format!("{prefix}.{part}"), t);
    }
}

/// Self-attention over the operand states, mean pooling, then the
/// perceptron. Each state is `batch × width`.
pub fn deepset_merge(tape: &mut Tape, w: &DeepSetVars, states: &[Var]) -> Var {
    deepset_merge_with_attention(tape, w, states).0
}

/// As [`deepset_merge`], also returning each operand's attention rows.
pub fn deepset_merge_with_attention(tape: &mut Tape, w: &DeepSetVars, states: &[Var]) -> (Var, Vec<Var>) {
    assert!(!states.is_empty(), "merge of no states");
    let width = tape.shape(states[0]).1;
    let scale = 1.0 / (width as f64).sqrt();
    let q: Vec<Var> = states.iter().map(|&x| tape.matmul(x, w.w_q)).collect();
    let k: Vec<Var> = states.iter().map(|&x| tape.matmul(x, w.w_k)).collect();
    let v: Vec<Var> = states.iter().map(|&x| tape.matmul(x, w.w_v)).collect();
    let m = states.len();
    let mut pooled = None;
    let mut attention = Vec::with_capacity(m);
    for &qj in &q {
        let scores: Vec<Var> = k
            .iter()
            .map(|&kl| {
                let s = tape.row_dot(qj, kl);
                tape.affine(s, scale, 0.0)
            })
            .collect();
        let s = tape.concat_cols(&scores);
        let a = tape.softmax_rows(s);
        attention.push(a);
        for (l, &vl) in v.iter().enumerate() {
            let al = tape.slice_cols(a, l, l + 1);
            let term = tape.mul_col(vl, al);
            pooled = Some(match pooled {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
    }
    let mean = tape.affine(pooled.expect("non-empty"), 1.0 / m as f64, 0.0);
    let h = tape.matmul(mean, w.w_1);
    let h = tape.add_row(h, w.b_1);
    let h = tape.relu(h);
    let o = tape.matmul(h, w.w_2);
    (tape.add_row(o, w.b_2), attention)
}

/// Limit on `|s|` of numeric states, so that `exp(±s)` neither underflows
/// nor overflows.
pub const LOG_VAR_BOUND: f64 = 20.0;

/// Replaces the `s` half of `theta = [μ | s]` by `B·tanh(s / B)`.
pub fn bound_log_variance(tape: &mut Tape, theta: Var) -> Var {
    let k = tape.shape(theta).1;
    let d = k / 2;
    let mu = tape.slice_cols(theta, 0, d);
    let s = tape.slice_cols(theta, d, k);
    let s = tape.affine(s, 1.0 / LOG_VAR_BOUND, 0.0);
    let s = tape.tanh(s);
    let s = tape.affine(s, LOG_VAR_BOUND, 0.0);
    tape.concat_cols(&[mu, s])
}

/// Diagonal Gaussian log-density of each row of `x` under the rows of
/// `theta = [μ | s]`, with variances `exp(s)`. Returns `batch × 1`.
pub fn gaussian_logpdf(tape: &mut Tape, theta: Var, x: Var) -> Var {
    let d = tape.shape(x).1;
    assert_eq!(tape.shape(theta).1, 2 * d, "θ must hold μ and s");
    let mu = tape.slice_cols(theta, 0, d);
    let s = tape.slice_cols(theta, d, 2 * d);
    diagonal_logpdf(tape, x, mu, s)
}

/// `log N(x; mean, exp(log_var))`, summed over columns.
pub fn diagonal_logpdf(tape: &mut Tape, x: Var, mean: Var, log_var: Var) -> Var {
    let d = tape.shape(x).1;
    let diff = tape.sub(x, mean);
    let sq = tape.mul(diff, diff);
    let neg = tape.affine(log_var, -1.0, 0.0);
    let inv = tape.exp(neg);
    let scaled = tape.mul(sq, inv);
    let total = tape.add(scaled, log_var);
    let rows = tape.sum_cols(total);
    tape.affine(rows, -0.5, -0.5 * d as f64 * LN_2PI)
}

/// `log φ_t(θ)`: a diagonal Gaussian over the mean half of `theta` with
/// per-row prior mean and log-variance. Returns `batch × 1`.
pub fn type_prior_logpdf(tape: &mut Tape, theta: Var, prior_mean: Var, prior_log_var: Var) -> Var {
    let d = tape.shape(prior_mean).1;
    let mu = tape.slice_cols(theta, 0, d);
    diagonal_logpdf(tape, mu, prior_mean, prior_log_var)
}

/// Mean over rows of `−log softmax(q · Eᵀ)[target]`.
pub fn entity_loss(tape: &mut Tape, q: Var, table: Var, targets: &[usize]) -> Var {
    let logits = tape.matmul_t(q, table);
    let total = tape.cross_entropy(logits, targets);
    tape.affine(total, 1.0 / targets.len() as f64, 0.0)
}

/// Mean over rows of `−log p_θ(ψ(v)) − log φ_t(θ)`.
pub fn attribute_loss(tape: &mut Tape, theta: Var, psi: Var, prior_mean: Var, prior_log_var: Var) -> Var {
    let rows = tape.shape(theta).0;
    let like = gaussian_logpdf(tape, theta, psi);
    let prior = type_prior_logpdf(tape, theta, prior_mean, prior_log_var);
    let both = tape.add(like, prior);
    let total = tape.sum(both);
    tape.affine(total, -1.0 / rows as f64, 0.0)
}

/// Plain-number `log N(x; μ, exp(s))` for ranking.
pub fn gaussian_logpdf_f64(mu: &[f64], s: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..x.len() {
        let diff = x[j] - mu[j];
        acc += diff * diff * (-s[j]).exp() + s[j] + (2.0 * PI).ln();
    }
    -0.5 * acc
}
