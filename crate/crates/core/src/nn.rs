//! Parameter storage, graph sessions, and transformer building blocks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Named parameter tensors with trainability flags. Creation order is fixed
/// by the model builder, which keeps checkpoints and RNG streams stable.
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), trainable: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let idx = self.values.len();
        self.index.insert(name.to_string(), idx);
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        idx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor<S> {
        &self.values[idx]
    }

    pub fn value_by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.lookup(name).map(|i| &self.values[i])
    }

    pub fn set_value(&mut self, idx: usize, value: Tensor<S>) {
        assert_eq!(self.values[idx].dims(), value.dims(), "shape change for {}", self.names[idx]);
        self.values[idx] = value;
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.trainable[idx]
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = false;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward pass: a tape bound to a parameter store.
pub struct Graph<'a, S: Scalar> {
    pub tape: Tape<S>,
    store: &'a mut ParamStore<S>,
    param_vars: Vec<Option<Var>>,
    pub mode: Mode,
    rng: ChaCha8Rng,
    dropout_p: f64,
    stat_updates: Vec<(usize, Tensor<S>)>,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, mode: Mode, seed: u64, dropout_p: f64) -> Self {
        let n = store.len();
        Graph {
            tape: Tape::new(),
            store,
            param_vars: vec![None; n],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout_p,
            stat_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    /// Tape node for a named parameter; trainable parameters become
    /// gradient-carrying leaves, frozen ones constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .store
            .lookup(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if let Some(v) = self.param_vars[idx] {
            return Ok(v);
        }
        let value = self.store.value(idx).clone();
        let v = if self.store.is_trainable(idx) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.param_vars[idx] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity in eval mode or at p = 0.
    pub fn dropout(&mut self, x: Var) -> Var {
        if self.mode == Mode::Eval || self.dropout_p <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout_p;
        let scale = S::of_f64(1.0 / keep);
        let dims = self.tape.dims(x).to_vec();
        let mask = Tensor::from_fn(&dims, |_| {
            if self.rng.gen_range(0.0..1.0) < keep {
                scale
            } else {
                S::zero()
            }
        });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m).expect("dropout mask dims")
    }

    /// Record a pending non-gradient state write (running statistics).
    pub fn push_stat_update(&mut self, idx: usize, value: Tensor<S>) {
        self.stat_updates.push((idx, value));
    }

    /// Apply recorded state writes to the store.
    pub fn apply_stat_updates(&mut self) {
        for (idx, v) in std::mem::take(&mut self.stat_updates) {
            self.store.set_value(idx, v);
        }
    }

    /// Backward pass returning gradients indexed like the store.
    pub fn grads(&self, loss: Var) -> Result<Vec<Option<Tensor<S>>>> {
        let mut tape_grads = self.tape.backward(loss)?;
        let mut out: Vec<Option<Tensor<S>>> = vec![None; self.store.len()];
        for (idx, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                out[idx] = tape_grads.take(*v);
            }
        }
        Ok(out)
    }

    pub fn param_var(&self, idx: usize) -> Option<Var> {
        self.param_vars[idx]
    }
}

// ── initialization ──────────────────────────────────────────────────

/// Registers parameters with deterministic seeded initialization.
pub struct Init<'a, S: Scalar> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, S: Scalar> Init<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Init { store, rng }
    }

    /// `name.w [fan_in, fan_out]` Xavier-uniform, `name.b [fan_out]` zeros.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| S::of_f64(rng.gen_range(-a..a)));
        self.store.add(&format!("{name}.w"), w, true);
        self.store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
    }

    /// `name.g` ones and `name.b` zeros over the last axis.
    pub fn norm(&mut self, name: &str, d: usize) {
        self.store.add(&format!("{name}.g"), Tensor::full(&[d], S::one()), true);
        self.store.add(&format!("{name}.b"), Tensor::zeros(&[d]), true);
    }

    /// Adds running mean/var state for batch normalization.
    pub fn batch_norm(&mut self, name: &str, c: usize) {
        self.norm(name, c);
        self.store.add(&format!("{name}.rm"), Tensor::zeros(&[c]), false);
        self.store.add(&format!("{name}.rv"), Tensor::full(&[c], S::one()), false);
    }

    /// Normal(0, std) tensor.
    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(dims, |_| S::of_f64(S::sample_normal(rng).as_f64() * std));
        self.store.add(name, t, true);
    }

    /// Convolution kernel `[kt, kh, kw, ci, co]` He-normal plus zero bias.
    pub fn conv(&mut self, name: &str, kt: usize, kh: usize, kw: usize, ci: usize, co: usize) {
        let fan_in = (kt * kh * kw * ci) as f64;
        let std = (2.0 / fan_in).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[kt, kh, kw, ci, co], |_| {
            S::of_f64(S::sample_normal(rng).as_f64() * std)
        });
        self.store.add(&format!("{name}.w"), w, true);
        self.store.add(&format!("{name}.b"), Tensor::zeros(&[co]), true);
    }
}

// ── layers ──────────────────────────────────────────────────────────

pub fn linear<S: Scalar>(g: &mut Graph<S>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add_bias(y, b)
}

pub fn layer_norm<S: Scalar>(g: &mut Graph<S>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{name}.g"))?;
    let beta = g.param(&format!("{name}.b"))?;
    g.tape.layer_norm(x, gamma, beta, S::of_f64(LN_EPS))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKernel {
    Softmax,
    Linear,
}

/// Multi-head scaled attention over already-projected `q`, `k`, `v`
/// (`[Lq, d]`, `[Lk, d]`, `[Lk, d]`). Heads split the feature axis. The
/// optional additive mask `[Lq, Lk]` holds 0 for visible and -inf for
/// blocked positions; blocked positions receive exactly zero weight.
/// The linear kernel uses the feature map `elu(u) + 1`.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<Var>,
    kernel: AttnKernel,
) -> Result<Var> {
    let d = *tape
        .dims(q)
        .last()
        .ok_or_else(|| Error::shape("attention expects rank-2 inputs"))?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!(
            "model dimension {d} not divisible by {n_heads} heads"
        )));
    }
    if tape.dims(k) != tape.dims(v) || tape.dims(k)[1] != d {
        return Err(Error::shape(format!(
            "attention dims q {:?} k {:?} v {:?}",
            tape.dims(q),
            tape.dims(k),
            tape.dims(v)
        )));
    }
    if let Some(m) = mask {
        let want = [tape.dims(q)[0], tape.dims(k)[0]];
        if tape.dims(m) != want {
            return Err(Error::shape(format!(
                "mask dims {:?}, want {:?}",
                tape.dims(m),
                want
            )));
        }
        if kernel == AttnKernel::Linear {
            return Err(Error::config("masking is not supported by the linear kernel"));
        }
    }
    let dh = d / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let out_h = match kernel {
            AttnKernel::Softmax => {
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, S::of_f64(1.0 / (dh as f64).sqrt()));
                let masked = match mask {
                    Some(m) => tape.add(scaled, m)?,
                    None => scaled,
                };
                let attn = tape.softmax(masked, 1)?;
                tape.matmul(attn, vh)?
            }
            AttnKernel::Linear => {
                let fq = tape.elu1(qh);
                let fk = tape.elu1(kh);
                let fkt = tape.transpose(fk)?;
                let kv = tape.matmul(fkt, vh)?;
                let ksum = tape.sum_over_rows(fk)?;
                let ksum_col = tape.reshape(ksum, &[dh, 1])?;
                let denom = tape.matmul(fq, ksum_col)?;
                let lq = tape.dims(q)[0];
                let denom = tape.reshape(denom, &[lq])?;
                let num = tape.matmul(fq, kv)?;
                tape.row_div(num, denom)?
            }
        };
        heads.push(out_h);
    }
    tape.concat_cols(&heads)
}

/// Attention sublayer with learned q/k/v/out projections.
pub fn mha_layer<S: Scalar>(
    g: &mut Graph<S>,
    name: &str,
    q_in: Var,
    kv_in: Var,
    n_heads: usize,
    mask: Option<Var>,
    kernel: AttnKernel,
) -> Result<Var> {
    let q = linear(g, &format!("{name}.q"), q_in)?;
    let k = linear(g, &format!("{name}.k"), kv_in)?;
    let v = linear(g, &format!("{name}.v"), kv_in)?;
    let a = multi_head_attention(&mut g.tape, q, k, v, n_heads, mask, kernel)?;
    linear(g, &format!("{name}.o"), a)
}

fn ffn<S: Scalar>(g: &mut Graph<S>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{name}.ff1"), x)?;
    let h = g.tape.relu(h);
    linear(g, &format!("{name}.ff2"), h)
}

/// Pre-normalized transformer encoder layer.
pub fn encoder_layer<S: Scalar>(
    g: &mut Graph<S>,
    name: &str,
    x: Var,
    n_heads: usize,
    mask: Option<Var>,
    kernel: AttnKernel,
) -> Result<Var> {
    let n1 = layer_norm(g, &format!("{name}.ln1"), x)?;
    let a = mha_layer(g, &format!("{name}.attn"), n1, n1, n_heads, mask, kernel)?;
    let a = g.dropout(a);
    let x = g.tape.add(x, a)?;
    let n2 = layer_norm(g, &format!("{name}.ln2"), x)?;
    let h = ffn(g, name, n2)?;
    let h = g.dropout(h);
    g.tape.add(x, h)
}

/// Pre-normalized transformer decoder layer with cross attention.
pub fn decoder_layer<S: Scalar>(
    g: &mut Graph<S>,
    name: &str,
    x: Var,
    enc: Var,
    n_heads: usize,
    causal_mask: Var,
) -> Result<Var> {
    let n1 = layer_norm(g, &format!("{name}.ln1"), x)?;
    let a = mha_layer(g, &format!("{name}.self"), n1, n1, n_heads, Some(causal_mask), AttnKernel::Softmax)?;
    let a = g.dropout(a);
    let x = g.tape.add(x, a)?;
    let n2 = layer_norm(g, &format!("{name}.ln2"), x)?;
    let c = mha_layer(g, &format!("{name}.cross"), n2, enc, n_heads, None, AttnKernel::Softmax)?;
    let c = g.dropout(c);
    let x = g.tape.add(x, c)?;
    let n3 = layer_norm(g, &format!("{name}.ln3"), x)?;
    let h = ffn(g, name, n3)?;
    let h = g.dropout(h);
    g.tape.add(x, h)
}

/// Registers one encoder layer's parameters.
pub fn init_encoder_layer<S: Scalar>(init: &mut Init<S>, name: &str, d: usize, ffn_dim: usize) {
    init.norm(&format!("{name}.ln1"), d);
    for p in ["q", "k", "v", "o"] {
        init.linear(&format!("{name}.attn.{p}"), d, d);
    }
    init.norm(&format!("{name}.ln2"), d);
    init.linear(&format!("{name}.ff1"), d, ffn_dim);
    init.linear(&format!("{name}.ff2"), ffn_dim, d);
}

/// Registers one decoder layer's parameters.
pub fn init_decoder_layer<S: Scalar>(init: &mut Init<S>, name: &str, d: usize, ffn_dim: usize) {
    init.norm(&format!("{name}.ln1"), d);
    for p in ["q", "k", "v", "o"] {
        init.linear(&format!("{name}.self.{p}"), d, d);
    }
    init.norm(&format!("{name}.ln2"), d);
    for p in ["q", "k", "v", "o"] {
        init.linear(&format!("{name}.cross.{p}"), d, d);
    }
    init.norm(&format!("{name}.ln3"), d);
    init.linear(&format!("{name}.ff1"), d, ffn_dim);
    init.linear(&format!("{name}.ff2"), ffn_dim, d);
}

// ── positional encodings and masks ──────────────────────────────────

/// Sinusoidal table: entry `(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// entry `(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn sinusoidal_pe<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let i2 = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            data.push(S::of_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("pe shape")
}

/// Additive causal mask: 0 at or before the diagonal, -inf after it.
pub fn causal_mask<S: Scalar>(len: usize) -> Tensor<S> {
    Tensor::from_fn(&[len, len], |i| {
        let (r, c) = (i / len, i % len);
        if c <= r {
            S::zero()
        } else {
            S::neg_infinity()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn tape_with<S: Scalar>(t: Tensor<S>) -> (Tape<S>, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        (tape, v)
    }

    #[test]
    fn attention_single_kv_returns_value_row() {
        let (mut tape, q) = tape_with(Tensor::new(vec![1, 4], vec![0.3f64, -1.0, 0.5, 2.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, 0.0, -1.0, 0.4]).unwrap());
        let v = tape.leaf(Tensor::new(vec![1, 4], vec![7.0, -3.0, 0.25, 11.0]).unwrap());
        for kernel in [AttnKernel::Softmax, AttnKernel::Linear] {
            let out = multi_head_attention(&mut tape, q, k, v, 2, None, kernel).unwrap();
            let got = tape.value(out).data();
            for (a, b) in got.iter().zip([7.0, -3.0, 0.25, 11.0]) {
                assert!((a - b).abs() < 1e-12, "{kernel:?}: {got:?}");
            }
        }
    }

    #[test]
    fn attention_identical_keys_averages_values() {
        let (mut tape, q) = tape_with(Tensor::new(vec![1, 2], vec![0.9f64, -0.4]).unwrap());
        let k = tape.leaf(Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap());
        let v = tape.leaf(Tensor::new(vec![3, 2], vec![3.0, 0.0, 0.0, 6.0, 3.0, 3.0]).unwrap());
        let out = multi_head_attention(&mut tape, q, k, v, 1, None, AttnKernel::Softmax).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 2.0).abs() < 1e-12);
        assert!((got[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_two_heads_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let lq = 3;
        let lk = 3;
        let d = 4;
        let heads = 2;
        let qd: Vec<f64> = (0..lq * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kd: Vec<f64> = (0..lk * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vd: Vec<f64> = (0..lk * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(vec![lq, d], qd.clone()).unwrap());
        let k = tape.leaf(Tensor::new(vec![lk, d], kd.clone()).unwrap());
        let v = tape.leaf(Tensor::new(vec![lk, d], vd.clone()).unwrap());
        let out = multi_head_attention(&mut tape, q, k, v, heads, None, AttnKernel::Softmax).unwrap();
        let got = tape.value(out).data();

        // explicit per-head computation
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut want = vec![0.0; lq * d];
        for h in 0..heads {
            for i in 0..lq {
                let mut scores = vec![0.0; lk];
                for (j, s) in scores.iter_mut().enumerate() {
                    for c in 0..dh {
                        *s += qd[i * d + h * dh + c] * kd[j * d + h * dh + c];
                    }
                    *s *= scale;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..lk {
                        acc += exps[j] / z * vd[j * d + h * dh + c];
                    }
                    want[i * d + h * dh + c] = acc;
                }
            }
        }
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let (mut tape, q) = tape_with(Tensor::<f64>::zeros(&[2, 6]));
        let k = tape.leaf(Tensor::zeros(&[2, 6]));
        let v = tape.leaf(Tensor::zeros(&[2, 6]));
        let r = multi_head_attention(&mut tape, q, k, v, 4, None, AttnKernel::Softmax);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let (mut tape, q) = tape_with(Tensor::new(vec![1, 2], vec![2.0f64, -1.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![2, 2], vec![5.0, 5.0, 0.1, -0.2]).unwrap());
        // first value row huge: if masked weight were nonzero the output moves
        let v = tape.leaf(Tensor::new(vec![2, 2], vec![1e6, 1e6, 1.0, 2.0]).unwrap());
        let mask = tape.constant(
            Tensor::new(vec![1, 2], vec![f64::NEG_INFINITY, 0.0]).unwrap(),
        );
        let out =
            multi_head_attention(&mut tape, q, k, v, 1, Some(mask), AttnKernel::Softmax).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_kernel_tracks_softmax_on_smooth_inputs() {
        // parity documented at ~10% relative error on smooth random inputs
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (l, d) = (6, 8);
        let q = Tensor::from_fn(&[l, d], |_| rng.gen_range(-0.25..0.25));
        let k = Tensor::from_fn(&[l, d], |_| rng.gen_range(-0.25..0.25));
        let v = Tensor::from_fn(&[l, d], |_| rng.gen_range(-1.0..1.0));
        let run = |kernel| {
            let mut tape = Tape::new();
            let qv = tape.leaf(q.clone());
            let kv = tape.leaf(k.clone());
            let vv = tape.leaf(v.clone());
            let out = multi_head_attention(&mut tape, qv, kv, vv, 2, None, kernel).unwrap();
            tape.value(out).clone()
        };
        let soft = run(AttnKernel::Softmax);
        let lin = run(AttnKernel::Linear);
        let num = soft.max_abs_diff(&lin);
        let den = soft.data().iter().map(|v: &f64| v.abs()).fold(0.0f64, f64::max);
        assert!(num / den < 0.25, "kernels diverged: {}", num / den);
    }

    #[test]
    fn pe_matches_closed_form() {
        let pe = sinusoidal_pe::<f64>(8, 6);
        for j in 0..6 {
            let want = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert!((pe.at2(0, j) - want).abs() < 1e-12);
        }
        for pos in 0..8 {
            for j in 0..6 {
                let i2 = (j / 2 * 2) as f64;
                let angle = pos as f64 / 10000f64.powf(i2 / 6.0);
                let want = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                assert!((pe.at2(pos, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_layer_gradients_pass() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut init = Init::new(&mut store, &mut rng);
        init_encoder_layer(&mut init, "enc.0", 4, 8);
        let mut data_rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::from_fn(&[3, 4], |_| data_rng.gen_range(-1.0..1.0));

        // check gradient w.r.t. the input by treating x as the checked leaf
        let rep = grad_check(
            "encoder_layer",
            &[x],
            move |tape, vars| {
                // rebuild the layer inline on the provided tape
                let mut s2 = ParamStore::<f64>::new();
                let mut r2 = ChaCha8Rng::seed_from_u64(41);
                let mut i2 = Init::new(&mut s2, &mut r2);
                init_encoder_layer(&mut i2, "enc.0", 4, 8);
                let mut g = Graph::new(&mut s2, Mode::Eval, 0, 0.0);
                std::mem::swap(&mut g.tape, tape);
                let y = encoder_layer(&mut g, "enc.0", vars[0], 2, None, AttnKernel::Softmax)?;
                let loss = g.tape.sum_all(y);
                std::mem::swap(&mut g.tape, tape);
                Ok(loss)
            },
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed, "{rep}");
    }
}
