//! Network building blocks on top of the tape: named parameter storage,
//! linear maps, adaptive layer norm conditioned on the diffusion step,
//! multi-head attention, feed-forward blocks, and a GRU cell for the
//! evaluation models.
//!
//! Layers hold indices into a [`ParamSet`] rather than tensors. A forward
//! pass first binds every parameter onto a fresh tape (`ParamSet::bind`),
//! then layers look their operands up in that binding. Parameter creation
//! order is fixed by construction order, which keeps initialization,
//! checkpoints, and optimizer state aligned.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a named tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.clone());
        self.tensors.push(tensor);
        let id = self.tensors.len() - 1;
        self.index.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn set_tensor(&mut self, i: usize, t: Tensor) {
        assert_eq!(self.tensors[i].shape(), t.shape(), "parameter shape change");
        self.tensors[i] = t;
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter on a tape, in storage order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.input(t.clone())).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }
}

/// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    rng::uniform_tensor(rng, &[rows, cols], -bound, bound)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Linear {
        assert!(fan_in > 0 && fan_out > 0, "linear dims must be positive");
        let w = ps.add(format!("{name}.w"), init_fan_in(rng, fan_in, fan_out, fan_in));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.w])?;
        match self.b {
            Some(b) => tape.add_row(y, bound[b]),
            None => Ok(y),
        }
    }
}

/// Layer norm whose gain and bias are produced from the diffusion-step
/// embedding: out = a_t * norm(x) + b_t with (a_t, b_t) = proj(step_emb).
/// The projection bias starts at (1, 0) so the layer opens as a plain norm.
#[derive(Debug, Clone)]
pub struct AdaLayerNorm {
    proj: Linear,
    width: usize,
}

impl AdaLayerNorm {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, width: usize) -> AdaLayerNorm {
        let proj = Linear::new(ps, rng, &format!("{name}.proj"), width, 2 * width, true);
        let mut bias = vec![0.0; 2 * width];
        bias[..width].fill(1.0);
        let b = proj.b.expect("adaln projection has a bias");
        ps.set_tensor(b, Tensor::from_vec(&[1, 2 * width], bias).expect("adaln bias"));
        AdaLayerNorm { proj, width }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, step_emb: Var) -> Result<Var> {
        let ab = self.proj.forward(tape, bound, step_emb)?;
        let a = tape.slice_cols(ab, 0, self.width)?;
        let b = tape.slice_cols(ab, self.width, self.width)?;
        tape.layer_norm(x, a, b, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_heads: usize,
        head_dim: usize,
    ) -> MultiHeadAttention {
        let h = n_heads * head_dim;
        MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), h, h, true),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), h, h, true),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), h, h, true),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), h, h, true),
            n_heads,
            head_dim,
        }
    }

    /// Queries come from `xq`, keys and values from `xkv`; self-attention
    /// passes the same handle twice.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], xq: Var, xkv: Var) -> Result<Var> {
        let q = self.wq.forward(tape, bound, xq)?;
        let k = self.wk.forward(tape, bound, xkv)?;
        let v = self.wv.forward(tape, bound, xkv)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for hd in 0..self.n_heads {
            let start = hd * self.head_dim;
            let qh = tape.slice_cols(q, start, self.head_dim)?;
            let kh = tape.slice_cols(k, start, self.head_dim)?;
            let vh = tape.slice_cols(v, start, self.head_dim)?;
            heads.push(tape.softmax_attention(qh, kh, vh, scale)?);
        }
        let cat = tape.concat_cols(&heads)?;
        self.wo.forward(tape, bound, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        inner: usize,
    ) -> FeedForward {
        FeedForward {
            lin1: Linear::new(ps, rng, &format!("{name}.lin1"), width, inner, true),
            lin2: Linear::new(ps, rng, &format!("{name}.lin2"), inner, width, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let h = self.lin1.forward(tape, bound, x)?;
        let h = tape.gelu(h)?;
        self.lin2.forward(tape, bound, h)
    }
}

/// Sinusoidal embedding of a diffusion step: interleaved sin/cos over a
/// geometric frequency ladder. Deterministic in (t, dim).
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(CoreError::InvalidConfig(format!(
            "sinusoidal embedding dim must be positive and even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10_000f64.ln()).exp();
        let arg = t as f64 * freq;
        data[2 * i] = arg.sin();
        data[2 * i + 1] = arg.cos();
    }
    Tensor::from_vec(&[1, dim], data)
}

/// Gated recurrent cell; gate layout [reset | update | candidate].
#[derive(Debug, Clone)]
pub struct GruCell {
    wx: Linear,
    wh: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> GruCell {
        GruCell {
            wx: Linear::new(ps, rng, &format!("{name}.wx"), input, 3 * hidden, true),
            wh: Linear::new(ps, rng, &format!("{name}.wh"), hidden, 3 * hidden, true),
            hidden,
        }
    }

    /// One step: x is batch x input, h is batch x hidden.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, h: Var) -> Result<Var> {
        let gx = self.wx.forward(tape, bound, x)?;
        let gh = self.wh.forward(tape, bound, h)?;
        let hsize = self.hidden;

        let rx = tape.slice_cols(gx, 0, hsize)?;
        let rh = tape.slice_cols(gh, 0, hsize)?;
        let r = tape.add(rx, rh)?;
        let r = tape.sigmoid(r)?;

        let zx = tape.slice_cols(gx, hsize, hsize)?;
        let zh = tape.slice_cols(gh, hsize, hsize)?;
        let z = tape.add(zx, zh)?;
        let z = tape.sigmoid(z)?;

        let nx = tape.slice_cols(gx, 2 * hsize, hsize)?;
        let nh = tape.slice_cols(gh, 2 * hsize, hsize)?;
        let gated = tape.mul(r, nh)?;
        let n = tape.add(nx, gated)?;
        let n = tape.tanh(n)?;

        // h' = (1 - z) * n + z * h
        let batch = tape.value(x).rows();
        let ones = tape.constant(Tensor::filled(&[batch, hsize], 1.0));
        let one_minus_z = tape.sub(ones, z)?;
        let a = tape.mul(one_minus_z, n)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }
}
