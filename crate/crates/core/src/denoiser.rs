//! The decomposition denoiser.
//!
//! Given a noisy series x_t and its diffusion step t, the network predicts
//! the clean signal directly as x0_hat = trend + season + residual:
//!
//! * each decoder block contributes a polynomial trend term C * coef + mean,
//!   where C holds powers of the normalized time index and coef comes from
//!   two learned maps (features h->d, time tau->(p+1));
//! * each block also contributes a seasonal term rebuilt from the top-K
//!   amplitude bins of a one-sided DFT of its h->d projection (DC excluded;
//!   bin choice is a stop-gradient decision, gradients flow only through the
//!   kept coefficients);
//! * the last block's h->d projection is the unconstrained residual.
//!
//! The backbone is a transformer encoder over the embedded noisy sequence
//! plus decoder blocks with self- and cross-attention; the step t enters
//! through adaptive layer norms fed by a sinusoidal embedding. The three
//! parts are summed on the tape, so the composition identity is exact.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::nn::{
    sinusoidal_embedding, AdaLayerNorm, FeedForward, Linear, MultiHeadAttention, ParamSet,
};
use crate::rng::{self, stream};
use crate::tensor::{n_bins, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Window length.
    pub tau: usize,
    /// Number of channels.
    pub dim: usize,
    /// Model width; must equal n_heads * head_dim.
    pub hidden: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Polynomial trend degree p.
    pub trend_degree: usize,
    /// Fourier bins kept per block and channel.
    pub top_k: usize,
    /// Diffusion chain length T.
    pub timesteps: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.tau < 4 {
            return fail(format!("tau {} too short (need >= 4)", self.tau));
        }
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return fail(format!("hidden {} must be positive and even", self.hidden));
        }
        if self.hidden != self.n_heads * self.head_dim {
            return fail(format!(
                "hidden {} != n_heads {} * head_dim {}",
                self.hidden, self.n_heads, self.head_dim
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.trend_degree == 0 {
            return fail("trend_degree must be >= 1".into());
        }
        if self.top_k == 0 || self.top_k > self.tau / 2 + 1 {
            return fail(format!(
                "top_k {} outside 1..={}",
                self.top_k,
                self.tau / 2 + 1
            ));
        }
        if self.timesteps == 0 {
            return fail("timesteps must be >= 1".into());
        }
        Ok(())
    }
}

/// The three additive parts of a prediction plus their sum, as values.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub trend: Tensor,
    pub season: Tensor,
    pub residual: Tensor,
    pub x0hat: Tensor,
}

/// Same decomposition as tape handles, for callers that differentiate
/// through the prediction.
#[derive(Debug, Clone, Copy)]
pub struct DecompositionVars {
    pub trend: Var,
    pub season: Var,
    pub residual: Var,
    pub x0hat: Var,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm_attn: AdaLayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: AdaLayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm_self: AdaLayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: AdaLayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: AdaLayerNorm,
    ffn: FeedForward,
    trend_feat: Linear,
    trend_time: usize,
    seas_proj: Linear,
}

#[derive(Debug, Clone)]
struct Arch {
    tok_emb: Linear,
    pos_emb: usize,
    step_mlp: Linear,
    encoder: Vec<EncoderBlock>,
    enc_final: AdaLayerNorm,
    decoder: Vec<DecoderBlock>,
    out_proj: Linear,
}

pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamSet,
    arch: Arch,
    /// tau x (p+1) Vandermonde block of normalized time powers; fixed.
    poly_basis: Tensor,
}

/// Powers of the normalized time index: C[j][i] = (j/tau)^i.
pub fn poly_basis(tau: usize, degree: usize) -> Tensor {
    Tensor::from_fn_2d(tau, degree + 1, |j, i| (j as f64 / tau as f64).powi(i as i32))
}

impl DenoiserModel {
    /// Builds a model with fan-in scaled uniform initialization drawn from
    /// the init sub-stream of `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<DenoiserModel> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut r = rng::substream(seed, stream::INIT, 0);
        let h = config.hidden;
        let d = config.dim;
        let tau = config.tau;
        let p = config.trend_degree;
        let ffn_inner = 4 * h;

        let tok_emb = Linear::new(&mut ps, &mut r, "tok_emb", d, h, true);
        let pos_emb = ps.add("pos_emb", rng::uniform_tensor(&mut r, &[tau, h], -0.02, 0.02));
        let step_mlp = Linear::new(&mut ps, &mut r, "step_mlp", h, h, true);

        let mut encoder = Vec::with_capacity(config.enc_layers);
        for i in 0..config.enc_layers {
            let base = format!("enc.{i}");
            encoder.push(EncoderBlock {
                norm_attn: AdaLayerNorm::new(&mut ps, &mut r, &format!("{base}.norm_attn"), h),
                attn: MultiHeadAttention::new(
                    &mut ps,
                    &mut r,
                    &format!("{base}.attn"),
                    config.n_heads,
                    config.head_dim,
                ),
                norm_ffn: AdaLayerNorm::new(&mut ps, &mut r, &format!("{base}.norm_ffn"), h),
                ffn: FeedForward::new(&mut ps, &mut r, &format!("{base}.ffn"), h, ffn_inner),
            });
        }
        let enc_final = AdaLayerNorm::new(&mut ps, &mut r, "enc.final_norm", h);

        let mut decoder = Vec::with_capacity(config.dec_layers);
        for i in 0..config.dec_layers {
            let base = format!("dec.{i}");
            decoder.push(DecoderBlock {
                norm_self: AdaLayerNorm::new(&mut ps, &mut r, &format!("{base}.norm_self"), h),
                self_attn: MultiHeadAttention::new(
                    &mut ps,
                    &mut r,
                    &format!("{base}.self_attn"),
                    config.n_heads,
                    config.head_dim,
                ),
                norm_cross: AdaLayerNorm::new(&mut ps, &mut r, &format!("{base}.norm_cross"), h),
                cross_attn: MultiHeadAttention::new(
                    &mut ps,
                    &mut r,
                    &format!("{base}.cross_attn"),
                    config.n_heads,
                    config.head_dim,
                ),
                norm_ffn: AdaLayerNorm::new(&mut ps, &mut r, &format!("{base}.norm_ffn"), h),
                ffn: FeedForward::new(&mut ps, &mut r, &format!("{base}.ffn"), h, ffn_inner),
                trend_feat: Linear::new(&mut ps, &mut r, &format!("{base}.trend.feat"), h, d, true),
                trend_time: ps.add(
                    format!("{base}.trend.time.w"),
                    crate::nn::init_fan_in(&mut r, p + 1, tau, tau),
                ),
                seas_proj: Linear::new(&mut ps, &mut r, &format!("{base}.seas"), h, d, true),
            });
        }
        let out_proj = Linear::new(&mut ps, &mut r, "out_proj", h, d, true);

        Ok(DenoiserModel {
            poly_basis: poly_basis(tau, p),
            config,
            params: ps,
            arch: Arch { tok_emb, pos_emb, step_mlp, encoder, enc_final, decoder, out_proj },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn total_params(&self) -> usize {
        self.params.total_params()
    }

    /// Records the full prediction for one window on `tape`. `bound` must
    /// come from `self.params().bind(tape)`; `x_t` is a tau x d handle.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x_t: Var,
        t: usize,
    ) -> Result<DecompositionVars> {
        let cfg = &self.config;
        if tape.value(x_t).shape() != [cfg.tau, cfg.dim] {
            return Err(CoreError::shape(
                "denoiser forward",
                format!("x_t {:?}, want [{}, {}]", tape.value(x_t).shape(), cfg.tau, cfg.dim),
            ));
        }
        if t == 0 || t > cfg.timesteps {
            return Err(CoreError::OutOfRange {
                context: "denoiser forward".into(),
                detail: format!("t={t} outside 1..={}", cfg.timesteps),
            });
        }

        // Step conditioning vector shared by every adaptive norm.
        let emb = tape.constant(sinusoidal_embedding(t, cfg.hidden)?);
        let step = self.arch.step_mlp.forward(tape, bound, emb)?;
        let step = tape.gelu(step)?;

        // Token + learned position embedding of the noisy sequence.
        let tok = self.arch.tok_emb.forward(tape, bound, x_t)?;
        let hidden = tape.add(tok, bound[self.arch.pos_emb])?;

        // Encoder over the full sequence (pre-norm residual blocks).
        let mut enc = hidden;
        for block in &self.arch.encoder {
            let n = block.norm_attn.forward(tape, bound, enc, step)?;
            let a = block.attn.forward(tape, bound, n, n)?;
            enc = tape.add(enc, a)?;
            let n = block.norm_ffn.forward(tape, bound, enc, step)?;
            let f = block.ffn.forward(tape, bound, n)?;
            enc = tape.add(enc, f)?;
        }
        let enc = self.arch.enc_final.forward(tape, bound, enc, step)?;

        // Decoder stream; each block adds one trend and one seasonal term.
        let mut w = hidden;
        let mut trend_total: Option<Var> = None;
        let mut season_total: Option<Var> = None;
        let basis = tape.constant(self.poly_basis.clone());
        for block in &self.arch.decoder {
            let n = block.norm_self.forward(tape, bound, w, step)?;
            let a = block.self_attn.forward(tape, bound, n, n)?;
            w = tape.add(w, a)?;
            let n = block.norm_cross.forward(tape, bound, w, step)?;
            let a = block.cross_attn.forward(tape, bound, n, enc)?;
            w = tape.add(w, a)?;
            let n = block.norm_ffn.forward(tape, bound, w, step)?;
            let f = block.ffn.forward(tape, bound, n)?;
            w = tape.add(w, f)?;

            let trend_i = trend_layer(tape, w, &block.trend_feat, bound[block.trend_time], basis, bound)?;
            trend_total = Some(match trend_total {
                Some(acc) => tape.add(acc, trend_i)?,
                None => trend_i,
            });

            let s_in = block.seas_proj.forward(tape, bound, w)?;
            let season_i = fourier_layer(tape, s_in, cfg.top_k)?;
            season_total = Some(match season_total {
                Some(acc) => tape.add(acc, season_i)?,
                None => season_i,
            });
        }

        let trend = trend_total.expect("at least one decoder block");
        let season = season_total.expect("at least one decoder block");
        let residual = self.arch.out_proj.forward(tape, bound, w)?;
        let ts = tape.add(trend, season)?;
        let x0hat = tape.add(ts, residual)?;

        if !tape.value(x0hat).is_finite() {
            return Err(CoreError::NonFinite {
                context: "denoiser forward".into(),
                diag: Some(format!("t={t}")),
            });
        }
        Ok(DecompositionVars { trend, season, residual, x0hat })
    }

    /// Untracked prediction: runs the forward pass on a scratch tape and
    /// returns the decomposition values.
    pub fn predict(&self, x_t: &Tensor, t: usize) -> Result<Decomposition> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.input(x_t.clone());
        let vars = self.forward(&mut tape, &bound, x, t)?;
        Ok(Decomposition {
            trend: tape.value(vars.trend).clone(),
            season: tape.value(vars.season).clone(),
            residual: tape.value(vars.residual).clone(),
            x0hat: tape.value(vars.x0hat).clone(),
        })
    }
}

/// Polynomial trend from a coefficient block and broadcast block mean:
/// basis (tau x (p+1)) * coef ((p+1) x d) + mean (1 x d over all rows).
pub fn poly_trend(tape: &mut Tape, basis: Var, coef: Var, block_mean: Var) -> Result<Var> {
    let poly = tape.matmul(basis, coef)?;
    let tau = tape.value(basis).rows();
    let mean = tape.broadcast_row(block_mean, tau)?;
    tape.add(poly, mean)
}

/// Full trend head of one decoder block: project the block output h->d,
/// derive the coefficient block through the learned time map, and add back
/// the projected output's time mean.
fn trend_layer(
    tape: &mut Tape,
    w: Var,
    feat: &Linear,
    time_w: Var,
    basis: Var,
    bound: &[Var],
) -> Result<Var> {
    let y = feat.forward(tape, bound, w)?;
    let coef = tape.matmul(time_w, y)?;
    let mean = tape.mean_rows(y)?;
    poly_trend(tape, basis, coef, mean)
}

/// Band-limited reconstruction: keep the `k` largest-amplitude one-sided
/// DFT bins per channel (DC excluded, ties to the lower bin) and invert.
/// Bin choice reads current values only; gradients flow through the kept
/// coefficients.
pub fn fourier_layer(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let (tau, d) = {
        let s = tape.value(x).shape();
        if s.len() != 2 {
            return Err(CoreError::shape("fourier_layer", format!("{:?}", s)));
        }
        (s[0], s[1])
    };
    if k == 0 {
        return Err(CoreError::InvalidConfig("fourier_layer: k must be >= 1".into()));
    }
    let (re, im) = tape.rdft(x)?;
    let bins = n_bins(tau);
    let keep = select_top_bins(tape.value(re), tape.value(im), k);
    let mask = Tensor::from_fn_2d(bins, d, |b, c| if keep[c].contains(&b) { 1.0 } else { 0.0 });
    let mask = tape.constant(mask);
    let re_m = tape.mul(re, mask)?;
    let im_m = tape.mul(im, mask)?;
    tape.irdft(re_m, im_m, tau)
}

/// Per channel, the candidate bins 1..bins ranked by amplitude (descending,
/// ties to the lower index), truncated to `k`.
fn select_top_bins(re: &Tensor, im: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let bins = re.rows();
    let d = re.cols();
    let mut keep = Vec::with_capacity(d);
    for c in 0..d {
        let mut cand: Vec<(f64, usize)> = (1..bins)
            .map(|b| (re.get(b, c).hypot(im.get(b, c)), b))
            .collect();
        cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        cand.truncate(k.min(cand.len()));
        keep.push(cand.into_iter().map(|(_, b)| b).collect());
    }
    keep
}

// ---- checkpoint serialization ----------------------------------------

pub const CHECKPOINT_FORMAT: &str = "tsdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format: String,
    pub version: u32,
    pub config: DenoiserConfig,
    pub params: Vec<NamedTensor>,
    /// Opaque optimizer/loop state written by the trainer; absent on
    /// inference-only checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<serde_json::Value>,
}

impl DenoiserModel {
    pub fn to_checkpoint(&self, train_state: Option<serde_json::Value>) -> CheckpointFile {
        let params = self
            .params
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params,
            train_state,
        }
    }

    pub fn save(&self, path: &std::path::Path, train_state: Option<serde_json::Value>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, &self.to_checkpoint(train_state))?;
        use std::io::Write;
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint; returns the model and any
    /// training state it carried.
    pub fn from_checkpoint(ckpt: CheckpointFile) -> Result<(DenoiserModel, Option<serde_json::Value>)> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(CoreError::Checkpoint(format!("unknown format tag {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "version {} unsupported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        let mut model = DenoiserModel::new(ckpt.config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(CoreError::Checkpoint(format!(
                "parameter count mismatch: file has {}, model wants {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (i, nt) in ckpt.params.into_iter().enumerate() {
            if model.params.name(i) != nt.name {
                return Err(CoreError::Checkpoint(format!(
                    "parameter {} named {:?}, expected {:?}",
                    i,
                    nt.name,
                    model.params.name(i)
                )));
            }
            if model.params.tensor(i).shape() != nt.shape.as_slice() {
                return Err(CoreError::Checkpoint(format!(
                    "parameter {:?} shape {:?}, expected {:?}",
                    nt.name,
                    nt.shape,
                    model.params.tensor(i).shape()
                )));
            }
            model.params.set_tensor(i, Tensor::from_vec(&nt.shape, nt.data)?);
        }
        Ok((model, ckpt.train_state))
    }

    pub fn load(path: &std::path::Path) -> Result<(DenoiserModel, Option<serde_json::Value>)> {
        let file = std::fs::File::open(path)?;
        let ckpt: CheckpointFile = serde_json::from_reader(std::io::BufReader::new(file))?;
        DenoiserModel::from_checkpoint(ckpt)
    }
}
