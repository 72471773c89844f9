//! Local multi-head channel self-attention block.
//!
//! Queries and keys come from average- and max-pooled copies of the input,
//! values from a convolution followed by 3×3 average pooling. The spatial
//! grid is cut into `n` contiguous sections; every head attends over
//! channels using only its own section. Queries and keys of a head share one
//! dense embedding. Logits are divided by `d^(g+T_i)`, where `T_i ∈ (0,1)`
//! is a learned per-channel factor computed from the mean score of row `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pool size of the value path; fixed regardless of `pool`.
pub const VALUE_POOL: usize = 3;

/// Hyperparameters of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LhcConfig {
    /// Number of local heads `n`.
    pub heads: usize,
    /// Embedding dimension `d` of every head.
    pub dim: usize,
    /// Query/key pool size `p`.
    pub pool: usize,
    /// Value convolution kernel size `s`.
    pub kernel: usize,
    /// Non-negative scaling constant `g`.
    pub scale: f64,
    /// `(H, W, C)` of the input feature map.
    pub input_shape: [usize; 3],
}

impl LhcConfig {
    pub fn new(heads: usize, dim: usize, pool: usize, scale: f64, kernel: usize, input_shape: [usize; 3]) -> Self {
        Self {
            heads,
            dim,
            pool,
            kernel,
            scale,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.input_shape;
        if self.heads == 0 || self.dim == 0 || self.pool == 0 || self.kernel == 0 {
            return Err(Error::config("heads, dim, pool and kernel must be at least 1"));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config(format!("empty input shape {:?}", self.input_shape)));
        }
        if (h * w) % self.heads != 0 {
            return Err(Error::config(format!(
                "H*W = {} must be divisible by the head count {}",
                h * w,
                self.heads
            )));
        }
        if self.pool.is_multiple_of(2) || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "pool ({}) and kernel ({}) must be odd",
                self.pool, self.kernel
            )));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!("scale must be finite and >= 0, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.input_shape[2]
    }

    /// Columns per head, `H·W/n`.
    pub fn head_len(&self) -> usize {
        self.input_shape[0] * self.input_shape[1] / self.heads
    }

    /// `n·((H·W/n)·d + d) + (C·C + C) + (s·s·C·C + C)`.
    pub fn param_count(&self) -> u64 {
        let (n, d, m) = (self.heads as u64, self.dim as u64, self.head_len() as u64);
        let c = self.channels() as u64;
        let s = self.kernel as u64;
        n * (m * d + d) + (c * c + c) + (s * s * c * c + c)
    }
}

/// Learnable parameters of one block, generic over storage so the same
/// layout holds tensors, tape handles or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LhcParams<T> {
    /// Per-head embedding matrices `[H·W/n, d]`.
    pub w1: Vec<T>,
    /// Per-head embedding biases `[d]`.
    pub b1: Vec<T>,
    /// Scaling layer `[C, C]`, shared by all heads.
    pub w2: T,
    /// Scaling bias `[C]`.
    pub b2: T,
    /// Value convolution kernel `[s, s, C, C]`.
    pub conv_kernel: T,
    /// Value convolution bias `[C]`.
    pub conv_bias: T,
}

pub type LhcWeights = LhcParams<Tensor>;

impl<T> LhcParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LhcParams<U> {
        // visit in canonical order so stateful closures line up with `named`
        let (mut w1, mut b1) = (Vec::with_capacity(self.w1.len()), Vec::with_capacity(self.b1.len()));
        for (w, b) in self.w1.iter().zip(&self.b1) {
            w1.push(f(w));
            b1.push(f(b));
        }
        LhcParams {
            w1,
            b1,
            w2: f(&self.w2),
            b2: f(&self.b2),
            conv_kernel: f(&self.conv_kernel),
            conv_bias: f(&self.conv_bias),
        }
    }

    /// Parameters in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::with_capacity(2 * self.w1.len() + 4);
        for (h, (w, b)) in self.w1.iter().zip(&self.b1).enumerate() {
            out.push((format!("head{h}.w1"), w));
            out.push((format!("head{h}.b1"), b));
        }
        out.push(("w2".into(), &self.w2));
        out.push(("b2".into(), &self.b2));
        out.push(("conv.kernel".into(), &self.conv_kernel));
        out.push(("conv.bias".into(), &self.conv_bias));
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.named().into_iter().map(|(_, t)| t)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let mut out: Vec<&mut T> = Vec::with_capacity(2 * self.w1.len() + 4);
        for (w, b) in self.w1.iter_mut().zip(self.b1.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.w2);
        out.push(&mut self.b2);
        out.push(&mut self.conv_kernel);
        out.push(&mut self.conv_bias);
        out.into_iter()
    }
}

fn glorot<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::random_uniform(shape, -limit, limit, rng)
}

impl LhcWeights {
    /// Glorot-uniform matrices and kernel, zero biases, fully determined by `seed`.
    pub fn init(cfg: &LhcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, c, s) = (cfg.head_len(), cfg.dim, cfg.channels(), cfg.kernel);
        let w1 = (0..cfg.heads).map(|_| glorot(vec![m, d], m, d, &mut rng)).collect();
        let w2 = glorot(vec![c, c], c, c, &mut rng);
        let conv_kernel = glorot(vec![s, s, c, c], s * s * c, s * s * c, &mut rng);
        Ok(Self {
            w1,
            b1: vec![Tensor::zeros([d]); cfg.heads],
            w2,
            b2: Tensor::zeros([c]),
            conv_kernel,
            conv_bias: Tensor::zeros([c]),
        })
    }

    pub fn zeros(cfg: &LhcConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, d, c, s) = (cfg.head_len(), cfg.dim, cfg.channels(), cfg.kernel);
        Ok(Self {
            w1: vec![Tensor::zeros([m, d]); cfg.heads],
            b1: vec![Tensor::zeros([d]); cfg.heads],
            w2: Tensor::zeros([c, c]),
            b2: Tensor::zeros([c]),
            conv_kernel: Tensor::zeros([s, s, c, c]),
            conv_bias: Tensor::zeros([c]),
        })
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check(&self, cfg: &LhcConfig) -> Result<()> {
        let expected = Self::zeros(cfg)?;
        if self.w1.len() != cfg.heads || self.b1.len() != cfg.heads {
            return Err(Error::config(format!(
                "expected {} heads, weights hold {}",
                cfg.heads,
                self.w1.len()
            )));
        }
        for ((name, have), want) in self.named().into_iter().zip(expected.iter()) {
            if have.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?}, expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> u64 {
        self.iter().map(|t| t.len() as u64).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> LhcParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_const(&self, tape: &mut Tape) -> LhcParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// `Q = AvgPool_p(x)`, `K = MaxPool_p(x)`, `V = AvgPool_3(conv_s(x))`.
pub fn compute_qkv(
    tape: &mut Tape,
    x: Var,
    cfg: &LhcConfig,
    kernel: Var,
    bias: Var,
) -> Result<(Var, Var, Var)> {
    if tape.shape(x) != cfg.input_shape {
        return Err(Error::shape("compute_qkv", tape.shape(x), &cfg.input_shape));
    }
    let q = tape.avg_pool2d_same(x, cfg.pool)?;
    let k = tape.max_pool2d_same(x, cfg.pool)?;
    let conv = tape.conv2d_same(x, kernel, bias)?;
    let v = tape.avg_pool2d_same(conv, VALUE_POOL)?;
    Ok((q, k, v))
}

/// `[H,W,C] → n × [C, H·W/n]`, contiguous blocks of the row-major spatial axis.
pub fn split_heads(tape: &mut Tape, t: Var, n: usize) -> Result<Vec<Var>> {
    let [h, w, _] = tape.value(t).dims3("split_heads")?;
    if n == 0 || (h * w) % n != 0 {
        return Err(Error::config(format!(
            "split_heads: H*W = {} not divisible by n = {n}",
            h * w
        )));
    }
    let m = tape.to_channel_matrix(t)?;
    let len = h * w / n;
    (0..n).map(|i| tape.slice_cols(m, i * len, len)).collect()
}

/// Inverse of [`split_heads`].
pub fn merge_heads(tape: &mut Tape, heads: &[Var], h: usize, w: usize) -> Result<Var> {
    let first = *heads.first().ok_or(Error::Empty("merge_heads"))?;
    let shape = tape.shape(first).to_vec();
    for &v in heads {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::shape("merge_heads", &shape, tape.shape(v)));
        }
    }
    let joined = tape.concat_cols(heads)?;
    tape.from_channel_matrix(joined, h, w)
}

/// Shared embedding: `q̃ = q·w1 + b1`, `k̃ = k·w1 + b1`.
pub fn embed_qk(tape: &mut Tape, q: Var, k: Var, w1: Var, b1: Var) -> Result<(Var, Var)> {
    let qw = tape.matmul(q, w1)?;
    let qe = tape.add_row_bias(qw, b1)?;
    let kw = tape.matmul(k, w1)?;
    let ke = tape.add_row_bias(kw, b1)?;
    Ok((qe, ke))
}

/// `S = q̃ · k̃ᵀ`.
pub fn attention_scores(tape: &mut Tape, q_emb: Var, k_emb: Var) -> Result<Var> {
    if tape.shape(q_emb) != tape.shape(k_emb) {
        return Err(Error::shape("attention_scores", tape.shape(q_emb), tape.shape(k_emb)));
    }
    let kt = tape.transpose(k_emb)?;
    tape.matmul(q_emb, kt)
}

/// Returns `(T, N)` with `T = σ(mean_rows(S)·w2 + b2)` and
/// `N_ij = S_ij · exp(−(g + T_i)·ln d)`.
pub fn dynamic_scaling(
    tape: &mut Tape,
    scores: Var,
    w2: Var,
    b2: Var,
    dim: usize,
    scale: f64,
) -> Result<(Var, Var)> {
    if dim < 2 {
        return Err(Error::config(format!(
            "dynamic scaling needs an embedding dimension of at least 2, got {dim}"
        )));
    }
    let [c, c2] = tape.value(scores).dims2("dynamic_scaling")?;
    if c != c2 {
        return Err(Error::shape("dynamic_scaling", tape.shape(scores), &[c, c]));
    }
    let mean = tape.mean_rows(scores)?;
    let row = tape.reshape(mean, [1, c])?;
    let lin = tape.matmul(row, w2)?;
    let lin = tape.reshape(lin, [c])?;
    let lin = tape.add(lin, b2)?;
    let t = tape.sigmoid(lin);
    let ln_d = (dim as f64).ln();
    let expo = tape.add_scalar(t, scale);
    let expo = tape.scale(expo, -ln_d);
    let factor = tape.exp(expo);
    let n = tape.scale_rows(scores, factor)?;
    Ok((t, n))
}

/// Returns `(W, A)` with `W = softmax_rows(N)` and `A = W · v`.
pub fn head_attention(tape: &mut Tape, normalized: Var, v: Var) -> Result<(Var, Var)> {
    let w = tape.softmax_rows(normalized);
    let a = tape.matmul(w, v)?;
    Ok((w, a))
}

/// Intermediate values of one block evaluation.
#[derive(Debug, Clone)]
pub struct LhcTrace {
    /// Merged attention output before the residual sum.
    pub branch: Var,
    /// Per-head outputs `A_h`, `[C, H·W/n]`.
    pub heads: Vec<Var>,
    /// Per-head attention weights `W_h`.
    pub attention: Vec<Var>,
    /// Per-head scaling factors `T_h`.
    pub scaling: Vec<Var>,
    /// Per-head raw scores `S_h`.
    pub scores: Vec<Var>,
}

/// Attention branch without the residual connection.
pub fn lhc_branch(tape: &mut Tape, x: Var, cfg: &LhcConfig, p: &LhcParams<Var>) -> Result<LhcTrace> {
    cfg.validate()?;
    if p.w1.len() != cfg.heads || p.b1.len() != cfg.heads {
        return Err(Error::config("parameter head count differs from config"));
    }
    let [h, w, _] = cfg.input_shape;
    let (q, k, v) = compute_qkv(tape, x, cfg, p.conv_kernel, p.conv_bias)?;
    let qs = split_heads(tape, q, cfg.heads)?;
    let ks = split_heads(tape, k, cfg.heads)?;
    let vs = split_heads(tape, v, cfg.heads)?;
    let mut trace = LhcTrace {
        branch: x,
        heads: Vec::with_capacity(cfg.heads),
        attention: Vec::with_capacity(cfg.heads),
        scaling: Vec::with_capacity(cfg.heads),
        scores: Vec::with_capacity(cfg.heads),
    };
    for i in 0..cfg.heads {
        let (qe, ke) = embed_qk(tape, qs[i], ks[i], p.w1[i], p.b1[i])?;
        let s = attention_scores(tape, qe, ke)?;
        let (t, n) = dynamic_scaling(tape, s, p.w2, p.b2, cfg.dim, cfg.scale)?;
        let (wts, a) = head_attention(tape, n, vs[i])?;
        trace.scores.push(s);
        trace.scaling.push(t);
        trace.attention.push(wts);
        trace.heads.push(a);
    }
    trace.branch = merge_heads(tape, &trace.heads, h, w)?;
    Ok(trace)
}

/// `y = x + LHC(x)`.
pub fn lhc_forward(tape: &mut Tape, x: Var, cfg: &LhcConfig, p: &LhcParams<Var>) -> Result<Var> {
    let trace = lhc_branch(tape, x, cfg, p)?;
    tape.add(x, trace.branch)
}

/// A configured block with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LhcBlock {
    pub config: LhcConfig,
    pub weights: LhcWeights,
}

/// Plain-tensor view of one evaluation.
#[derive(Debug, Clone)]
pub struct LhcOutputs {
    pub output: Tensor,
    pub branch: Tensor,
    pub heads: Vec<Tensor>,
    pub attention: Vec<Tensor>,
    pub scaling: Vec<Tensor>,
    pub scores: Vec<Tensor>,
}

impl LhcBlock {
    pub fn new(config: LhcConfig, seed: u64) -> Result<Self> {
        let weights = LhcWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    pub fn with_weights(config: LhcConfig, weights: LhcWeights) -> Result<Self> {
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    /// `x + LHC(x)` evaluated on a private tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.evaluate(x)?.output)
    }

    pub fn evaluate(&self, x: &Tensor) -> Result<LhcOutputs> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.weights.bind_const(&mut tape);
        let trace = lhc_branch(&mut tape, xv, &self.config, &p)?;
        let y = tape.add(xv, trace.branch)?;
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok(LhcOutputs {
            output: tape.value(y).clone(),
            branch: tape.value(trace.branch).clone(),
            heads: grab(&trace.heads),
            attention: grab(&trace.attention),
            scaling: grab(&trace.scaling),
            scores: grab(&trace.scores),
        })
    }
}
