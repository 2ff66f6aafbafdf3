//! Single-stack multi-head self-attention encoder: residual + layer norm
//! (post-norm), position-wise FFN with a 1-Lipschitz activation, mean pooling
//! and a task head. The forward pass records every intermediate needed for
//! the manual backward pass in [`crate::grad`].

use crate::error::{Error, Result};
use crate::linalg::{self, matmul, softmax_rows, Matrix, RngStream};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Layer-norm smoothing used everywhere in the encoder.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification { classes: usize },
    Forecast { horizon: usize },
}

impl HeadKind {
    pub fn out_dim(&self) -> usize {
        match self {
            HeadKind::Classification { classes } => *classes,
            HeadKind::Forecast { horizon } => *horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token count (time steps under per-timestep tokenization).
    pub n: usize,
    /// Token dimension (channel count); must be >= 2 and divisible by heads.
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub positional_encoding: bool,
    pub activation: Activation,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Unsupported(format!(
                "token dimension d must be >= 2 (got {}); the d/(d-1) factor is undefined at d=1",
                self.d
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide token dimension {}",
                self.heads, self.d
            )));
        }
        if self.n == 0 || self.layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("n, layers and ffn_hidden must be >= 1".into()));
        }
        if self.head.out_dim() == 0 {
            return Err(Error::Config("head output dimension must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Weights of one encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
    pub w1: Matrix,
    /// 1 x ffn_hidden
    pub b1: Matrix,
    pub w2: Matrix,
    /// 1 x d
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub layers: Vec<LayerWeights>,
    pub head_w: Matrix,
    /// 1 x out_dim
    pub head_b: Matrix,
}

impl ModelWeights {
    /// All-zero weights with shapes matching `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let dh = cfg.head_dim();
        let layer = |_li: usize| LayerWeights {
            wq: (0..cfg.heads).map(|_| Matrix::zeros(cfg.d, dh)).collect(),
            wk: (0..cfg.heads).map(|_| Matrix::zeros(cfg.d, dh)).collect(),
            wv: (0..cfg.heads).map(|_| Matrix::zeros(cfg.d, dh)).collect(),
            wo: Matrix::zeros(cfg.d, cfg.d),
            w1: Matrix::zeros(cfg.d, cfg.ffn_hidden),
            b1: Matrix::zeros(1, cfg.ffn_hidden),
            w2: Matrix::zeros(cfg.ffn_hidden, cfg.d),
            b2: Matrix::zeros(1, cfg.d),
        };
        ModelWeights {
            layers: (0..cfg.layers).map(layer).collect(),
            head_w: Matrix::zeros(cfg.d, cfg.head.out_dim()),
            head_b: Matrix::zeros(1, cfg.head.out_dim()),
        }
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = ModelWeights::zeros(cfg);
        for ((name, a), (_, b)) in self.tensors().iter().zip(expect.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("weights tensor {name}"),
                    left: a.shape_string(),
                    right: b.shape_string(),
                });
            }
        }
        if self.layers.len() != cfg.layers {
            return Err(Error::ShapeMismatch {
                context: "weights layer count".into(),
                left: self.layers.len().to_string(),
                right: cfg.layers.to_string(),
            });
        }
        Ok(())
    }

    /// Named view of every tensor in the fixed serialization order:
    /// per layer `wq.h, wk.h, wv.h` for each head, then `wo, w1, b1, w2, b2`,
    /// and finally `head_w, head_b`.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (li, lw) in self.layers.iter().enumerate() {
            for h in 0..lw.wq.len() {
                out.push((format!("layer{li}.wq{h}"), &lw.wq[h]));
                out.push((format!("layer{li}.wk{h}"), &lw.wk[h]));
                out.push((format!("layer{li}.wv{h}"), &lw.wv[h]));
            }
            out.push((format!("layer{li}.wo"), &lw.wo));
            out.push((format!("layer{li}.w1"), &lw.w1));
            out.push((format!("layer{li}.b1"), &lw.b1));
            out.push((format!("layer{li}.w2"), &lw.w2));
            out.push((format!("layer{li}.b2"), &lw.b2));
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (li, lw) in self.layers.iter_mut().enumerate() {
            let heads = lw.wq.len();
            let (wqs, wks, wvs) = (lw.wq.iter_mut(), lw.wk.iter_mut(), lw.wv.iter_mut());
            let mut per_head: Vec<(String, &mut Matrix)> = Vec::with_capacity(heads * 3);
            for (h, ((q, k), v)) in wqs.zip(wks).zip(wvs).enumerate() {
                per_head.push((format!("layer{li}.wq{h}"), q));
                per_head.push((format!("layer{li}.wk{h}"), k));
                per_head.push((format!("layer{li}.wv{h}"), v));
            }
            out.extend(per_head);
            out.push((format!("layer{li}.wo"), &mut lw.wo));
            out.push((format!("layer{li}.w1"), &mut lw.w1));
            out.push((format!("layer{li}.b1"), &mut lw.b1));
            out.push((format!("layer{li}.w2"), &mut lw.w2));
            out.push((format!("layer{li}.b2"), &mut lw.b2));
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }
}

/// Gaussian(0, scale^2/fan_in) entries per weight tensor, zero biases.
/// Each tensor draws from its own derived stream, so weights are stable
/// under layer-count changes and deterministic per seed.
pub fn init_weights(cfg: &ModelConfig, seed: u64, scale: f64) -> Result<ModelWeights> {
    if scale < 0.0 {
        return Err(Error::Config(format!("init scale must be >= 0, got {scale}")));
    }
    cfg.validate()?;
    let base = RngStream::new(seed, 0);
    let mut w = ModelWeights::zeros(cfg);
    let mut idx = 0u64;
    for (name, tensor) in w.tensors_mut() {
        let is_bias = name.contains(".b") || name == "head_b";
        idx += 1;
        if is_bias || scale == 0.0 {
            continue;
        }
        let fan_in = tensor.rows();
        let sd = scale / (fan_in as f64).sqrt();
        let mut stream = base.substream(idx);
        for v in tensor.values_mut() {
            *v = sd * stream.gaussian();
        }
    }
    Ok(w)
}

/// Standard sinusoidal positional encoding, n x d.
pub fn positional_encoding(n: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(n, d);
    for t in 0..n {
        let mut i = 0;
        while i < d {
            let omega = 1.0 / 10000f64.powf(i as f64 / d as f64);
            pe.set(t, i, (t as f64 * omega).sin());
            if i + 1 < d {
                pe.set(t, i + 1, (t as f64 * omega).cos());
            }
            i += 2;
        }
    }
    pe
}

/// Everything one layer's backward pass needs.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer input (post positional encoding for layer 0).
    pub x_in: Matrix,
    /// Scaled dot-product scores per head.
    pub scores: Vec<Matrix>,
    /// Attention rows (each sums to 1) per head.
    pub attn: Vec<Matrix>,
    /// Per-head outputs P (X Wv).
    pub head_out: Vec<Matrix>,
    pub concat: Matrix,
    pub mh: Matrix,
    /// First layer-norm output and its per-row 1/sqrt(var+eps).
    pub y: Matrix,
    pub ln1_inv_std: Vec<f64>,
    pub ffn_pre: Matrix,
    pub ffn_act: Matrix,
    pub ffn_out: Matrix,
    /// Second layer-norm output and stats.
    pub z: Matrix,
    pub ln2_inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Encoder input after optional positional encoding.
    pub input: Matrix,
    pub layers: Vec<LayerTrace>,
    /// Final token representations (last layer's z).
    pub output: Matrix,
}

fn ensure_finite(m: &Matrix, stage: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { context: stage.into() })
    }
}

fn stage<T>(result: Result<T>, name: &str) -> Result<T> {
    result.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFinite { context: name.into() },
        other => other,
    })
}

fn add_row_bias(m: &Matrix, bias: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (v, b) in row.iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
    out
}

/// Layer norm returning the per-row inverse std alongside the output.
pub(crate) fn layer_norm_with_stats(m: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut inv_stds = Vec::with_capacity(m.rows());
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let (mean, inv_std) = linalg::ln_row_stats(row, eps);
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        inv_stds.push(inv_std);
    }
    (out, inv_stds)
}

/// One attention head: `softmax((X Wq)(X Wk)^T / sqrt(dh)) (X Wv)`.
pub fn attention_head(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix> {
    let (out, _, _) = attention_head_traced(x, wq, wk, wv)?;
    Ok(out)
}

fn attention_head_traced(
    x: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let dh = wq.cols();
    let q = stage(matmul(x, wq), "attention-projection")?;
    let k = stage(matmul(x, wk), "attention-projection")?;
    let v = stage(matmul(x, wv), "attention-projection")?;
    let scores = stage(matmul(&q, &k.transpose()), "attention-scores")?.scale(1.0 / (dh as f64).sqrt());
    ensure_finite(&scores, "attention-scores")?;
    let attn = softmax_rows(&scores);
    let out = stage(matmul(&attn, &v), "attention-output")?;
    Ok((out, attn, scores))
}

fn layer_forward(cfg: &ModelConfig, lw: &LayerWeights, x: &Matrix) -> Result<LayerTrace> {
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let mut scores = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    let mut head_out = Vec::with_capacity(heads);
    let mut concat = Matrix::zeros(cfg.n, cfg.d);
    for h in 0..heads {
        let (out, a, s) = attention_head_traced(x, &lw.wq[h], &lw.wk[h], &lw.wv[h])?;
        for i in 0..cfg.n {
            for j in 0..dh {
                concat.set(i, h * dh + j, out.get(i, j));
            }
        }
        scores.push(s);
        attn.push(a);
        head_out.push(out);
    }
    let mh = stage(matmul(&concat, &lw.wo), "multi-head")?;
    let r1 = stage(x.add(&mh), "residual-1")?;
    let (y, ln1_inv_std) = layer_norm_with_stats(&r1, LN_EPS);
    ensure_finite(&y, "layer-norm-1")?;
    let ffn_pre = add_row_bias(&stage(matmul(&y, &lw.w1), "ffn")?, &lw.b1);
    let ffn_act = ffn_pre.map(|v| cfg.activation.apply(v));
    let ffn_out = add_row_bias(&stage(matmul(&ffn_act, &lw.w2), "ffn")?, &lw.b2);
    ensure_finite(&ffn_out, "ffn")?;
    let r2 = stage(y.add(&ffn_out), "residual-2")?;
    let (z, ln2_inv_std) = layer_norm_with_stats(&r2, LN_EPS);
    ensure_finite(&z, "layer-norm-2")?;
    Ok(LayerTrace {
        x_in: x.clone(),
        scores,
        attn,
        head_out,
        concat,
        mh,
        y,
        ln1_inv_std,
        ffn_pre,
        ffn_act,
        ffn_out,
        z,
        ln2_inv_std,
    })
}

/// Full encoder: positional encoding (optional), then `layers` blocks of
/// `Y = LN(X + MH(X)); Z = LN(Y + FFN(Y))`.
pub fn encoder_forward(
    cfg: &ModelConfig,
    w: &ModelWeights,
    x: &Matrix,
) -> Result<(Matrix, ForwardTrace)> {
    cfg.validate()?;
    w.check_shapes(cfg)?;
    if x.shape() != (cfg.n, cfg.d) {
        return Err(Error::ShapeMismatch {
            context: "encoder_forward input".into(),
            left: x.shape_string(),
            right: format!("{}x{}", cfg.n, cfg.d),
        });
    }
    let input = if cfg.positional_encoding {
        stage(x.add(&positional_encoding(cfg.n, cfg.d)), "positional-encoding")?
    } else {
        x.clone()
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut cur = input.clone();
    for lw in &w.layers {
        let trace = layer_forward(cfg, lw, &cur)?;
        cur = trace.z.clone();
        layers.push(trace);
    }
    Ok((
        cur.clone(),
        ForwardTrace {
            input,
            layers,
            output: cur,
        },
    ))
}

/// Mean-pool the traced encoder output and apply the task head's affine map.
pub fn pooled_output(cfg: &ModelConfig, trace: &ForwardTrace, w: &ModelWeights) -> Result<Vec<f64>> {
    let pooled = trace.output.column_means();
    let pooled_m = Matrix::new(1, cfg.d, pooled)?;
    let out = stage(matmul(&pooled_m, &w.head_w), "head")?;
    Ok(add_row_bias(&out, &w.head_b).row(0).to_vec())
}

/// The representation map: encoder plus mean pooling, no task head.
/// This is the `f` whose expressivity the bounds describe.
pub fn represent(cfg: &ModelConfig, w: &ModelWeights, x: &Matrix) -> Result<Vec<f64>> {
    let (out, _) = encoder_forward(cfg, w, x)?;
    Ok(out.column_means())
}

/// Encoder + pooling + head in one call.
pub fn forward(cfg: &ModelConfig, w: &ModelWeights, x: &Matrix) -> Result<(Vec<f64>, ForwardTrace)> {
    let (_, trace) = encoder_forward(cfg, w, x)?;
    let out = pooled_output(cfg, &trace, w)?;
    Ok((out, trace))
}

// ---------------------------------------------------------------------------
// Weight container ("TSNL"): magic, version u16, config block, then raw
// row-major little-endian f64 tensors in the `tensors()` order.
// ---------------------------------------------------------------------------

const TSNL_MAGIC: &[u8; 4] = b"TSNL";
const TSNL_VERSION: u16 = 1;

pub fn save_weights(path: &Path, cfg: &ModelConfig, w: &ModelWeights) -> Result<()> {
    cfg.validate()?;
    w.check_shapes(cfg)?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(TSNL_MAGIC);
    buf.extend_from_slice(&TSNL_VERSION.to_le_bytes());
    for v in [
        cfg.n as u64,
        cfg.d as u64,
        cfg.heads as u64,
        cfg.ffn_hidden as u64,
        cfg.layers as u64,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(cfg.positional_encoding as u8);
    buf.push(match cfg.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    let (head_kind, head_size) = match cfg.head {
        HeadKind::Classification { classes } => (0u8, classes as u64),
        HeadKind::Forecast { horizon } => (1u8, horizon as u64),
    };
    buf.push(head_kind);
    buf.extend_from_slice(&head_size.to_le_bytes());
    for (_, tensor) in w.tensors() {
        for v in tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Parse {
                line: 0,
                col: None,
                msg: "truncated TSNL file".into(),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != TSNL_MAGIC {
        return Err(Error::Parse {
            line: 0,
            col: None,
            msg: "bad magic, expected TSNL".into(),
        });
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != TSNL_VERSION {
        return Err(Error::Unsupported(format!("TSNL version {version}")));
    }
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };
    let n = read_u64(&mut pos)? as usize;
    let d = read_u64(&mut pos)? as usize;
    let heads = read_u64(&mut pos)? as usize;
    let ffn_hidden = read_u64(&mut pos)? as usize;
    let layers = read_u64(&mut pos)? as usize;
    let positional_encoding = take(&mut pos, 1)?[0] != 0;
    let activation = match take(&mut pos, 1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => {
            return Err(Error::Parse {
                line: 0,
                col: None,
                msg: format!("unknown activation code {other}"),
            })
        }
    };
    let head_kind = take(&mut pos, 1)?[0];
    let head_size = read_u64(&mut pos)? as usize;
    let head = match head_kind {
        0 => HeadKind::Classification { classes: head_size },
        1 => HeadKind::Forecast { horizon: head_size },
        other => {
            return Err(Error::Parse {
                line: 0,
                col: None,
                msg: format!("unknown head code {other}"),
            })
        }
    };
    let cfg = ModelConfig {
        n,
        d,
        heads,
        ffn_hidden,
        layers,
        positional_encoding,
        activation,
        head,
    };
    cfg.validate()?;
    let mut w = ModelWeights::zeros(&cfg);
    for (_, tensor) in w.tensors_mut() {
        for v in tensor.values_mut() {
            *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        }
    }
    if pos != bytes.len() {
        return Err(Error::Parse {
            line: 0,
            col: None,
            msg: format!("{} trailing bytes in TSNL file", bytes.len() - pos),
        });
    }
    for (name, tensor) in w.tensors() {
        if !tensor.is_finite() {
            return Err(Error::NonFinite {
                context: format!("TSNL tensor {name}"),
            });
        }
    }
    Ok((cfg, w))
}
