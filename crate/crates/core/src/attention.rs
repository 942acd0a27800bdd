//! Desk-scale attention variants and their hand-written backward passes.
//!
//! All variants share the same scaled dot-product core; they differ only in
//! how per-head queries and keys are produced from the (normalized) input
//! rows `a`:
//!
//! - `mha`: `q = rope(a · Wqᵀ)`, `k = rope(a · Wkᵀ)`, rotation per head over `d_k`.
//! - `mla-pre`: latent `c = a · W_downᵀ` is rotated over `d_latent` first,
//!   then up-projected: `q = rope(c) · Wq_upᵀ`, `k = rope(c) · Wk_upᵀ`.
//! - `mla-nope`: as `mla-pre` without any rotation.
//! - `mla-dec`: each head is `[content | rotary]`. Content parts are
//!   up-projections of the unrotated latent; rotary parts are
//!   `rope(c · Wq_ropeᵀ)` per head and one shared `rope(c · Wk_ropeᵀ)` key
//!   vector used by every head.
//!
//! Values always come from a full-rank `a · Wvᵀ`, the output projection is
//! `y · Woᵀ`, the logit scale is `1 / sqrt(d_k)` for every variant, and there
//! are no biases or dropout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::tensor_name;
use crate::io::TensorStore;
use crate::linalg::{self, dot, matmul, matmul_nt, matmul_tn, Matrix};
use crate::synth::Rng;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Mha,
    MlaPre,
    MlaDec,
    MlaNope,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mha, Variant::MlaPre, Variant::MlaDec, Variant::MlaNope];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mha => "mha",
            Variant::MlaPre => "mla-pre",
            Variant::MlaDec => "mla-dec",
            Variant::MlaNope => "mla-nope",
        }
    }

    pub fn is_latent(self) -> bool {
        !matches!(self, Variant::Mha)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected mha|mla-pre|mla-dec|mla-nope)")))
    }
}

/// Variant tag plus every dimension needed to build and analyze a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_latent: usize,
    /// Share of each head's `d_k` given to the rotary sub-vector (`mla-dec` only).
    pub rope_frac: f64,
    pub rope_base: f64,
    pub seq_len: usize,
    pub causal: bool,
}

impl AttentionConfig {
    /// Default toy scale used by the trainer.
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_latent: 8,
            rope_frac: 0.5,
            rope_base: DEFAULT_ROPE_BASE,
            seq_len: 32,
            causal: true,
        }
    }

    /// LLaMA-130M attention geometry: 12 heads of 64, latent 32.
    pub fn reference(variant: Variant) -> Self {
        Self {
            variant,
            d_model: 768,
            n_heads: 12,
            d_k: 64,
            d_latent: 32,
            rope_frac: 0.5,
            rope_base: DEFAULT_ROPE_BASE,
            seq_len: 256,
            causal: true,
        }
    }

    /// Total query/key width `H · d_k`.
    pub fn qk_dim(&self) -> usize {
        self.n_heads * self.d_k
    }

    /// Per-head rotary width; zero except for `mla-dec`.
    pub fn rope_dim(&self) -> usize {
        match self.variant {
            Variant::MlaDec => (self.rope_frac * self.d_k as f64).round() as usize,
            _ => 0,
        }
    }

    /// Per-head content width `d_k - rope_dim`.
    pub fn content_dim(&self) -> usize {
        self.d_k - self.rope_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_k == 0 || self.seq_len == 0 {
            return bad(format!(
                "d_model, n_heads, d_k and seq_len must be positive (got {}, {}, {}, {})",
                self.d_model, self.n_heads, self.d_k, self.seq_len
            ));
        }
        if !self.d_k.is_multiple_of(2) {
            return bad(format!("d_k must be even, got {}", self.d_k));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if self.variant.is_latent() {
            if self.d_latent == 0 || !self.d_latent.is_multiple_of(2) {
                return bad(format!("d_latent must be positive and even, got {}", self.d_latent));
            }
            if self.d_latent >= self.qk_dim() {
                return bad(format!(
                    "d_latent ({}) must be smaller than H*d_k ({})",
                    self.d_latent,
                    self.qk_dim()
                ));
            }
        }
        if self.variant == Variant::MlaDec {
            if !(0.0..=1.0).contains(&self.rope_frac) {
                return bad(format!("rope_frac must lie in [0, 1], got {}", self.rope_frac));
            }
            let exact = self.rope_frac * self.d_k as f64;
            if (exact - exact.round()).abs() > 1e-9 {
                return bad(format!(
                    "rope_frac {} gives a rotary width of {exact} for d_k = {}; it must be an even integer",
                    self.rope_frac, self.d_k
                ));
            }
            let rope_dim = self.rope_dim();
            if !rope_dim.is_multiple_of(2) {
                return bad(format!("rotary width {rope_dim} must be even"));
            }
            if rope_dim == self.d_k {
                return bad("rope_frac = 1 leaves no content dimensions".into());
            }
        }
        Ok(())
    }
}

/// Role names and `(rows, cols)` of every weight of one attention layer,
/// in canonical order. Initialization and checkpoint loading both follow
/// this order.
pub fn weight_shapes(config: &AttentionConfig) -> Vec<(&'static str, (usize, usize))> {
    let (d, qk) = (config.d_model, config.qk_dim());
    let mut shapes = match config.variant {
        Variant::Mha => vec![("wq", (qk, d)), ("wk", (qk, d))],
        _ => {
            let content = config.n_heads * config.content_dim();
            vec![
                ("w_down", (config.d_latent, d)),
                ("wq_up", (content, config.d_latent)),
                ("wk_up", (content, config.d_latent)),
            ]
        }
    };
    shapes.push(("wv", (qk, d)));
    shapes.push(("wo", (d, qk)));
    let rope_dim = config.rope_dim();
    if rope_dim > 0 {
        shapes.push(("wq_rope", (config.n_heads * rope_dim, config.d_latent)));
        shapes.push(("wk_rope", (rope_dim, config.d_latent)));
    }
    shapes
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeBranch {
    /// Per-head query rotary projection, `(H · rope_dim, d_latent)`.
    pub wq_rope: Matrix,
    /// Key rotary projection shared by all heads, `(rope_dim, d_latent)`.
    pub wk_rope: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QkWeights {
    Full {
        wq: Matrix,
        wk: Matrix,
    },
    Latent {
        w_down: Matrix,
        wq_up: Matrix,
        wk_up: Matrix,
        rope: Option<RopeBranch>,
    },
}

/// Weights of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub qk: QkWeights,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttentionWeights {
    /// Assembles weights from matrices given in [`weight_shapes`] order.
    pub fn from_ordered(config: &AttentionConfig, mats: Vec<Matrix>) -> Result<Self> {
        let shapes = weight_shapes(config);
        if mats.len() != shapes.len() {
            return Err(Error::Config(format!(
                "{} expects {} weight matrices, got {}",
                config.variant,
                shapes.len(),
                mats.len()
            )));
        }
        for ((role, shape), m) in shapes.iter().zip(&mats) {
            if m.shape() != *shape {
                return Err(Error::TensorShape {
                    name: role.to_string(),
                    expected: vec![shape.0, shape.1],
                    actual: vec![m.rows(), m.cols()],
                });
            }
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("length checked");
        let qk = match config.variant {
            Variant::Mha => QkWeights::Full { wq: next(), wk: next() },
            _ => QkWeights::Latent {
                w_down: next(),
                wq_up: next(),
                wk_up: next(),
                rope: None,
            },
        };
        let wv = next();
        let wo = next();
        let mut weights = AttentionWeights { qk, wv, wo };
        if config.rope_dim() > 0 {
            if let QkWeights::Latent { rope, .. } = &mut weights.qk {
                *rope = Some(RopeBranch {
                    wq_rope: next(),
                    wk_rope: next(),
                });
            }
        }
        Ok(weights)
    }

    /// Loads layer `layer` from a checkpoint using the `layers.{i}.attn.*`
    /// naming convention.
    pub fn load(store: &TensorStore, layer: usize, config: &AttentionConfig) -> Result<Self> {
        let mut mats = Vec::new();
        for (role, (r, c)) in weight_shapes(config) {
            let name = tensor_name(layer, role);
            let m = store.matrix(&name)?;
            if m.shape() != (r, c) {
                return Err(Error::TensorShape {
                    name,
                    expected: vec![r, c],
                    actual: vec![m.rows(), m.cols()],
                });
            }
            mats.push(m);
        }
        Self::from_ordered(config, mats)
    }

    /// `(role, matrix)` pairs in canonical order.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = match &self.qk {
            QkWeights::Full { wq, wk } => vec![("wq", wq), ("wk", wk)],
            QkWeights::Latent {
                w_down, wq_up, wk_up, ..
            } => vec![("w_down", w_down), ("wq_up", wq_up), ("wk_up", wk_up)],
        };
        out.push(("wv", &self.wv));
        out.push(("wo", &self.wo));
        if let QkWeights::Latent { rope: Some(r), .. } = &self.qk {
            out.push(("wq_rope", &r.wq_rope));
            out.push(("wk_rope", &r.wk_rope));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = Vec::new();
        let mut rope_params = Vec::new();
        match &mut self.qk {
            QkWeights::Full { wq, wk } => {
                out.push(("wq", wq));
                out.push(("wk", wk));
            }
            QkWeights::Latent {
                w_down,
                wq_up,
                wk_up,
                rope,
            } => {
                out.push(("w_down", w_down));
                out.push(("wq_up", wq_up));
                out.push(("wk_up", wk_up));
                if let Some(r) = rope {
                    rope_params.push(("wq_rope", &mut r.wq_rope));
                    rope_params.push(("wk_rope", &mut r.wk_rope));
                }
            }
        }
        out.push(("wv", &mut self.wv));
        out.push(("wo", &mut self.wo));
        out.extend(rope_params);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.params_mut() {
            m.fill(0.0);
        }
        z
    }

    fn check_against(&self, config: &AttentionConfig) -> Result<()> {
        let expected = weight_shapes(config);
        let actual = self.params();
        let matches = expected.len() == actual.len()
            && expected
                .iter()
                .zip(&actual)
                .all(|((er, es), (ar, m))| er == ar && *es == m.shape());
        if matches {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "weights do not match the {} configuration (expected {:?})",
                config.variant, expected
            )))
        }
    }
}

/// I.i.d. Gaussian weights with std `1 / sqrt(fan_in)` (column count),
/// drawn in [`weight_shapes`] order from one seeded stream.
pub fn init_weights(config: &AttentionConfig, seed: u64) -> Result<AttentionWeights> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mats = weight_shapes(config)
        .into_iter()
        .map(|(_, (r, c))| rng.gaussian_matrix(r, c, 1.0 / (c as f64).sqrt()))
        .collect();
    AttentionWeights::from_ordered(config, mats)
}

/// Rotates coordinate pairs `(x[2j], x[2j+1])` by `sign · position ·
/// base^(-2j/d)`.
fn rotate_pairs(x: &mut [f64], position: usize, base: f64, sign: f64) {
    let d = x.len();
    let pos = position as f64;
    for j in 0..d / 2 {
        let inv_freq = base.powf(-((2 * j) as f64) / d as f64);
        let (s, c) = (sign * pos * inv_freq).sin_cos();
        let (x0, x1) = (x[2 * j], x[2 * j + 1]);
        x[2 * j] = x0 * c - x1 * s;
        x[2 * j + 1] = x0 * s + x1 * c;
    }
}

/// Applies rotary position embedding to `x` at `position`.
pub fn rope_rotate(x: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::Config(format!("RoPE needs an even length, got {}", x.len())));
    }
    let mut out = x.to_vec();
    rotate_pairs(&mut out, position, base, 1.0);
    Ok(out)
}

/// Rotates each `block`-wide slice of row `t` as position `t`. `sign = -1`
/// applies the inverse (transpose) rotation.
fn rope_rows(m: &mut Matrix, block: usize, base: f64, sign: f64) {
    for t in 0..m.rows() {
        for chunk in m.row_mut(t).chunks_exact_mut(block) {
            rotate_pairs(chunk, t, base, sign);
        }
    }
}

/// Attention probabilities indexed `(head, query, key)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbs {
    n_heads: usize,
    seq_len: usize,
    data: Vec<f64>,
}

impl AttentionProbs {
    pub fn new(n_heads: usize, seq_len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_heads * seq_len * seq_len {
            return Err(Error::InvalidMatrix(format!(
                "attention probs for {n_heads} heads x {seq_len}^2 need {} values, got {}",
                n_heads * seq_len * seq_len,
                data.len()
            )));
        }
        Ok(Self { n_heads, seq_len, data })
    }

    fn zeros(n_heads: usize, seq_len: usize) -> Self {
        Self {
            n_heads,
            seq_len,
            data: vec![0.0; n_heads * seq_len * seq_len],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn get(&self, head: usize, query: usize, key: usize) -> f64 {
        self.data[(head * self.seq_len + query) * self.seq_len + key]
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.seq_len + query) * self.seq_len;
        &self.data[start..start + self.seq_len]
    }

    fn row_mut(&mut self, head: usize, query: usize) -> &mut [f64] {
        let start = (head * self.seq_len + query) * self.seq_len;
        &mut self.data[start..start + self.seq_len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    input: Matrix,
    latent: Option<Matrix>,
    latent_rot: Option<Matrix>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: AttentionProbs,
    heads_out: Matrix,
}

impl AttentionCache {
    pub fn probs(&self) -> &AttentionProbs {
        &self.probs
    }
}

/// Builds the assembled per-head queries and keys, `(T, H · d_k)` each.
fn project_qk(
    w: &AttentionWeights,
    a: &Matrix,
    cfg: &AttentionConfig,
) -> Result<(Matrix, Matrix, Option<Matrix>, Option<Matrix>)> {
    match &w.qk {
        QkWeights::Full { wq, wk } => {
            let mut q = matmul_nt(a, wq)?;
            let mut k = matmul_nt(a, wk)?;
            rope_rows(&mut q, cfg.d_k, cfg.rope_base, 1.0);
            rope_rows(&mut k, cfg.d_k, cfg.rope_base, 1.0);
            Ok((q, k, None, None))
        }
        QkWeights::Latent {
            w_down,
            wq_up,
            wk_up,
            rope,
        } => {
            let c = matmul_nt(a, w_down)?;
            match cfg.variant {
                Variant::MlaPre => {
                    let mut cr = c.clone();
                    rope_rows(&mut cr, cfg.d_latent, cfg.rope_base, 1.0);
                    let q = matmul_nt(&cr, wq_up)?;
                    let k = matmul_nt(&cr, wk_up)?;
                    Ok((q, k, Some(c), Some(cr)))
                }
                Variant::MlaNope => {
                    let q = matmul_nt(&c, wq_up)?;
                    let k = matmul_nt(&c, wk_up)?;
                    Ok((q, k, Some(c), None))
                }
                Variant::MlaDec => {
                    let (t_len, h, dk) = (a.rows(), cfg.n_heads, cfg.d_k);
                    let (dc, r) = (cfg.content_dim(), cfg.rope_dim());
                    let qc = matmul_nt(&c, wq_up)?;
                    let kc = matmul_nt(&c, wk_up)?;
                    let mut q = Matrix::zeros(t_len, h * dk);
                    let mut k = Matrix::zeros(t_len, h * dk);
                    for t in 0..t_len {
                        for head in 0..h {
                            q.row_mut(t)[head * dk..head * dk + dc]
                                .copy_from_slice(&qc.row(t)[head * dc..(head + 1) * dc]);
                            k.row_mut(t)[head * dk..head * dk + dc]
                                .copy_from_slice(&kc.row(t)[head * dc..(head + 1) * dc]);
                        }
                    }
                    if let Some(rb) = rope {
                        let mut qr = matmul_nt(&c, &rb.wq_rope)?;
                        let mut kr = matmul_nt(&c, &rb.wk_rope)?;
                        rope_rows(&mut qr, r, cfg.rope_base, 1.0);
                        rope_rows(&mut kr, r, cfg.rope_base, 1.0);
                        for t in 0..t_len {
                            for head in 0..h {
                                q.row_mut(t)[head * dk + dc..(head + 1) * dk]
                                    .copy_from_slice(&qr.row(t)[head * r..(head + 1) * r]);
                                k.row_mut(t)[head * dk + dc..(head + 1) * dk].copy_from_slice(kr.row(t));
                            }
                        }
                    }
                    Ok((q, k, Some(c), None))
                }
                Variant::Mha => unreachable!("checked against config"),
            }
        }
    }
}

/// Causal (or full) softmax attention over assembled heads.
fn attend(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttentionConfig) -> Result<(AttentionProbs, Matrix)> {
    let (t_len, h, dk) = (q.rows(), cfg.n_heads, cfg.d_k);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut probs = AttentionProbs::zeros(h, t_len);
    let mut y = Matrix::zeros(t_len, h * dk);
    for head in 0..h {
        let hb = head * dk..(head + 1) * dk;
        for i in 0..t_len {
            let keys = if cfg.causal { i + 1 } else { t_len };
            let qi = &q.row(i)[hb.clone()];
            let row = &mut probs.row_mut(head, i)[..keys];
            let mut max = f64::NEG_INFINITY;
            for (j, p) in row.iter_mut().enumerate() {
                let s = dot(qi, &k.row(j)[hb.clone()]) * scale;
                if !s.is_finite() {
                    return Err(Error::NonFiniteLogit { head, query: i, key: j });
                }
                *p = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
            let yi = &mut y.row_mut(i)[hb.clone()];
            for (j, &p) in row.iter().enumerate() {
                for (o, &vj) in yi.iter_mut().zip(&v.row(j)[hb.clone()]) {
                    *o += p * vj;
                }
            }
        }
    }
    Ok((probs, y))
}

fn check_inputs(inputs: &Matrix, config: &AttentionConfig) -> Result<()> {
    if inputs.cols() != config.d_model {
        return Err(Error::ShapeMismatch {
            op: "attention_forward",
            left: inputs.shape(),
            right: (config.seq_len, config.d_model),
        });
    }
    if inputs.rows() > config.seq_len {
        return Err(Error::Config(format!(
            "sequence of {} positions exceeds seq_len {}",
            inputs.rows(),
            config.seq_len
        )));
    }
    Ok(())
}

/// Forward pass keeping the intermediates needed by [`attention_backward`].
pub fn attention_forward_cached(
    weights: &AttentionWeights,
    inputs: &Matrix,
    config: &AttentionConfig,
) -> Result<(Matrix, AttentionCache)> {
    weights.check_against(config)?;
    check_inputs(inputs, config)?;
    let (q, k, latent, latent_rot) = project_qk(weights, inputs, config)?;
    let v = matmul_nt(inputs, &weights.wv)?;
    let (probs, heads_out) = attend(&q, &k, &v, config)?;
    let out = matmul_nt(&heads_out, &weights.wo)?;
    Ok((
        out,
        AttentionCache {
            input: inputs.clone(),
            latent,
            latent_rot,
            q,
            k,
            v,
            probs,
            heads_out,
        },
    ))
}

/// Runs one attention layer on `inputs` (`T x d_model`, `T <= seq_len`).
pub fn attention_forward(
    weights: &AttentionWeights,
    inputs: &Matrix,
    config: &AttentionConfig,
) -> Result<(Matrix, AttentionProbs)> {
    let (out, cache) = attention_forward_cached(weights, inputs, config)?;
    Ok((out, cache.probs))
}

/// Gradients of a scalar loss with respect to the layer weights and its
/// input, given `d_out = dL/d(output)`.
pub fn attention_backward(
    weights: &AttentionWeights,
    cache: &AttentionCache,
    d_out: &Matrix,
    config: &AttentionConfig,
) -> Result<(AttentionWeights, Matrix)> {
    let (t_len, h, dk) = (cache.input.rows(), config.n_heads, config.d_k);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut grads = weights.zeros_like();
    grads.wo = matmul_tn(d_out, &cache.heads_out)?;
    let d_y = matmul(d_out, &weights.wo)?;

    let mut dq = Matrix::zeros(t_len, h * dk);
    let mut dk_all = Matrix::zeros(t_len, h * dk);
    let mut dv = Matrix::zeros(t_len, h * dk);
    let mut dp = vec![0.0; t_len];
    for head in 0..h {
        let hb = head * dk..(head + 1) * dk;
        for i in 0..t_len {
            let keys = if config.causal { i + 1 } else { t_len };
            let p = &cache.probs.row(head, i)[..keys];
            let dyi = &d_y.row(i)[hb.clone()];
            let mut weighted = 0.0;
            for j in 0..keys {
                dp[j] = dot(dyi, &cache.v.row(j)[hb.clone()]);
                weighted += p[j] * dp[j];
                for (o, &g) in dv.row_mut(j)[hb.clone()].iter_mut().zip(dyi) {
                    *o += p[j] * g;
                }
            }
            for j in 0..keys {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for (o, &kj) in dq.row_mut(i)[hb.clone()].iter_mut().zip(&cache.k.row(j)[hb.clone()]) {
                    *o += ds * kj;
                }
                for (o, &qi) in dk_all.row_mut(j)[hb.clone()].iter_mut().zip(&cache.q.row(i)[hb.clone()]) {
                    *o += ds * qi;
                }
            }
        }
    }

    grads.wv = matmul_tn(&dv, &cache.input)?;
    let mut d_in = matmul(&dv, &weights.wv)?;

    match (&weights.qk, &mut grads.qk) {
        (QkWeights::Full { wq, wk }, QkWeights::Full { wq: gq, wk: gk }) => {
            rope_rows(&mut dq, dk, config.rope_base, -1.0);
            rope_rows(&mut dk_all, dk, config.rope_base, -1.0);
            *gq = matmul_tn(&dq, &cache.input)?;
            *gk = matmul_tn(&dk_all, &cache.input)?;
            d_in.add_scaled(&matmul(&dq, wq)?, 1.0);
            d_in.add_scaled(&matmul(&dk_all, wk)?, 1.0);
        }
        (
            QkWeights::Latent {
                w_down,
                wq_up,
                wk_up,
                rope,
            },
            QkWeights::Latent {
                w_down: g_down,
                wq_up: g_qup,
                wk_up: g_kup,
                rope: g_rope,
            },
        ) => {
            let c = cache.latent.as_ref().expect("latent cached");
            let d_c = match config.variant {
                Variant::MlaPre | Variant::MlaNope => {
                    let src = cache.latent_rot.as_ref().unwrap_or(c);
                    *g_qup = matmul_tn(&dq, src)?;
                    *g_kup = matmul_tn(&dk_all, src)?;
                    let mut d_src = matmul(&dq, wq_up)?;
                    d_src.add_scaled(&matmul(&dk_all, wk_up)?, 1.0);
                    if config.variant == Variant::MlaPre {
                        rope_rows(&mut d_src, config.d_latent, config.rope_base, -1.0);
                    }
                    d_src
                }
                Variant::MlaDec => {
                    let (dc, r) = (config.content_dim(), config.rope_dim());
                    let mut dqc = Matrix::zeros(t_len, h * dc);
                    let mut dkc = Matrix::zeros(t_len, h * dc);
                    for t in 0..t_len {
                        for head in 0..h {
                            dqc.row_mut(t)[head * dc..(head + 1) * dc]
                                .copy_from_slice(&dq.row(t)[head * dk..head * dk + dc]);
                            dkc.row_mut(t)[head * dc..(head + 1) * dc]
                                .copy_from_slice(&dk_all.row(t)[head * dk..head * dk + dc]);
                        }
                    }
                    *g_qup = matmul_tn(&dqc, c)?;
                    *g_kup = matmul_tn(&dkc, c)?;
                    let mut d_c = matmul(&dqc, wq_up)?;
                    d_c.add_scaled(&matmul(&dkc, wk_up)?, 1.0);

                    if let (Some(rb), Some(grb)) = (rope, g_rope) {
                        let mut dqr = Matrix::zeros(t_len, h * r);
                        let mut dkr = Matrix::zeros(t_len, r);
                        for t in 0..t_len {
                            for head in 0..h {
                                dqr.row_mut(t)[head * r..(head + 1) * r]
                                    .copy_from_slice(&dq.row(t)[head * dk + dc..(head + 1) * dk]);
                                let shared = &dk_all.row(t)[head * dk + dc..(head + 1) * dk];
                                for (o, g) in dkr.row_mut(t).iter_mut().zip(shared) {
                                    *o += g;
                                }
                            }
                        }
                        rope_rows(&mut dqr, r, config.rope_base, -1.0);
                        rope_rows(&mut dkr, r, config.rope_base, -1.0);
                        grb.wq_rope = matmul_tn(&dqr, c)?;
                        grb.wk_rope = matmul_tn(&dkr, c)?;
                        d_c.add_scaled(&matmul(&dqr, &rb.wq_rope)?, 1.0);
                        d_c.add_scaled(&matmul(&dkr, &rb.wk_rope)?, 1.0);
                    }
                    d_c
                }
                Variant::Mha => unreachable!("checked against config"),
            };
            *g_down = matmul_tn(&d_c, &cache.input)?;
            d_in.add_scaled(&matmul(&d_c, w_down)?, 1.0);
        }
        _ => unreachable!("gradient layout mirrors weights"),
    }
    Ok((grads, d_in))
}

/// Shannon entropy in bits of one probability row (`0 · log 0 = 0`).
pub fn row_entropy_bits(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

/// Mean row entropy over heads and query positions, in bits.
pub fn attention_entropy(probs: &AttentionProbs) -> Result<f64> {
    let mut total = 0.0;
    for head in 0..probs.n_heads {
        for query in 0..probs.seq_len {
            let row = probs.row(head, query);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Unnormalized { head, query, sum });
            }
            total += row_entropy_bits(row);
        }
    }
    Ok(total / (probs.n_heads * probs.seq_len) as f64)
}

/// Per-head mean entropy in bits, for heatmaps.
pub fn head_entropies(probs: &AttentionProbs) -> Vec<f64> {
    (0..probs.n_heads)
        .map(|h| {
            (0..probs.seq_len)
                .map(|i| row_entropy_bits(probs.row(h, i)))
                .sum::<f64>()
                / probs.seq_len as f64
        })
        .collect()
}

/// Probe inputs for entropy diagnostics: i.i.d. `N(0, 1/d_model)` rows, so
/// each token vector has unit expected norm like a fresh embedding.
pub fn probe_inputs(seq_len: usize, d_model: usize, seed: u64) -> Matrix {
    Rng::new(seed).gaussian_matrix(seq_len, d_model, 1.0 / (d_model as f64).sqrt())
}

/// Frobenius norm over all weights of a layer.
pub fn weights_norm(w: &AttentionWeights) -> f64 {
    w.params()
        .iter()
        .map(|(_, m)| linalg::frobenius_norm(m).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_matrix;

    fn small(variant: Variant) -> AttentionConfig {
        AttentionConfig {
            variant,
            d_model: 32,
            n_heads: 4,
            d_k: 8,
            d_latent: 16,
            rope_frac: 0.5,
            rope_base: DEFAULT_ROPE_BASE,
            seq_len: 12,
            causal: true,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("gqa".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::toy(Variant::MlaDec).validate().is_ok());
        assert!(AttentionConfig::reference(Variant::MlaDec).validate().is_ok());
        let mut c = AttentionConfig::toy(Variant::MlaDec);
        c.rope_frac = 0.3;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("4.8"), "{msg}");
        c.rope_frac = 0.0;
        assert!(c.validate().is_ok());
        c.rope_frac = 1.0;
        assert!(c.validate().is_err());
        c.rope_frac = 0.25;
        assert_eq!(c.rope_dim(), 4);
        let mut m = AttentionConfig::toy(Variant::MlaPre);
        m.d_latent = 64;
        assert!(m.validate().is_err());
        m.d_latent = 7;
        assert!(m.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let cfg = AttentionConfig {
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            ..AttentionConfig::toy(Variant::Mha)
        };
        let a = init_weights(&cfg, 5).unwrap();
        assert_eq!(a, init_weights(&cfg, 5).unwrap());
        assert_ne!(a, init_weights(&cfg, 6).unwrap());
        let QkWeights::Full { wq, .. } = &a.qk else {
            panic!("mha has full projections")
        };
        assert_eq!(wq.shape(), (64, 64));
    }

    #[test]
    fn init_std_matches_fan_in() {
        let cfg = AttentionConfig::toy(Variant::Mha);
        let w = init_weights(&cfg, 1).unwrap();
        let QkWeights::Full { wq, .. } = &w.qk else { unreachable!() };
        let n = wq.as_slice().len() as f64;
        let mean = wq.as_slice().iter().sum::<f64>() / n;
        let std = (wq.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.125).abs() <= 0.1 * 0.125, "std {std}");
    }

    #[test]
    fn rope_examples() {
        let x = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(rope_rotate(&x, 0, 10_000.0).unwrap(), x.to_vec());
        let r = rope_rotate(&[1.0, 0.0], 1, 123.0).unwrap();
        assert!((r[0] - 1f64.cos()).abs() < 1e-15 && (r[1] - 1f64.sin()).abs() < 1e-15);
        let y = rope_rotate(&x, 17, 10_000.0).unwrap();
        assert!((dot(&y, &y).sqrt() - dot(&x, &x).sqrt()).abs() < 1e-12);
        assert!(rope_rotate(&[1.0, 2.0, 3.0], 1, 10.0).is_err());
    }

    #[test]
    fn single_position_attends_to_itself() {
        for v in Variant::ALL {
            let cfg = small(v);
            let w = init_weights(&cfg, 2).unwrap();
            let (_, probs) = attention_forward(&w, &gaussian_matrix(1, 32, 3), &cfg).unwrap();
            for h in 0..cfg.n_heads {
                assert_eq!(probs.row(h, 0), &[1.0]);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_causal_rows() {
        let cfg = small(Variant::MlaDec);
        let w = init_weights(&cfg, 2).unwrap().zeros_like();
        let (out, probs) = attention_forward(&w, &gaussian_matrix(6, 32, 3), &cfg).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        for h in 0..cfg.n_heads {
            for i in 0..6 {
                for j in 0..6 {
                    let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                    assert!((probs.get(h, i, j) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn decoupled_without_rope_matches_nope() {
        let mut dec = small(Variant::MlaDec);
        dec.rope_frac = 0.0;
        let nope = small(Variant::MlaNope);
        let wd = init_weights(&dec, 9).unwrap();
        let wn = init_weights(&nope, 9).unwrap();
        assert_eq!(wd, wn);
        let x = gaussian_matrix(10, 32, 4);
        let (od, pd) = attention_forward(&wd, &x, &dec).unwrap();
        let (on, pn) = attention_forward(&wn, &x, &nope).unwrap();
        assert_eq!(od, on);
        assert_eq!(pd, pn);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let w = init_weights(&small(Variant::Mha), 1).unwrap();
        let err = attention_forward(&w, &gaussian_matrix(3, 32, 1), &small(Variant::MlaPre)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = attention_forward(&w, &gaussian_matrix(3, 31, 1), &small(Variant::Mha)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let err = attention_forward(&w, &gaussian_matrix(13, 32, 1), &small(Variant::Mha)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn entropy_examples() {
        let uniform = AttentionProbs::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(attention_entropy(&uniform).unwrap(), 0.0);
        assert_eq!(row_entropy_bits(&[1.0 / 256.0; 256]), 8.0);
        assert_eq!(row_entropy_bits(&[0.0, 1.0, 0.0]), 0.0);
        let bad = AttentionProbs::new(1, 2, vec![1.0, 0.0, 0.3, 0.3]).unwrap();
        assert!(matches!(attention_entropy(&bad), Err(Error::Unnormalized { query: 1, .. })));
    }

    #[test]
    fn non_causal_rows_cover_all_keys() {
        let mut cfg = small(Variant::Mha);
        cfg.causal = false;
        let w = init_weights(&cfg, 4).unwrap();
        let (_, probs) = attention_forward(&w, &gaussian_matrix(5, 32, 8), &cfg).unwrap();
        assert!(probs.row(0, 0).iter().all(|&p| p > 0.0));
    }
}
