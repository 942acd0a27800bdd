//! Deterministic toy language model used to produce weight trajectories.
//!
//! The model is `embed -> n_layers x (x + attn(rmsnorm(x) * gain)) -> unembed`
//! with no MLP and no final norm. Gradients are hand-derived and checked
//! against central differences by [`finite_diff_check`]. Training is plain
//! gradient descent on next-token cross-entropy over a synthetic Markov
//! corpus.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    self, attention_backward, attention_entropy, attention_forward_cached, AttentionCache, AttentionConfig,
    AttentionProbs, AttentionWeights, Variant,
};
use crate::error::{Error, Result};
use crate::gram::{self, tensor_name, EigenMode};
use crate::io::{self, Dtype, MetricsRow, MetricsWriter, Tensor, TensorStore};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::synth::Rng;

pub const DEFAULT_SEED: u64 = 1234;
const RMS_EPS: f64 = 1e-6;
/// Denominator floor of the relative error in [`finite_diff_check`].
pub const FD_FLOOR: f64 = 1e-6;
/// Minimum number of parameters sampled by [`finite_diff_check`].
pub const FD_MIN_SAMPLES: usize = 200;

// Sub-stream labels for `Rng::derive`.
const STREAM_INIT: u64 = 1;
const STREAM_CORPUS: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_FD: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: AttentionConfig,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: u64,
    pub corpus_sharpness: f64,
    /// Training tokens drawn from the Markov chain.
    pub corpus_len: usize,
    /// Held-out tokens following the training slice.
    pub eval_len: usize,
    pub eigen_mode: EigenMode,
    pub checkpoint_dtype: Dtype,
    /// Disables checkpoints and metrics entirely (used to time the baseline).
    pub spectral_logging: bool,
}

impl TrainConfig {
    /// Toy defaults: 2 layers, vocab 64, 1000 steps of batch 8.
    pub fn toy(variant: Variant) -> Self {
        Self {
            model: AttentionConfig::toy(variant),
            n_layers: 2,
            vocab_size: 64,
            steps: 1000,
            batch_size: 8,
            learning_rate: 0.3,
            seed: DEFAULT_SEED,
            log_every: 100,
            corpus_sharpness: 0.9,
            corpus_len: 20_000,
            eval_len: 2_048,
            eigen_mode: EigenMode::Singular,
            checkpoint_dtype: Dtype::F32,
            spectral_logging: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("n_layers, steps, batch_size and log_every must be positive".into());
        }
        if self.log_every > self.steps {
            return bad(format!("log_every ({}) exceeds steps ({})", self.log_every, self.steps));
        }
        if self.vocab_size < 2 || self.vocab_size > u32::MAX as usize {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.corpus_sharpness > 0.0 && self.corpus_sharpness < 1.0) {
            return bad(format!("corpus_sharpness must lie in (0, 1), got {}", self.corpus_sharpness));
        }
        if self.corpus_len < self.model.seq_len + 2 {
            return bad(format!("corpus_len must be at least seq_len + 2 = {}", self.model.seq_len + 2));
        }
        if self.eval_len < 2 {
            return bad("eval_len must be at least 2".into());
        }
        if self.model.variant == Variant::MlaDec && self.model.rope_dim() == 0 && self.spectral_logging {
            return bad("mla-dec with rope_frac = 0 has no rotary branch to analyze".into());
        }
        Ok(())
    }
}

/// Markov chain over `vocab_size` tokens: with probability `sharpness` the
/// next token is `perm[current]` for a fixed random permutation, otherwise
/// it is uniform.
pub fn synth_corpus(seed: u64, vocab_size: usize, length: usize, sharpness: f64) -> Result<Vec<u32>> {
    if length < 2 || vocab_size < 1 || !(0.0..=1.0).contains(&sharpness) {
        return Err(Error::Config(format!(
            "synth_corpus needs length >= 2, vocab >= 1 and sharpness in [0, 1] (got {length}, {vocab_size}, {sharpness})"
        )));
    }
    let mut rng = Rng::new(seed);
    let perm = rng.permutation(vocab_size);
    let mut tokens = Vec::with_capacity(length);
    let mut cur = rng.below(vocab_size);
    tokens.push(cur as u32);
    while tokens.len() < length {
        cur = if rng.uniform() < sharpness {
            perm[cur]
        } else {
            rng.below(vocab_size)
        };
        tokens.push(cur as u32);
    }
    Ok(tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// RMSNorm gain, stored as a `1 x d_model` row.
    pub gain: Matrix,
    pub attn: AttentionWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: AttentionConfig,
    pub embed: Matrix,
    pub layers: Vec<Layer>,
    pub unembed: Matrix,
}

struct LayerCache {
    normed: Matrix,
    inv_rms: Vec<f64>,
    attn: AttentionCache,
}

struct WindowCache {
    inputs: Vec<u32>,
    layers: Vec<LayerCache>,
    last: Matrix,
    logits: Matrix,
}

impl ToyModel {
    /// Embeddings are `N(0, 1/d_model)` and the unembedding `N(0, 1/d_model²)`,
    /// which keeps initial logits near zero (loss near `ln vocab_size`).
    /// Gains start at one and each layer's attention weights come from
    /// [`attention::init_weights`].
    pub fn init(config: &AttentionConfig, n_layers: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_layers == 0 || vocab_size < 2 {
            return Err(Error::Config("need at least one layer and two tokens".into()));
        }
        let d = config.d_model;
        let mut rng = Rng::derive(seed, STREAM_INIT);
        let embed = rng.gaussian_matrix(vocab_size, d, 1.0 / (d as f64).sqrt());
        let unembed = rng.gaussian_matrix(d, vocab_size, 1.0 / d as f64);
        let layers = (0..n_layers)
            .map(|_| {
                Ok(Layer {
                    gain: Matrix::from_fn(1, d, |_, _| 1.0),
                    attn: attention::init_weights(config, rng.next_u64())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *config,
            embed,
            layers,
            unembed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    /// `(name, matrix)` for every parameter, in checkpoint order.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.norm.gain"), &layer.gain));
            for (role, m) in layer.attn.params() {
                out.push((tensor_name(i, role), m));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.norm.gain"), &mut layer.gain));
            for (role, m) in layer.attn.params_mut() {
                out.push((tensor_name(i, role), m));
            }
        }
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.params_mut() {
            m.fill(0.0);
        }
        z
    }

    fn add_scaled(&mut self, other: &ToyModel, c: f64) {
        for ((_, a), (_, b)) in self.params_mut().into_iter().zip(other.params()) {
            a.add_scaled(b, c);
        }
    }

    pub fn to_store(&self, dtype: Dtype) -> Result<TensorStore> {
        let mut store = TensorStore::new();
        for (name, m) in self.params() {
            if name.ends_with(".norm.gain") {
                store.insert(name, Tensor::from_vector(m.row(0), dtype))?;
            } else {
                store.insert_matrix(name, m, dtype)?;
            }
        }
        Ok(store)
    }

    pub fn from_store(store: &TensorStore, config: &AttentionConfig) -> Result<Self> {
        config.validate()?;
        let embed = store.matrix("embed")?;
        let unembed = store.matrix("unembed")?;
        let d = config.d_model;
        if embed.cols() != d || unembed.shape() != (d, embed.rows()) {
            return Err(Error::TensorShape {
                name: "unembed".into(),
                expected: vec![d, embed.rows()],
                actual: vec![unembed.rows(), unembed.cols()],
            });
        }
        let n_layers = store.layer_count();
        if n_layers == 0 {
            return Err(Error::MissingTensor(tensor_name(0, "*")));
        }
        let layers = (0..n_layers)
            .map(|i| {
                let name = format!("layers.{i}.norm.gain");
                let gain = store.vector(&name)?;
                if gain.len() != d {
                    return Err(Error::TensorShape {
                        name,
                        expected: vec![d],
                        actual: vec![gain.len()],
                    });
                }
                Ok(Layer {
                    gain: Matrix::new(1, d, gain)?,
                    attn: AttentionWeights::load(store, i, config)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *config,
            embed,
            layers,
            unembed,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.vocab_size();
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(t) => Err(Error::Config(format!("token {t} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }

    fn forward(&self, inputs: &[u32]) -> Result<WindowCache> {
        self.check_tokens(inputs)?;
        let d = self.config.d_model;
        let mut x = Matrix::from_fn(inputs.len(), d, |t, j| self.embed.get(inputs[t] as usize, j));
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (normed, inv_rms) = rms_normalize(&x);
            let a = Matrix::from_fn(x.rows(), d, |t, j| normed.get(t, j) * layer.gain.get(0, j));
            let (out, attn) = attention_forward_cached(&layer.attn, &a, &self.config)?;
            x.add_scaled(&out, 1.0);
            caches.push(LayerCache { normed, inv_rms, attn });
        }
        let logits = matmul(&x, &self.unembed)?;
        Ok(WindowCache {
            inputs: inputs.to_vec(),
            layers: caches,
            last: x,
            logits,
        })
    }

    /// Summed cross-entropy (nats) and prediction count for one window of
    /// `T + 1` tokens.
    fn window_loss(&self, window: &[u32]) -> Result<(f64, usize)> {
        let (inputs, targets) = split_window(window)?;
        let cache = self.forward(inputs)?;
        Ok((cross_entropy(&cache.logits, targets, None), targets.len()))
    }

    fn window_grad(&self, window: &[u32], grads: &mut ToyModel) -> Result<(f64, usize)> {
        let (inputs, targets) = split_window(window)?;
        self.check_tokens(targets)?;
        let cache = self.forward(inputs)?;
        let mut d_logits = Matrix::zeros(cache.logits.rows(), cache.logits.cols());
        let loss = cross_entropy(&cache.logits, targets, Some(&mut d_logits));

        grads.unembed.add_scaled(&matmul_tn(&cache.last, &d_logits)?, 1.0);
        let mut dx = matmul_nt(&d_logits, &self.unembed)?;
        for (l, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let (g_attn, d_a) = attention_backward(&layer.attn, &lc.attn, &dx, &self.config)?;
            let gl = &mut grads.layers[l];
            for ((_, acc), (_, g)) in gl.attn.params_mut().into_iter().zip(g_attn.params()) {
                acc.add_scaled(g, 1.0);
            }
            let d = self.config.d_model;
            for t in 0..dx.rows() {
                let n = lc.normed.row(t);
                let da = d_a.row(t);
                let mut dn = vec![0.0; d];
                let mut proj = 0.0;
                for j in 0..d {
                    gl.gain.row_mut(0)[j] += da[j] * n[j];
                    dn[j] = da[j] * layer.gain.get(0, j);
                    proj += dn[j] * n[j];
                }
                proj /= d as f64;
                let r_inv = lc.inv_rms[t];
                for (j, o) in dx.row_mut(t).iter_mut().enumerate() {
                    *o += (dn[j] - n[j] * proj) * r_inv;
                }
            }
        }
        for (t, &tok) in cache.inputs.iter().enumerate() {
            let row = grads.embed.row_mut(tok as usize);
            for (o, g) in row.iter_mut().zip(dx.row(t)) {
                *o += g;
            }
        }
        Ok((loss, targets.len()))
    }

    /// Mean next-token cross-entropy (nats) over a batch of windows.
    pub fn loss(&self, batch: &[Vec<u32>]) -> Result<f64> {
        let (mut sum, mut count) = (0.0, 0);
        for w in batch {
            let (s, c) = self.window_loss(w)?;
            sum += s;
            count += c;
        }
        Ok(sum / count as f64)
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[Vec<u32>]) -> Result<(f64, ToyModel)> {
        let mut grads = self.zeros_like();
        let (mut sum, mut count) = (0.0, 0);
        for w in batch {
            let (s, c) = self.window_grad(w, &mut grads)?;
            sum += s;
            count += c;
        }
        let scale = 1.0 / count as f64;
        for (_, g) in grads.params_mut() {
            *g = g.scaled(scale);
        }
        Ok((sum * scale, grads))
    }

    /// Attention probabilities of every layer for one input sequence.
    pub fn attention_probs(&self, inputs: &[u32]) -> Result<Vec<AttentionProbs>> {
        let cache = self.forward(inputs)?;
        Ok(cache.layers.into_iter().map(|l| l.attn.probs().clone()).collect())
    }
}

fn split_window(window: &[u32]) -> Result<(&[u32], &[u32])> {
    if window.len() < 2 {
        return Err(Error::Config(format!("window of {} tokens has nothing to predict", window.len())));
    }
    Ok((&window[..window.len() - 1], &window[1..]))
}

/// Row-wise `x / rms(x)` and the reciprocal rms values.
fn rms_normalize(x: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let inv: Vec<f64> = (0..x.rows())
        .map(|t| 1.0 / (x.row(t).iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt())
        .collect();
    (Matrix::from_fn(x.rows(), x.cols(), |t, j| x.get(t, j) * inv[t]), inv)
}

/// Summed cross-entropy; optionally writes `softmax - onehot` into `grad`.
fn cross_entropy(logits: &Matrix, targets: &[u32], mut grad: Option<&mut Matrix>) -> f64 {
    let mut total = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[target as usize];
        if let Some(g) = grad.as_deref_mut() {
            for (o, v) in g.row_mut(t).iter_mut().zip(row) {
                *o = (v - lse).exp();
            }
            g.row_mut(t)[target as usize] -= 1.0;
        }
    }
    total
}

/// One plain gradient-descent update. Returns the batch loss measured
/// before the update. `step` only labels error diagnostics.
pub fn train_step(model: &mut ToyModel, batch: &[Vec<u32>], lr: f64, step: u64) -> Result<f64> {
    let (loss, grads) = model.loss_and_grad(batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    if let Some((param, _)) = grads.params().into_iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { param, step });
    }
    model.add_scaled(&grads, -lr);
    Ok(loss)
}

/// Non-overlapping windows of at most `seq_len + 1` tokens covering `tokens`.
pub fn eval_windows(tokens: &[u32], seq_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + seq_len + 1).min(tokens.len());
        out.push(tokens[start..end].to_vec());
        start = end - 1;
    }
    out
}

/// `exp` of the mean next-token cross-entropy over `tokens`.
pub fn perplexity(model: &ToyModel, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Config("perplexity needs at least two tokens".into()));
    }
    Ok(model.loss(&eval_windows(tokens, model.config.seq_len))?.exp())
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub samples: usize,
}

/// Central difference `(f(x + eps) - f(x - eps)) / 2eps` in coordinate `i`,
/// restoring `x[i]` afterwards.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, eps: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let plus = f(x);
    x[i] = orig - eps;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * eps)
}

/// `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compares analytic gradients with central differences on a fixed sample
/// of parameters. Every tensor contributes at least `ceil(FD_MIN_SAMPLES /
/// n_tensors)` entries (or all of them if smaller).
pub fn finite_diff_check(model: &ToyModel, batch: &[Vec<u32>], epsilon: f64) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon must lie in [1e-7, 1e-3], got {epsilon}")));
    }
    let (_, grads) = model.loss_and_grad(batch)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .params()
        .into_iter()
        .map(|(n, m)| (n, m.as_slice().to_vec()))
        .collect();
    let per_tensor = FD_MIN_SAMPLES.div_ceil(analytic.len());
    let mut rng = Rng::derive(DEFAULT_SEED, STREAM_FD);
    let mut scratch = model.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        samples: 0,
    };
    for (p, (name, g)) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= per_tensor {
            (0..g.len()).collect()
        } else {
            rng.permutation(g.len())[..per_tensor].to_vec()
        };
        for idx in picks {
            let numeric = {
                let orig = scratch.params()[p].1.as_slice()[idx];
                let mut eval = |v: f64| -> Result<f64> {
                    scratch.params_mut()[p].1.as_mut_slice()[idx] = v;
                    scratch.loss(batch)
                };
                let plus = eval(orig + epsilon)?;
                let minus = eval(orig - epsilon)?;
                eval(orig)?;
                (plus - minus) / (2.0 * epsilon)
            };
            let err = relative_error(g[idx], numeric);
            report.samples += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{name}[{idx}]");
            }
        }
    }
    Ok(report)
}

/// Summary written to `run.json` alongside the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    /// Held-out loss (nats) of the initial model.
    pub initial_loss: f64,
    /// Held-out loss (nats) after the last step.
    pub final_loss: f64,
    pub final_perplexity: f64,
    pub train_losses: Vec<f64>,
    pub logged_steps: Vec<u64>,
    pub wall_seconds: f64,
    /// Time spent writing checkpoints and computing diagnostics.
    pub logging_seconds: f64,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step}.nt"))
}

/// Diagnostics for one snapshot: spectra of the stored weights plus the
/// model's attention entropy on `probe`.
pub fn snapshot_rows(
    store: &TensorStore,
    model: &ToyModel,
    probe: &[u32],
    step: u64,
    eigen_mode: EigenMode,
) -> Result<Vec<MetricsRow>> {
    let analyses = gram::analyze_layers(store, &model.config, eigen_mode)?;
    let probs = model.attention_probs(probe)?;
    analyses
        .iter()
        .zip(&probs)
        .map(|(a, p)| Ok(MetricsRow::new(step, &a.spec, &a.metrics, Some(attention_entropy(p)?))))
        .collect()
}

/// Trains a toy model, logging a checkpoint and per-layer diagnostics at
/// step 0 and every `log_every` steps. Writes `ckpt_{step}.nt`,
/// `metrics.csv`, `loss.csv` and `run.json` into `out_dir`.
pub fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    let started = Instant::now();
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seq_len = config.model.seq_len;
    let corpus_seed = Rng::derive(config.seed, STREAM_CORPUS).next_u64();
    let corpus = synth_corpus(
        corpus_seed,
        config.vocab_size,
        config.corpus_len + config.eval_len,
        config.corpus_sharpness,
    )?;
    let (train_tokens, eval_tokens) = corpus.split_at(config.corpus_len);
    let eval_batch = eval_windows(eval_tokens, seq_len);
    let probe = &eval_tokens[..seq_len.min(eval_tokens.len())];

    let mut model = ToyModel::init(&config.model, config.n_layers, config.vocab_size, config.seed)?;
    let mut batch_rng = Rng::derive(config.seed, STREAM_BATCH);
    let initial_loss = model.loss(&eval_batch)?;

    let mut writer = if config.spectral_logging {
        Some(MetricsWriter::create(out_dir.join("metrics.csv"))?)
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut logged_steps = Vec::new();
    let mut logging_seconds = 0.0;
    let mut train_losses = Vec::with_capacity(config.steps as usize);

    for step in 0..=config.steps {
        if let Some(w) = writer.as_mut() {
            if step % config.log_every == 0 {
                let t0 = Instant::now();
                let store = model.to_store(config.checkpoint_dtype)?;
                io::write_tensors(&store, checkpoint_path(out_dir, step))?;
                for row in snapshot_rows(&store, &model, probe, step, config.eigen_mode)? {
                    w.write(&row)?;
                    rows.push(row);
                }
                logged_steps.push(step);
                logging_seconds += t0.elapsed().as_secs_f64();
            }
        }
        if step == config.steps {
            break;
        }
        let batch: Vec<Vec<u32>> = (0..config.batch_size)
            .map(|_| {
                let start = batch_rng.below(train_tokens.len() - seq_len);
                train_tokens[start..start + seq_len + 1].to_vec()
            })
            .collect();
        train_losses.push(train_step(&mut model, &batch, config.learning_rate, step)?);
    }

    let final_loss = model.loss(&eval_batch)?;
    let mut loss_csv = String::from("step,train_loss\n");
    for (i, l) in train_losses.iter().enumerate() {
        loss_csv.push_str(&format!("{i},{}\n", io::fmt_f64(*l)));
    }
    let loss_path = out_dir.join("loss.csv");
    std::fs::write(&loss_path, loss_csv).map_err(|e| Error::io(&loss_path, e))?;

    let summary = TrainSummary {
        config: config.clone(),
        initial_loss,
        final_loss,
        final_perplexity: final_loss.exp(),
        train_losses,
        logged_steps,
        wall_seconds: started.elapsed().as_secs_f64(),
        logging_seconds,
        rows,
    };
    let run_path = out_dir.join("run.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&run_path, json).map_err(|e| Error::io(&run_path, e))?;
    Ok(summary)
}
