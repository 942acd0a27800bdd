//! Browser demo for `mpscope`.
//!
//! Each operation is a plain function returning a serializable struct, so it
//! can be tested natively. The `#[wasm_bindgen]` wrappers hand the same
//! structs to JavaScript as JSON.

use mpscope::attention::{attention_forward, head_entropies, init_weights, probe_inputs};
use mpscope::gram::{self, EigenMode, GramSpec};
use mpscope::mpstats::mp_edges;
use mpscope::synth;
use mpscope::{AttentionConfig, SpectralMetrics, Variant};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest matrix side accepted from the page; keeps a click under a second.
pub const MAX_DIM: usize = 512;

/// Empirical null spectrum binned against the MP density.
#[derive(Debug, Clone, Serialize)]
pub struct NullHistogram {
    pub gamma: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    /// Bin boundaries, `bins + 1` entries.
    pub bin_edges: Vec<f64>,
    /// Normalized so the bars integrate to the fraction of nonzero values.
    pub heights: Vec<f64>,
    pub curve_x: Vec<f64>,
    pub curve_y: Vec<f64>,
    pub metrics: SpectralMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub lambda1: f64,
    pub outlier_count: usize,
    pub mp_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpikeSweep {
    pub lambda_plus: f64,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionMap {
    pub variant: Variant,
    pub seq_len: usize,
    pub n_heads: usize,
    /// Head-major `[head][query][key]`, flattened.
    pub probs: Vec<f64>,
    pub head_entropy_bits: Vec<f64>,
}

fn check_dims(m: usize, d_in: usize) -> Result<(), String> {
    if m == 0 || d_in == 0 || m > MAX_DIM || d_in > MAX_DIM {
        return Err(format!("dimensions must lie in 1..={MAX_DIM}, got {m}x{d_in}"));
    }
    Ok(())
}

pub fn null_histogram(m: usize, d_in: usize, bins: usize, seed: u64) -> Result<NullHistogram, String> {
    check_dims(m, d_in)?;
    if bins == 0 {
        return Err("bins must be positive".into());
    }
    let spectrum = synth::wishart_null_spectrum(m, d_in, seed).map_err(|e| e.to_string())?;
    let metrics = spectrum.metrics().map_err(|e| e.to_string())?;
    let edges = mp_edges(m, d_in);
    let gamma = m as f64 / d_in as f64;

    let top = spectrum.values.iter().copied().fold(edges.lambda_plus, f64::max) * 1.05;
    let width = top / bins as f64;
    let mut heights = vec![0.0; bins];
    for &v in &spectrum.values {
        let i = ((v / width) as usize).min(bins - 1);
        heights[i] += 1.0;
    }
    for h in &mut heights {
        *h /= m as f64 * width;
    }
    // With gamma > 1 the zero eigenvalues form a point mass, not a bar.
    if gamma > 1.0 {
        let zeros = spectrum.values.iter().filter(|&&v| v < width).count() as f64;
        let expected = synth::mp_zero_mass(gamma) * m as f64;
        heights[0] = ((zeros - expected).max(0.0)) / (m as f64 * width);
    }
    let bin_edges = (0..=bins).map(|i| i as f64 * width).collect();

    let n = 400;
    let curve_x: Vec<f64> = (0..=n).map(|i| top * i as f64 / n as f64).collect();
    let curve_y = curve_x.iter().map(|&x| synth::mp_density(x, gamma)).collect();

    Ok(NullHistogram {
        gamma,
        lambda_minus: edges.lambda_minus,
        lambda_plus: edges.lambda_plus,
        bin_edges,
        heights,
        curve_x,
        curve_y,
        metrics,
    })
}

pub fn spike_sweep(m: usize, d_in: usize, rank: usize, thetas: &[f64], seed: u64) -> Result<SpikeSweep, String> {
    check_dims(m, d_in)?;
    let spec = GramSpec {
        variant: Variant::Mha,
        layer_index: 0,
        m,
        d_in,
        eigen_mode: EigenMode::Singular,
    };
    let points = thetas
        .iter()
        .map(|&theta| {
            let (wq, wk) = synth::spiked_pair(m, d_in, theta, rank, seed).map_err(|e| e.to_string())?;
            let s = gram::gram_spectrum(&wq, &wk, &spec).map_err(|e| e.to_string())?;
            let metrics = s.metrics().map_err(|e| e.to_string())?;
            Ok(SweepPoint {
                theta,
                lambda1: s.values[0],
                outlier_count: metrics.outlier_count,
                mp_gap: metrics.mp_gap,
            })
        })
        .collect::<Result<_, String>>()?;
    Ok(SpikeSweep {
        lambda_plus: spec.edges().lambda_plus,
        points,
    })
}

/// Attention probabilities of a freshly initialized toy layer on random inputs.
/// `input_scale` multiplies the probe, sharpening the softmax as it grows.
pub fn attention_map(variant: &str, seq_len: usize, input_scale: f64, seed: u64) -> Result<AttentionMap, String> {
    let variant: Variant = variant.parse().map_err(|e: mpscope::Error| e.to_string())?;
    if seq_len == 0 || seq_len > 128 {
        return Err(format!("seq_len must lie in 1..=128, got {seq_len}"));
    }
    let config = AttentionConfig {
        seq_len,
        ..AttentionConfig::toy(variant)
    };
    let weights = init_weights(&config, seed).map_err(|e| e.to_string())?;
    let x = probe_inputs(seq_len, config.d_model, seed).scaled(input_scale);
    let (_, probs) = attention_forward(&weights, &x, &config).map_err(|e| e.to_string())?;
    Ok(AttentionMap {
        variant,
        seq_len,
        n_heads: probs.n_heads(),
        head_entropy_bits: head_entropies(&probs),
        probs: probs.as_slice().to_vec(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = nullHistogram)]
pub fn null_histogram_js(m: usize, d_in: usize, bins: usize, seed: u32) -> Result<String, JsError> {
    to_js(null_histogram(m, d_in, bins, seed.into()))
}

#[wasm_bindgen(js_name = spikeSweep)]
pub fn spike_sweep_js(m: usize, d_in: usize, rank: usize, thetas: Vec<f64>, seed: u32) -> Result<String, JsError> {
    to_js(spike_sweep(m, d_in, rank, &thetas, seed.into()))
}

#[wasm_bindgen(js_name = attentionMap)]
pub fn attention_map_js(variant: &str, seq_len: usize, input_scale: f64, seed: u32) -> Result<String, JsError> {
    to_js(attention_map(variant, seq_len, input_scale, seed.into()))
}
