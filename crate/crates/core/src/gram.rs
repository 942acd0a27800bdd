//! Query/key weight selection per attention variant and the normalized
//! cross-Gram `G = W_Q · W_Kᵀ / d_in` whose spectrum is analyzed.
//!
//! Which blocks are analyzed:
//!
//! | variant            | W_Q             | W_K                              | m          | d_in     |
//! |--------------------|-----------------|----------------------------------|------------|----------|
//! | `mha`              | `wq`            | `wk`                             | H·d_k      | d_model  |
//! | `mla-pre/mla-nope` | `wq_up`         | `wk_up`                          | H·d_k      | d_latent |
//! | `mla-dec`          | `wq_rope`       | `wk_rope` stacked H times        | H·rope_dim | d_latent |
//!
//! The shared down-projection of the latent variants is never part of the
//! analyzed product.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Variant};
use crate::error::{Error, Result};
use crate::io::TensorStore;
use crate::linalg::{self, Matrix};
use crate::mpstats::{self, MpEdges, SpectralMetrics};

/// Whether the reported eigenvalues are the singular values of `G` or
/// their squares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenMode {
    #[default]
    Singular,
    Squared,
}

impl fmt::Display for EigenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EigenMode::Singular => "singular",
            EigenMode::Squared => "squared",
        })
    }
}

impl FromStr for EigenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singular" => Ok(EigenMode::Singular),
            "squared" => Ok(EigenMode::Squared),
            other => Err(Error::Config(format!(
                "unknown eigen mode `{other}` (expected singular|squared)"
            ))),
        }
    }
}

/// Which blocks of one layer are analyzed and the resulting dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GramSpec {
    pub variant: Variant,
    pub layer_index: usize,
    pub m: usize,
    pub d_in: usize,
    pub eigen_mode: EigenMode,
}

impl GramSpec {
    /// Expected `(m, d_in)` for a variant, without touching any weights.
    pub fn for_config(config: &AttentionConfig, layer_index: usize, eigen_mode: EigenMode) -> Result<Self> {
        config.validate()?;
        let (m, d_in) = match config.variant {
            Variant::Mha => (config.n_heads * config.d_k, config.d_model),
            Variant::MlaPre | Variant::MlaNope => (config.n_heads * config.d_k, config.d_latent),
            Variant::MlaDec => {
                let rope_dim = config.rope_dim();
                if rope_dim == 0 {
                    return Err(Error::Config(
                        "mla-dec with rope_frac = 0 has no rotary branch to analyze".into(),
                    ));
                }
                (config.n_heads * rope_dim, config.d_latent)
            }
        };
        Ok(Self {
            variant: config.variant,
            layer_index,
            m,
            d_in,
            eigen_mode,
        })
    }

    pub fn edges(&self) -> MpEdges {
        mpstats::mp_edges(self.m, self.d_in)
    }
}

/// Eigenvalues of one cross-Gram, sorted non-increasing, `m` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub m: usize,
    pub d_in: usize,
}

impl Spectrum {
    pub fn edges(&self) -> MpEdges {
        mpstats::mp_edges(self.m, self.d_in)
    }

    pub fn metrics(&self) -> Result<SpectralMetrics> {
        mpstats::spectral_metrics(self, &self.edges())
    }
}

/// Checkpoint name of an attention tensor.
pub fn tensor_name(layer: usize, role: &str) -> String {
    format!("layers.{layer}.attn.{role}")
}

/// `G = (1 / d_in) · wq · wkᵀ`.
pub fn cross_gram(wq: &Matrix, wk: &Matrix, d_in: usize) -> Result<Matrix> {
    if wq.shape() != wk.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_gram",
            left: wq.shape(),
            right: wk.shape(),
        });
    }
    if wq.cols() != d_in {
        return Err(Error::Config(format!(
            "cross_gram: d_in = {d_in} but operands have {} columns",
            wq.cols()
        )));
    }
    Ok(linalg::matmul_nt(wq, wk)?.scaled(1.0 / d_in as f64))
}

fn load_checked(store: &TensorStore, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let m = store.matrix(name)?;
    if m.shape() != (rows, cols) {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: vec![rows, cols],
            actual: vec![m.rows(), m.cols()],
        });
    }
    Ok(m)
}

/// Pulls the analyzed query/key blocks of `layer` out of a checkpoint.
///
/// For `mla-dec` the shared `(rope_dim, d_latent)` key branch is stacked
/// once per head so both operands have `H · rope_dim` rows.
pub fn select_qk_weights(
    store: &TensorStore,
    layer: usize,
    config: &AttentionConfig,
) -> Result<(Matrix, Matrix, GramSpec)> {
    let spec = GramSpec::for_config(config, layer, EigenMode::default())?;
    let (m, d_in) = (spec.m, spec.d_in);
    let pair = match config.variant {
        Variant::Mha => (
            load_checked(store, &tensor_name(layer, "wq"), m, d_in)?,
            load_checked(store, &tensor_name(layer, "wk"), m, d_in)?,
        ),
        Variant::MlaPre | Variant::MlaNope => (
            load_checked(store, &tensor_name(layer, "wq_up"), m, d_in)?,
            load_checked(store, &tensor_name(layer, "wk_up"), m, d_in)?,
        ),
        Variant::MlaDec => {
            let rope_dim = config.rope_dim();
            let wq = load_checked(store, &tensor_name(layer, "wq_rope"), m, d_in)?;
            let wk = load_checked(store, &tensor_name(layer, "wk_rope"), rope_dim, d_in)?;
            (wq, wk.repeat_rows(config.n_heads))
        }
    };
    Ok((pair.0, pair.1, spec))
}

/// Spectrum of the cross-Gram of `wq`, `wk` under `spec`.
pub fn gram_spectrum(wq: &Matrix, wk: &Matrix, spec: &GramSpec) -> Result<Spectrum> {
    if wq.shape() != (spec.m, spec.d_in) {
        return Err(Error::ShapeMismatch {
            op: "gram_spectrum",
            left: wq.shape(),
            right: (spec.m, spec.d_in),
        });
    }
    let g = cross_gram(wq, wk, spec.d_in)?;
    let label = format!("layer {} cross-Gram", spec.layer_index);
    let mut values = linalg::singular_values(&g, &label)?;
    if spec.eigen_mode == EigenMode::Squared {
        values.iter_mut().for_each(|v| *v *= *v);
    }
    Ok(Spectrum {
        values,
        m: spec.m,
        d_in: spec.d_in,
    })
}

/// Result of analyzing one layer of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAnalysis {
    pub spec: GramSpec,
    pub spectrum: Spectrum,
    pub metrics: SpectralMetrics,
}

pub fn analyze_layer(
    store: &TensorStore,
    layer: usize,
    config: &AttentionConfig,
    eigen_mode: EigenMode,
) -> Result<LayerAnalysis> {
    let (wq, wk, mut spec) = select_qk_weights(store, layer, config)?;
    spec.eigen_mode = eigen_mode;
    let spectrum = gram_spectrum(&wq, &wk, &spec)?;
    let metrics = mpstats::spectral_metrics(&spectrum, &spec.edges())?;
    Ok(LayerAnalysis { spec, spectrum, metrics })
}

/// Analyzes every layer in the checkpoint, in layer order. Layers are
/// independent and run in parallel when the `parallel` feature is on.
pub fn analyze_layers(
    store: &TensorStore,
    config: &AttentionConfig,
    eigen_mode: EigenMode,
) -> Result<Vec<LayerAnalysis>> {
    let n = store.layer_count();
    if n == 0 {
        return Err(Error::MissingTensor(tensor_name(0, "*")));
    }
    let run = |layer| analyze_layer(store, layer, config, eigen_mode);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(run).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Dtype;
    use crate::synth::{gaussian_matrix, Rng};

    fn spec(m: usize, d_in: usize, mode: EigenMode) -> GramSpec {
        GramSpec {
            variant: Variant::Mha,
            layer_index: 0,
            m,
            d_in,
            eigen_mode: mode,
        }
    }

    #[test]
    fn identity_gram() {
        let g = cross_gram(&Matrix::identity(2), &Matrix::identity(2), 2).unwrap();
        assert_eq!(g, Matrix::identity(2).scaled(0.5));
    }

    #[test]
    fn zero_query_gives_zero_gram() {
        let g = cross_gram(&Matrix::zeros(3, 2), &gaussian_matrix(3, 2, 1), 2).unwrap();
        assert_eq!(g, Matrix::zeros(3, 3));
    }

    #[test]
    fn swap_gram() {
        let wk = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let g = cross_gram(&Matrix::identity(2), &wk, 2).unwrap();
        assert_eq!(g, Matrix::from_rows(&[[0.0, 0.5], [0.5, 0.0]]));
    }

    #[test]
    fn cross_gram_rejects_mismatch() {
        assert!(matches!(
            cross_gram(&Matrix::zeros(3, 2), &Matrix::zeros(2, 2), 2),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn identity_spectrum_both_modes() {
        let i2 = Matrix::identity(2);
        let s = gram_spectrum(&i2, &i2, &spec(2, 2, EigenMode::Singular)).unwrap();
        assert!(s.values.iter().all(|v| (v - 0.5).abs() < 1e-15));
        let s = gram_spectrum(&i2, &i2, &spec(2, 2, EigenMode::Squared)).unwrap();
        assert!(s.values.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_weights_give_zero_spectrum() {
        let z = Matrix::zeros(8, 4);
        let s = gram_spectrum(&z, &z, &spec(8, 4, EigenMode::Singular)).unwrap();
        assert_eq!(s.values, vec![0.0; 8]);
        let m = s.metrics().unwrap();
        assert_eq!(m.stable_rank, 0.0);
    }

    #[test]
    fn rank_is_bounded_by_input_dim() {
        let (m, d) = (24, 5);
        let s = gram_spectrum(&gaussian_matrix(m, d, 3), &gaussian_matrix(m, d, 4), &spec(m, d, EigenMode::Singular))
            .unwrap();
        assert_eq!(s.values.len(), m);
        let nonzero = s.values.iter().filter(|&&v| v > 1e-10 * s.values[0]).count();
        assert!(nonzero <= d);
    }

    #[test]
    fn spectrum_invariant_under_input_rotation_and_swap() {
        let (m, d) = (12, 9);
        let wq = gaussian_matrix(m, d, 5);
        let wk = gaussian_matrix(m, d, 6);
        let r = linalg::orthonormal_columns(&gaussian_matrix(d, d, 7));
        let sp = spec(m, d, EigenMode::Singular);
        let base = gram_spectrum(&wq, &wk, &sp).unwrap().values;
        let rotated = gram_spectrum(
            &linalg::matmul(&wq, &r).unwrap(),
            &linalg::matmul(&wk, &r).unwrap(),
            &sp,
        )
        .unwrap()
        .values;
        let swapped = gram_spectrum(&wk, &wq, &sp).unwrap().values;
        for ((a, b), c) in base.iter().zip(&rotated).zip(&swapped) {
            assert!((a - b).abs() < 1e-9);
            assert!((a - c).abs() < 1e-9);
        }
    }

    fn reference_config(variant: Variant) -> AttentionConfig {
        AttentionConfig::reference(variant)
    }

    fn store_for(config: &AttentionConfig) -> TensorStore {
        let weights = crate::attention::init_weights(config, 11).unwrap();
        let mut store = TensorStore::new();
        for (role, m) in weights.params() {
            store.insert_matrix(tensor_name(0, role), m, Dtype::F32).unwrap();
        }
        store
    }

    #[test]
    fn reference_shapes_mha() {
        let cfg = reference_config(Variant::Mha);
        let (wq, wk, spec) = select_qk_weights(&store_for(&cfg), 0, &cfg).unwrap();
        assert_eq!(wq.shape(), (768, 768));
        assert_eq!(wk.shape(), (768, 768));
        assert_eq!((spec.m, spec.d_in), (768, 768));
    }

    #[test]
    fn reference_shapes_mla_pre() {
        let cfg = reference_config(Variant::MlaPre);
        let (wq, wk, spec) = select_qk_weights(&store_for(&cfg), 0, &cfg).unwrap();
        assert_eq!(wq.shape(), (768, 32));
        assert_eq!(wk.shape(), (768, 32));
        assert_eq!(spec.d_in, 32);
    }

    #[test]
    fn reference_shapes_mla_dec_replicates_shared_key() {
        let cfg = reference_config(Variant::MlaDec);
        let store = store_for(&cfg);
        let (wq, wk, spec) = select_qk_weights(&store, 0, &cfg).unwrap();
        assert_eq!((spec.m, spec.d_in), (384, 32));
        assert_eq!(wq.shape(), (384, 32));
        let shared = store.matrix(&tensor_name(0, "wk_rope")).unwrap();
        for h in 0..12 {
            for r in 0..32 {
                assert_eq!(wk.row(h * 32 + r), shared.row(r));
            }
        }
    }

    #[test]
    fn missing_and_misshapen_tensors_are_named() {
        let dec = reference_config(Variant::MlaDec);
        let store = store_for(&dec);
        let err = select_qk_weights(&store, 0, &reference_config(Variant::Mha)).unwrap_err();
        assert!(matches!(&err, Error::MissingTensor(n) if n == "layers.0.attn.wq"), "{err}");

        let mut other = dec;
        other.n_heads = 6;
        other.d_k = 128;
        let err = select_qk_weights(&store, 0, &other).unwrap_err();
        assert!(matches!(err, Error::TensorShape { .. }), "{err}");
    }

    #[test]
    fn planted_spike_raises_top_eigenvalue() {
        let (m, d) = (64, 64);
        let mut rng = Rng::new(3);
        let mut spiked_wins = 0;
        for _ in 0..10 {
            let seed = rng.next_u64();
            let (q0, k0) = crate::synth::spiked_pair(m, d, 0.0, 1, seed).unwrap();
            let (q1, k1) = crate::synth::spiked_pair(m, d, 10.0, 1, seed).unwrap();
            let sp = spec(m, d, EigenMode::Singular);
            let null = gram_spectrum(&q0, &k0, &sp).unwrap().values[0];
            let spiked = gram_spectrum(&q1, &k1, &sp).unwrap().values[0];
            if spiked > null {
                spiked_wins += 1;
            }
        }
        assert_eq!(spiked_wins, 10);
    }
}
