//! Marchenko-Pastur spectral diagnostics for attention query/key weights.
//!
//! The crate computes the spectrum of the per-layer cross-Gram matrix
//! `G = Wq · Wkᵀ / d_in`, compares it with the MP bulk edges, and summarizes
//! the result as a handful of scalar metrics. Toy MHA and MLA attention
//! variants, a small trainer, checkpoint/CSV io and random-matrix oracles
//! are included so the full pipeline can run end to end on a laptop.

pub mod attention;
pub mod error;
pub mod gram;
pub mod io;
pub mod linalg;
pub mod mpstats;
pub mod synth;
pub mod train;

pub use attention::{AttentionConfig, AttentionProbs, AttentionWeights, Variant};
pub use error::{Error, FormatError, Result};
pub use gram::{EigenMode, GramSpec, Spectrum};
pub use io::{Dtype, MetricsRow, TensorStore};
pub use linalg::Matrix;
pub use mpstats::{LayerAggregate, LayerSeriesPoint, MpEdges, SpectralMetrics};
pub use train::{TrainConfig, TrainSummary};
