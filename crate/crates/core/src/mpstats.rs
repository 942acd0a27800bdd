//! Marchenko-Pastur bulk edges and the spike/capacity statistics computed
//! against them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::Spectrum;

/// MP bulk support `[lambda_minus, lambda_plus]` for aspect ratio
/// `gamma = m / d_in`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpEdges {
    pub gamma: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
}

impl MpEdges {
    pub fn from_gamma(gamma: f64) -> Self {
        let root = gamma.sqrt();
        let lambda_plus = (1.0 + root).powi(2);
        let lambda_minus = if near_square(gamma) {
            (1.0 - gamma).powi(2) / lambda_plus
        } else {
            (1.0 - root).powi(2)
        };
        Self {
            gamma,
            lambda_minus,
            lambda_plus,
        }
    }
}

/// Where `1 - sqrt(gamma)` cancels badly enough to use the rationalized
/// lower edge `(1 - gamma)² / (1 + sqrt(gamma))²` instead.
fn near_square(gamma: f64) -> bool {
    (0.25..=4.0).contains(&gamma)
}

/// Bulk edges `(1 ± sqrt(m / d_in))²`. Near square blocks the lower edge is
/// evaluated as `(d_in - m)² / (d_in · (sqrt(d_in) + sqrt(m))²)`, which is
/// exactly zero for `m = d_in` and free of cancellation around it.
pub fn mp_edges(m: usize, d_in: usize) -> MpEdges {
    assert!(m >= 1 && d_in >= 1, "mp_edges needs positive dimensions");
    let (mf, df) = (m as f64, d_in as f64);
    let gamma = mf / df;
    if !near_square(gamma) {
        return MpEdges::from_gamma(gamma);
    }
    let diff = df - mf;
    MpEdges {
        gamma,
        lambda_minus: diff * diff / (df * (df.sqrt() + mf.sqrt()).powi(2)),
        lambda_plus: (1.0 + gamma.sqrt()).powi(2),
    }
}

/// Spike and capacity statistics of one spectrum against its MP edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralMetrics {
    /// `max(0, lambda1 - lambda_plus)`.
    pub mp_gap: f64,
    /// Number of eigenvalues strictly above `lambda_plus`.
    pub outlier_count: usize,
    /// Share of total spectral mass carried by the outliers.
    pub outlier_energy: f64,
    /// `lambda1 / lambda_plus`.
    pub mp_soft_rank: f64,
    /// `sum(lambda) / lambda1`.
    pub stable_rank: f64,
    pub lambda1: f64,
    pub gamma: f64,
    pub n_eigs: usize,
}

impl SpectralMetrics {
    /// Names of the five headline statistics, in export order.
    pub const HEADLINE: [&'static str; 5] = [
        "mp_gap",
        "outlier_count",
        "outlier_energy",
        "mp_soft_rank",
        "stable_rank",
    ];
}

/// Computes all statistics for a sorted spectrum.
pub fn spectral_metrics(spectrum: &Spectrum, edges: &MpEdges) -> Result<SpectralMetrics> {
    metrics_from_values(&spectrum.values, edges)
}

/// As [`spectral_metrics`] for a bare value list. The list need not be
/// sorted; `lambda1` is its maximum.
pub fn metrics_from_values(values: &[f64], edges: &MpEdges) -> Result<SpectralMetrics> {
    if values.is_empty() {
        return Err(Error::EmptySpectrum);
    }
    let lambda_plus = edges.lambda_plus;
    let lambda1 = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = values.iter().sum();

    let (outlier_count, outlier_mass) = values
        .iter()
        .filter(|&&v| v > lambda_plus)
        .fold((0usize, 0.0), |(n, s), &v| (n + 1, s + v));

    let outlier_energy = if total > 0.0 { outlier_mass / total } else { 0.0 };
    let stable_rank = if lambda1 > 0.0 { total / lambda1 } else { 0.0 };

    Ok(SpectralMetrics {
        mp_gap: (lambda1 - lambda_plus).max(0.0),
        outlier_count,
        outlier_energy,
        mp_soft_rank: lambda1 / lambda_plus,
        stable_rank,
        lambda1,
        gamma: edges.gamma,
        n_eigs: values.len(),
    })
}

/// One layer's statistics at one logged step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSeriesPoint {
    pub step: u64,
    pub layer: usize,
    pub metrics: SpectralMetrics,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and population standard deviation.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let values: Vec<f64> = values.into_iter().collect();
        if values.is_empty() {
            return Self::default();
        }
        if values.iter().all(|&v| v == values[0]) {
            return Self {
                mean: values[0],
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Across-layer mean and spread of every statistic at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub step: u64,
    pub n_layers: usize,
    pub lambda1: MeanStd,
    pub mp_gap: MeanStd,
    pub outlier_count: MeanStd,
    pub outlier_energy: MeanStd,
    pub mp_soft_rank: MeanStd,
    pub stable_rank: MeanStd,
}

impl LayerAggregate {
    pub const COLUMNS: [&'static str; 6] = [
        "lambda1",
        "mp_gap",
        "outlier_count",
        "outlier_energy",
        "mp_soft_rank",
        "stable_rank",
    ];

    /// Values in [`Self::COLUMNS`] order.
    pub fn values(&self) -> [MeanStd; 6] {
        [
            self.lambda1,
            self.mp_gap,
            self.outlier_count,
            self.outlier_energy,
            self.mp_soft_rank,
            self.stable_rank,
        ]
    }
}

/// Mean ± population std over all layers logged at `step`.
pub fn aggregate_layers(points: &[LayerSeriesPoint], step: u64) -> Result<LayerAggregate> {
    let at: Vec<&SpectralMetrics> = points
        .iter()
        .filter(|p| p.step == step)
        .map(|p| &p.metrics)
        .collect();
    if at.is_empty() {
        return Err(Error::NoPointsAtStep(step));
    }
    let agg = |f: fn(&SpectralMetrics) -> f64| MeanStd::of(at.iter().map(|m| f(m)));
    Ok(LayerAggregate {
        step,
        n_layers: at.len(),
        lambda1: agg(|m| m.lambda1),
        mp_gap: agg(|m| m.mp_gap),
        outlier_count: agg(|m| m.outlier_count as f64),
        outlier_energy: agg(|m| m.outlier_energy),
        mp_soft_rank: agg(|m| m.mp_soft_rank),
        stable_rank: agg(|m| m.stable_rank),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn edges_with_plus(lambda_plus: f64) -> MpEdges {
        MpEdges {
            gamma: 1.0,
            lambda_minus: 0.0,
            lambda_plus,
        }
    }

    #[test]
    fn edges_square_case() {
        let e = mp_edges(768, 768);
        assert_eq!(e.gamma, 1.0);
        assert_eq!(e.lambda_minus, 0.0);
        assert_eq!(e.lambda_plus, 4.0);
    }

    #[test]
    fn edges_wide_aspect() {
        let e = mp_edges(512, 32);
        assert_eq!(e.gamma, 16.0);
        assert_eq!(e.lambda_minus, 9.0);
        assert_eq!(e.lambda_plus, 25.0);
    }

    #[test]
    fn hand_evaluated_metrics() {
        let m = metrics_from_values(&[6.0, 1.0, 1.0], &edges_with_plus(4.0)).unwrap();
        assert_eq!(m.mp_gap, 2.0);
        assert_eq!(m.outlier_count, 1);
        assert_eq!(m.outlier_energy, 0.75);
        assert_eq!(m.mp_soft_rank, 1.5);
        assert!((m.stable_rank - 8.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.lambda1, 6.0);
        assert_eq!(m.n_eigs, 3);
    }

    #[test]
    fn contained_bulk_has_no_gap() {
        let m = metrics_from_values(&[3.9, 1.0, 1.0], &edges_with_plus(4.0)).unwrap();
        assert_eq!(m.mp_gap, 0.0);
        assert_eq!(m.outlier_count, 0);
        assert_eq!(m.outlier_energy, 0.0);
    }

    #[test]
    fn eigenvalue_exactly_at_edge_is_not_an_outlier() {
        let m = metrics_from_values(&[4.0, 1.0], &edges_with_plus(4.0)).unwrap();
        assert_eq!(m.outlier_count, 0);
        assert_eq!(m.mp_soft_rank, 1.0);
    }

    #[test]
    fn flat_spectrum_stable_rank_is_count() {
        let m = metrics_from_values(&[0.7; 9], &edges_with_plus(4.0)).unwrap();
        assert!((m.stable_rank - 9.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_spectrum_is_loggable() {
        let m = metrics_from_values(&[0.0; 4], &edges_with_plus(4.0)).unwrap();
        assert_eq!(
            (m.mp_gap, m.outlier_count, m.outlier_energy, m.mp_soft_rank, m.stable_rank),
            (0.0, 0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn empty_spectrum_rejected() {
        assert!(matches!(
            metrics_from_values(&[], &edges_with_plus(4.0)),
            Err(Error::EmptySpectrum)
        ));
    }

    fn point(step: u64, layer: usize, gap: f64) -> LayerSeriesPoint {
        let mut metrics = metrics_from_values(&[1.0], &edges_with_plus(4.0)).unwrap();
        metrics.mp_gap = gap;
        LayerSeriesPoint { step, layer, metrics }
    }

    #[test]
    fn aggregate_singleton_and_pair() {
        let one = aggregate_layers(&[point(0, 0, 2.5)], 0).unwrap();
        assert_eq!(one.mp_gap, MeanStd { mean: 2.5, std: 0.0 });

        let two = aggregate_layers(&[point(5, 0, 1.0), point(5, 1, 3.0), point(6, 0, 9.0)], 5).unwrap();
        assert_eq!(two.n_layers, 2);
        assert_eq!(two.mp_gap, MeanStd { mean: 2.0, std: 1.0 });
    }

    #[test]
    fn aggregate_constant_layers_have_zero_spread() {
        let pts: Vec<_> = (0..12).map(|l| point(3, l, 0.4)).collect();
        let agg = aggregate_layers(&pts, 3).unwrap();
        assert!(agg.values().iter().all(|v| v.std == 0.0));
    }

    #[test]
    fn aggregate_missing_step_rejected() {
        assert!(matches!(
            aggregate_layers(&[point(0, 0, 1.0)], 7),
            Err(Error::NoPointsAtStep(7))
        ));
    }

    fn spectrum_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-3f64..20.0, 1..40)
    }

    proptest! {
        #[test]
        fn gap_is_clamped_difference(values in spectrum_strategy(), lp in 0.5f64..10.0) {
            let m = metrics_from_values(&values, &edges_with_plus(lp)).unwrap();
            prop_assert_eq!(m.mp_gap, (m.lambda1 - lp).max(0.0));
            if m.mp_gap > 0.0 {
                prop_assert!(m.outlier_count >= 1);
                prop_assert!(m.mp_soft_rank > 1.0);
            }
            prop_assert_eq!(m.outlier_energy == 0.0, m.outlier_count == 0);
            prop_assert!(m.outlier_count <= m.n_eigs);
        }

        #[test]
        fn stable_rank_bounds(values in spectrum_strategy()) {
            let m = metrics_from_values(&values, &edges_with_plus(4.0)).unwrap();
            prop_assert!(m.stable_rank >= 1.0 - 1e-12);
            prop_assert!(m.stable_rank <= m.n_eigs as f64 + 1e-12);
        }

        #[test]
        fn appending_bulk_eigenvalue_is_monotone(values in spectrum_strategy(), frac in 0.0f64..1.0) {
            let edges = edges_with_plus(4.0);
            let before = metrics_from_values(&values, &edges).unwrap();
            let mut more = values.clone();
            more.push(frac * 4.0);
            let after = metrics_from_values(&more, &edges).unwrap();
            prop_assert_eq!(after.mp_gap, before.mp_gap);
            prop_assert_eq!(after.outlier_count, before.outlier_count);
            prop_assert_eq!(after.lambda1, before.lambda1.max(frac * 4.0));
            prop_assert!(after.outlier_energy <= before.outlier_energy);
        }

        #[test]
        fn scaling_up_keeps_outliers_and_stable_rank(values in spectrum_strategy(), c in 1.0f64..5.0) {
            let edges = edges_with_plus(4.0);
            let base = metrics_from_values(&values, &edges).unwrap();
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            let up = metrics_from_values(&scaled, &edges).unwrap();
            prop_assert!(up.outlier_count >= base.outlier_count);
            prop_assert!((up.stable_rank - base.stable_rank).abs() <= 1e-12 * base.stable_rank);
        }
    }
}
