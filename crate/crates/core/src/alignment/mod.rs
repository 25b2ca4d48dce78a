//! Cross-scale alignment: pooled scale representations, the maps between
//! them, the combined loss, training, ablations and diagnostics.

mod ablation;
mod additivity;
pub mod curvature;
mod ib;
mod loss;
mod maps;
mod train;

pub use ablation::{default_grid, run_ablation, AblationGroup, AblationReport, AblationRow};
pub use additivity::{error_additivity_check, planted_chain, AdditivityReport, GaussianStage};
pub use curvature::{curvature_penalty, curvature_with_grad, Curvature, DEFAULT_K_NN};
pub use ib::ib_objective_estimate;
pub use loss::{
    geo_loss, ClassifierHeads, Head, HeadBatch, HeadLoss, LossConfig, DEFAULT_HEAD_DIMS,
    DEFAULT_LABEL_SMOOTHING, DEFAULT_TAU,
};
pub use maps::{
    fit_linear_map, fit_procrustes, mlp_hidden_width, AlignmentMap, LinearMap, MapKind, MapTrace, MlpMap,
    ProcrustesMap,
};
pub use train::{
    fit_budget_constant, scale_labels, train_alignment, train_mlp_map, train_on_scales, AlignConfig, AlignmentReport,
    Direction, EpochMetrics, ErrorBudget, MetricTriple, StepLoss, TrainedMaps,
};

use nalgebra::DMatrix;

use crate::error::{MsmaError, Result};
use crate::repr_store::{LayerStack, Scale};

/// Pooled global / intermediate / local representations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRepresentation {
    pub global: DMatrix<f64>,
    pub intermediate: DMatrix<f64>,
    pub local: DMatrix<f64>,
    /// 1-based inclusive layer ranges `[local, intermediate, global]`.
    pub ranges: [(usize, usize); 3],
}

impl ScaleRepresentation {
    pub fn get(&self, s: Scale) -> &DMatrix<f64> {
        match s {
            Scale::Local => &self.local,
            Scale::Intermediate => &self.intermediate,
            Scale::Global => &self.global,
        }
    }
}

/// Layer ranges `[1, l1]`, `(l1, l2]`, `(l2, L]` for boundaries `(l1, l2)`.
pub fn scale_ranges(n_layers: usize, (l1, l2): (usize, usize)) -> Result<[(usize, usize); 3]> {
    if !(1 <= l1 && l1 < l2 && l2 < n_layers) {
        return Err(MsmaError::validation(
            "boundaries",
            format!("({l1}, {l2}) leaves an empty range for L = {n_layers}; need 1 ≤ l1 < l2 < L"),
        ));
    }
    Ok([(1, l1), (l1 + 1, l2), (l2 + 1, n_layers)])
}

/// Mean over the layers of each range (layers are already token-pooled).
pub fn pool_scales(stack: &LayerStack, boundaries: (usize, usize)) -> Result<ScaleRepresentation> {
    let ranges = scale_ranges(stack.n_layers(), boundaries)?;
    let pool = |(a, b): (usize, usize)| -> Result<DMatrix<f64>> {
        let mut acc = stack.layer_matrix(a)?;
        for l in a + 1..=b {
            acc += stack.layer_matrix(l)?;
        }
        Ok(acc / (b - a + 1) as f64)
    };
    let out = ScaleRepresentation {
        local: pool(ranges[0])?,
        intermediate: pool(ranges[1])?,
        global: pool(ranges[2])?,
        ranges,
    };
    for m in [&out.local, &out.intermediate, &out.global] {
        crate::numeric::check_finite(m, "pooled scale")?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr_store::{generate_synthetic, SyntheticSpec};

    #[test]
    fn ranges_follow_boundaries() {
        assert_eq!(scale_ranges(12, (2, 8)).unwrap(), [(1, 2), (3, 8), (9, 12)]);
        assert_eq!(scale_ranges(12, (10, 11)).unwrap(), [(1, 10), (11, 11), (12, 12)]);
        assert!(scale_ranges(12, (11, 12)).unwrap_err().is_validation());
        assert!(scale_ranges(12, (12, 12)).is_err());
        assert!(scale_ranges(12, (0, 4)).is_err());
    }

    #[test]
    fn pooling_averages_layers() {
        let stack = generate_synthetic(&SyntheticSpec::new(6, (1, 3), 4).with_samples(16)).unwrap();
        let s = pool_scales(&stack, (1, 3)).unwrap();
        assert_eq!(s.local, stack.layer_matrix(1).unwrap());
        let mid = (stack.layer_matrix(2).unwrap() + stack.layer_matrix(3).unwrap()) / 2.0;
        assert!((&s.intermediate - mid).abs().max() < 1e-12);
        assert_eq!(s.global.shape(), (16, 16));
    }
}
