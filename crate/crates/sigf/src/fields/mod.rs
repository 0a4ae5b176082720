//! Samplers for the Gaussian fields under study: the free field, its
//! scale-inhomogeneous image, the three-field approximation, perturbed and
//! smoothed variants, the local/binding decomposition around a vertex, and
//! cluster-law samplers.

pub mod cluster;
pub mod decompose;
pub mod dgff;
pub mod operator;
pub mod perturb;
pub mod profile;
pub mod smoothing;
pub mod three_field;

pub use cluster::{
    ClusterLaw, ClusterMode, ClusterSample, CLUSTER_WINDOW_CAP, DEFAULT_CLUSTER_BUDGET,
};
pub use decompose::{binding_evaluator, decompose_around, BindingEvaluator, Decomposition};
pub use dgff::{grid_green, sample_dgff, DGFF_EXACT_CAP};
pub use operator::{operator, sample_inhomogeneous, InhomogeneousOperator};
pub use perturb::{perturbed_field, star_perturbation};
pub use profile::{profile_integral, VarianceProfile};
pub use smoothing::{smoothing_transform, smoothing_weights};
pub use three_field::{
    calibrate_three_field, sample_component, sample_three_field, Calibration, ComponentKind,
    ThreeFieldContext,
};

use crate::lattice::{GridSpec, Vertex};
use nalgebra::DVector;

/// One realization of a field on V_N, in canonical (row-major) vertex
/// order. `underlying` retains the free-field draw φ when the sample is a
/// linear image of one, which makes conditional objects computable on the
/// realized sample.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub spec: GridSpec,
    pub heights: DVector<f64>,
    pub underlying: Option<DVector<f64>>,
    pub tag: String,
}

impl FieldSample {
    pub fn height_at(&self, v: Vertex) -> f64 {
        self.heights[self.spec.index(v)]
    }

    /// The maximum height and where it is attained (first in canonical
    /// order on ties).
    pub fn max(&self) -> (Vertex, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &h) in self.heights.iter().enumerate() {
            if h > best.1 {
                best = (i, h);
            }
        }
        (self.spec.vertex(best.0), best.1)
    }
}
