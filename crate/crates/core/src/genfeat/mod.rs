//! Generalization features: features whose single-branch activation rises
//! most from the base model to the RL model on samples that only the RL model
//! solves, and intervention specs that steer them.

pub mod intervention;
pub mod records;
pub mod scores;

pub use intervention::{export_intervention, InterventionMode, InterventionSpec, SpecFeature, DEFAULT_AMPLIFY_VALUE};
pub use records::{critical_activations, select_critical, CriticalSet, EvalRecord, EvalRecords};
pub use scores::{
    gen_scores, intersect, threshold_features, FeatureIntersection, GenScoreVector, PairOverlap, TaskFeatureSet,
    DEFAULT_FRACTION,
};
