//! Planted-feature datasets: a known dictionary, per-model presence masks,
//! synthetic evaluation tasks, and scoring of how well a trained crosscoder
//! recovers the plant.

pub mod config;
pub mod dictionary;
pub mod generate;
pub mod recovery;

pub use config::{SynthConfig, TaskConfig};
pub use dictionary::{
    gen_dictionary, turnover_sequence, AtomRole, GroundTruthDictionary, ATOM_ATTEMPTS, MAX_ATOM_COSINE,
};
pub use generate::{
    gen_dataset, sample_firing, synth_dictionaries, synthesize, task_distractors, task_name, task_samples,
    token_activations, GroundTruth, SynthArtifacts, TaskDistractors, TaskSamples, CRITICAL_MANIFEST_FILE,
    EVAL_RECORDS_FILE, GROUND_TRUTH_FILE, MANIFEST_FILE,
};
pub use recovery::{planted_params, recovery_eval, AtomRecovery, RecoveryReport, RoleSummary, RECOVERY_COSINE};
