use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planted dictionary and dataset shape.
///
/// The first model is the base, the last the RL-tuned (or only tuned) model,
/// and with three models the middle one is the SFT model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub model_ids: Vec<String>,
    pub d_model: usize,
    pub n_shared: usize,
    pub n_base_only: usize,
    pub n_sft_specific: usize,
    pub n_rl_specific: usize,
    pub n_generalization: usize,
    /// Extra RL-specific atoms, absent from every model until turnover
    /// activates them.
    pub n_dormant: usize,
    pub n_tokens: usize,
    pub shard_tokens: usize,
    pub firing_rate: f64,
    pub magnitude_min: f64,
    pub magnitude_max: f64,
    pub noise_sigma: f64,
    /// Per pseudo-checkpoint probability that an active RL-specific atom is
    /// swapped for a dormant one.
    pub turnover_rate: f64,
    pub n_checkpoints: usize,
    pub tasks: TaskConfig,
    pub layer_index: u32,
    pub seed: u64,
}

/// Synthetic evaluation tasks for the generalization-feature pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_tasks: usize,
    pub critical_per_task: usize,
    /// Records per task that the base and RL models both solve or both miss.
    pub non_critical_per_task: usize,
    /// Shared atoms that fire strongly on one task's critical samples.
    pub distractors_per_task: usize,
    pub distractor_magnitude: f64,
    pub generalization_magnitude: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_tasks: 0,
            critical_per_task: 200,
            non_critical_per_task: 20,
            distractors_per_task: 2,
            distractor_magnitude: 2.0,
            generalization_magnitude: 1.0,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            model_ids: vec!["base".into(), "tuned".into()],
            d_model: 64,
            n_shared: 32,
            n_base_only: 4,
            n_sft_specific: 0,
            n_rl_specific: 8,
            n_generalization: 0,
            n_dormant: 0,
            n_tokens: 200_000,
            shard_tokens: 50_000,
            firing_rate: 0.05,
            magnitude_min: 0.5,
            magnitude_max: 2.0,
            noise_sigma: 0.01,
            turnover_rate: 0.0,
            n_checkpoints: 1,
            tasks: TaskConfig::default(),
            layer_index: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_atoms(&self) -> usize {
        self.n_shared
            + self.n_base_only
            + self.n_sft_specific
            + self.n_rl_specific
            + self.n_generalization
            + self.n_dormant
    }

    pub fn base_id(&self) -> &str {
        &self.model_ids[0]
    }

    pub fn rl_id(&self) -> &str {
        self.model_ids.last().expect("validated")
    }

    pub fn sft_id(&self) -> Option<&str> {
        (self.model_ids.len() == 3).then(|| self.model_ids[1].as_str())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let k = self.model_ids.len();
        if !(2..=3).contains(&k) {
            return bad(format!("synthetic data needs 2 or 3 models, got {k}"));
        }
        let mut ids = self.model_ids.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != k {
            return bad("model ids must be unique".into());
        }
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if k == 2 && self.n_sft_specific > 0 {
            return bad("sft-specific atoms need three models".into());
        }
        if self.n_atoms() == 0 {
            return bad("dictionary has no atoms".into());
        }
        if !(self.firing_rate > 0.0 && self.firing_rate < 1.0) {
            return bad(format!("firing_rate must lie in (0, 1), got {}", self.firing_rate));
        }
        if !(self.magnitude_min >= 0.0 && self.magnitude_min < self.magnitude_max) {
            return bad("need 0 <= magnitude_min < magnitude_max".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.turnover_rate) {
            return bad("turnover_rate must lie in [0, 1]".into());
        }
        if self.n_checkpoints == 0 {
            return bad("n_checkpoints must be at least 1".into());
        }
        if self.n_tokens > 0 && self.shard_tokens == 0 {
            return bad("shard_tokens must be positive".into());
        }
        let t = &self.tasks;
        if t.n_tasks > 0 {
            if t.n_tasks * t.distractors_per_task > self.n_shared {
                return bad(format!(
                    "{} tasks x {} distractors need that many shared atoms, have {}",
                    t.n_tasks, t.distractors_per_task, self.n_shared
                ));
            }
            if self.n_generalization == 0 {
                return bad("tasks need at least one generalization atom".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SynthConfig::default().validate().unwrap();
        assert_eq!(SynthConfig::default().n_atoms(), 44);
    }

    #[test]
    fn bad_configs() {
        let mut c = SynthConfig::default();
        c.n_sft_specific = 1;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.firing_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.tasks.n_tasks = 20;
        c.n_generalization = 1;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.tasks.n_tasks = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<SynthConfig>(r#"{"d_model": 8, "atoms": 3}"#).is_err());
        let c: SynthConfig = serde_json::from_str(r#"{"d_model": 8}"#).unwrap();
        assert_eq!(c.n_shared, 32);
    }
}
