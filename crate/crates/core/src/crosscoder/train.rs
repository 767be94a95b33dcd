use serde::{Deserialize, Serialize};

use super::config::CrosscoderConfig;
use super::model::{backward, encode, LossBreakdown, Objective};
use super::params::CrosscoderParams;
use crate::actstore::{ActivationDataset, AlignedBatch, BatchStream, StreamPosition};
use crate::error::{Error, Result};
use crate::numerics::{adam_step_slice, seeded_rng, AdamHyper, AdamState, Matrix};

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Snapshot of a training run; enough to resume it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub layer_index: u32,
    pub params: CrosscoderParams<f32>,
    pub config: CrosscoderConfig,
    pub loss_log: Vec<LogEntry>,
    /// Position of the batch stream; with the config seed it fixes all
    /// remaining randomness.
    pub rng_state: StreamPosition,
    /// One state per tensor, in [`CrosscoderParams::tensors`] order.
    pub optimizer: Vec<AdamState<f32>>,
}

impl Checkpoint {
    pub fn objective(&self) -> Objective {
        Objective {
            beta: self.config.beta,
            norm_kind: self.config.norm_kind,
        }
    }

    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.loss_log.last().map(|e| &e.loss)
    }
}

fn check_dataset(config: &CrosscoderConfig, data: &ActivationDataset) -> Result<()> {
    if config.model_ids != data.models {
        return Err(Error::ModelSetMismatch(format!(
            "config models {:?}, dataset models {:?}",
            config.model_ids, data.models
        )));
    }
    if config.d_model != data.d_model() {
        return Err(Error::InvalidConfig(format!(
            "config d_model {} but activations have {}",
            config.d_model,
            data.d_model()
        )));
    }
    Ok(())
}

/// Fresh checkpoint at step 0.
pub fn initial_checkpoint(config: &CrosscoderConfig, data: &ActivationDataset) -> Result<Checkpoint> {
    config.validate()?;
    check_dataset(config, data)?;
    let params = CrosscoderParams::init(config, &mut seeded_rng(config.seed, INIT_STREAM))?;
    let optimizer = params
        .tensors()
        .iter()
        .map(|(_, (r, c), _)| AdamState::new(*r, *c, AdamHyper::default()))
        .collect();
    Ok(Checkpoint {
        step: 0,
        tokens_seen: 0,
        layer_index: data.layer_index,
        params,
        config: config.clone(),
        loss_log: Vec::new(),
        rng_state: StreamPosition::default(),
        optimizer,
    })
}

/// Trains from scratch for `config.total_tokens` tokens.
///
/// `on_checkpoint` receives a snapshot every `config.checkpoint_every` steps;
/// the final state is returned.
pub fn train(
    config: &CrosscoderConfig,
    data: &ActivationDataset,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    resume(initial_checkpoint(config, data)?, data, on_checkpoint)
}

/// Continues a run until `checkpoint.config.total_tokens` have been seen.
pub fn resume(
    mut ckpt: Checkpoint,
    data: &ActivationDataset,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    check_dataset(&ckpt.config, data)?;
    if ckpt.tokens_seen >= ckpt.config.total_tokens {
        return Ok(ckpt);
    }
    let objective = ckpt.objective();
    let mut stream = BatchStream::new(data, ckpt.config.batch_size, ckpt.config.seed, ckpt.rng_state)?;

    while ckpt.tokens_seen < ckpt.config.total_tokens {
        let batch = stream.next().expect("batch stream is endless");
        let (loss, grads) = match backward(&ckpt.params, &batch.acts, objective) {
            Ok(r) => r,
            Err(Error::NonFiniteLoss | Error::NonFiniteGradient) => return Err(Error::DivergedAtStep(ckpt.step)),
            Err(e) => return Err(e),
        };
        let lr = ckpt.config.lr;
        for ((param, grad), state) in ckpt
            .params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors().into_iter().map(|(_, _, g)| g))
            .zip(ckpt.optimizer.iter_mut())
        {
            adam_step_slice(param, grad, state, lr)?;
        }
        if !ckpt.params.all_finite() {
            return Err(Error::DivergedAtStep(ckpt.step));
        }
        ckpt.loss_log.push(LogEntry { step: ckpt.step, loss });
        ckpt.step += 1;
        ckpt.tokens_seen += batch.len() as u64;
        ckpt.rng_state = stream.position();

        let every = ckpt.config.checkpoint_every;
        if every > 0 && ckpt.step % every == 0 && ckpt.tokens_seen < ckpt.config.total_tokens {
            on_checkpoint(&ckpt)?;
        }
    }
    Ok(ckpt)
}

/// Fraction of tokens on which each feature exceeds `threshold`.
pub fn dead_feature_stats<'b>(
    params: &CrosscoderParams<f32>,
    batches: impl IntoIterator<Item = &'b AlignedBatch>,
    threshold: f64,
) -> Result<Vec<f64>> {
    let s = params.d_sparse();
    let mut counts = vec![0u64; s];
    let mut total = 0u64;
    for b in batches {
        let f: Matrix<f32> = encode(params, &b.acts)?;
        for row in 0..f.rows() {
            for (c, &x) in counts.iter_mut().zip(f.row(row)) {
                if x as f64 > threshold {
                    *c += 1;
                }
            }
        }
        total += f.rows() as u64;
    }
    Ok(counts
        .into_iter()
        .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect())
}
