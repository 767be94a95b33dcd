use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::SynthConfig;
use super::dictionary::{gen_dictionary, turnover_sequence, AtomRole, GroundTruthDictionary};
use crate::actstore::{write_shard, DatasetManifest, ShardHeader, TokenMeta};
use crate::error::{Error, Result};
use crate::genfeat::{EvalRecord, EvalRecords};
use crate::numerics::{mix_seed, seeded_rng, Matrix};
use crate::{par, SCHEMA_VERSION};

const DICT_STREAM: u64 = 0xd1c7;
const TURNOVER_STREAM: u64 = 0x7a4e;
const TOKEN_STREAM: u64 = 0x70c3;
const TASK_STREAM: u64 = 0x7a5c;
/// Tokens sampled when estimating normalization scales.
const SCALE_SAMPLE: usize = 8192;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const EVAL_RECORDS_FILE: &str = "eval_records.json";
pub const CRITICAL_MANIFEST_FILE: &str = "critical_manifest.json";

/// Which atoms fire on one token and how strongly. Every atom consumes the
/// same number of draws whether it fires or not, so the firing pattern does
/// not depend on presence.
pub fn sample_firing<R: Rng + ?Sized>(
    dict: &GroundTruthDictionary,
    config: &SynthConfig,
    rng: &mut R,
) -> Vec<(usize, f64)> {
    let mut fired = Vec::new();
    for (j, &rate) in dict.firing_rate.iter().enumerate() {
        let u: f64 = rng.random();
        let m = rng.random_range(config.magnitude_min..config.magnitude_max);
        if u < rate {
            fired.push((j, m));
        }
    }
    fired
}

/// Adds `Σ magnitude · presence · atom` plus noise for every model into `row`,
/// laid out as `k` consecutive `d_model` blocks.
fn render<R: Rng + ?Sized>(
    dict: &GroundTruthDictionary,
    config: &SynthConfig,
    fired: &[(usize, f64)],
    row: &mut [f32],
    rng: &mut R,
) {
    let d = dict.d_model();
    for (m, id) in dict.model_ids.iter().enumerate() {
        let pres = &dict.presence[id];
        let block = &mut row[m * d..(m + 1) * d];
        let mut acc = vec![0.0f64; d];
        for &(j, mag) in fired {
            let c = mag * pres[j];
            if c != 0.0 {
                for (a, &x) in acc.iter_mut().zip(dict.atom(j)) {
                    *a += c * x;
                }
            }
        }
        if config.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
            acc.iter_mut().for_each(|a| *a += normal.sample(rng));
        }
        for (b, a) in block.iter_mut().zip(acc) {
            *b = a as f32;
        }
    }
}

fn split_models(buf: Vec<f32>, n: usize, k: usize, d: usize) -> Vec<Matrix<f32>> {
    (0..k)
        .map(|m| Matrix::from_fn(n, d, |t, c| buf[t * k * d + m * d + c]))
        .collect()
}

/// `n` aligned tokens per model. Token `t` draws from its own generator, so
/// the output does not depend on the thread count.
pub fn token_activations(
    dict: &GroundTruthDictionary,
    config: &SynthConfig,
    n: usize,
    stream: u64,
) -> Vec<Matrix<f32>> {
    let (k, d) = (dict.model_ids.len(), dict.d_model());
    let mut buf = vec![0.0f32; n * k * d];
    let seed = mix_seed(config.seed, TOKEN_STREAM ^ (stream << 20));
    par::for_each_row(&mut buf, k * d, |t, row| {
        let mut rng = seeded_rng(seed, t as u64);
        let fired = sample_firing(dict, config, &mut rng);
        render(dict, config, &fired, row, &mut rng);
    });
    split_models(buf, n, k, d)
}

/// Shared atoms that fire strongly on task `t`'s critical samples.
pub fn task_distractors(dict: &GroundTruthDictionary, config: &SynthConfig, task: usize) -> Vec<usize> {
    let per = config.tasks.distractors_per_task;
    dict.with_role(AtomRole::Shared)
        .into_iter()
        .skip(task * per)
        .take(per)
        .collect()
}

pub fn task_name(t: usize) -> String {
    format!("task{t}")
}

/// Evaluation samples of every task with their final-token activations.
#[derive(Debug, Clone)]
pub struct TaskSamples {
    pub records: Vec<EvalRecord>,
    pub meta: Vec<TokenMeta>,
    pub acts: Vec<Matrix<f32>>,
}

/// Critical samples carry background activity plus the task's distractors in
/// every model and the generalization atoms wherever they are present (the RL
/// model only). Background firing of those planted atoms is suppressed.
/// Non-critical samples carry background only and are labelled as solved or
/// missed by every model alike.
pub fn task_samples(dict: &GroundTruthDictionary, config: &SynthConfig, stream: u64) -> TaskSamples {
    let tc = &config.tasks;
    let per_task = tc.critical_per_task + tc.non_critical_per_task;
    let n = tc.n_tasks * per_task;
    let (k, d) = (dict.model_ids.len(), dict.d_model());
    let generalization = dict.with_role(AtomRole::Generalization);
    let distractors: Vec<Vec<usize>> = (0..tc.n_tasks).map(|t| task_distractors(dict, config, t)).collect();

    let mut buf = vec![0.0f32; n * k * d];
    let seed = mix_seed(config.seed, TASK_STREAM ^ (stream << 20));
    par::for_each_row(&mut buf, k * d, |i, row| {
        let (t, s) = (i / per_task, i % per_task);
        let mut rng = seeded_rng(seed, i as u64);
        let mut fired = sample_firing(dict, config, &mut rng);
        if s < tc.critical_per_task {
            fired.retain(|(j, _)| !generalization.contains(j) && !distractors[t].contains(j));
            fired.extend(distractors[t].iter().map(|&j| (j, tc.distractor_magnitude)));
            fired.extend(generalization.iter().map(|&j| (j, tc.generalization_magnitude)));
        }
        render(dict, config, &fired, row, &mut rng);
    });

    let mut records = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for t in 0..tc.n_tasks {
        for s in 0..per_task {
            let critical = s < tc.critical_per_task;
            let sample_id = if critical {
                format!("{}-c{s:04}", task_name(t))
            } else {
                format!("{}-n{s:04}", task_name(t))
            };
            let both = s % 2 == 0;
            let correct_by_model = dict
                .model_ids
                .iter()
                .enumerate()
                .map(|(m, id)| {
                    let ok = if critical { m == k - 1 } else { both };
                    (id.clone(), ok)
                })
                .collect();
            records.push(EvalRecord {
                sample_id: sample_id.clone(),
                task: task_name(t),
                correct_by_model,
            });
            meta.push(TokenMeta {
                sample_id,
                position: 0,
                is_final_token: true,
            });
        }
    }
    TaskSamples {
        records,
        meta,
        acts: split_models(buf, n, k, d),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistractors {
    pub task: String,
    pub atoms: Vec<usize>,
}

/// Everything needed to score a crosscoder trained on the generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub schema_version: u32,
    pub checkpoint: usize,
    pub config: SynthConfig,
    pub dictionary: GroundTruthDictionary,
    pub distractors: Vec<TaskDistractors>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Paths written for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthArtifacts {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
    pub eval_records: Option<PathBuf>,
    pub critical_manifest: Option<PathBuf>,
}

fn write_group(
    dir: &Path,
    rel: &str,
    dict: &GroundTruthDictionary,
    config: &SynthConfig,
    acts: &[Matrix<f32>],
    meta: Option<&[TokenMeta]>,
) -> Result<Vec<PathBuf>> {
    dict.model_ids
        .iter()
        .zip(acts)
        .map(|(id, a)| {
            let file = PathBuf::from(format!("{rel}_{id}.acts"));
            let header = ShardHeader::new(id, config.layer_index, a.cols(), a.rows());
            write_shard(dir.join(&file), &header, a, meta)?;
            Ok(file)
        })
        .collect()
}

/// Writes shards, manifest and ground truth for one dictionary into `dir`;
/// with tasks configured, also eval records and a manifest of final-token
/// activations that reuses the training normalization.
pub fn gen_dataset(
    dict: &GroundTruthDictionary,
    config: &SynthConfig,
    dir: impl AsRef<Path>,
    checkpoint: usize,
) -> Result<SynthArtifacts> {
    config.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("shards")).map_err(|e| Error::io(dir, e))?;
    if config.n_tokens == 0 {
        return Err(Error::InvalidConfig("n_tokens must be positive".into()));
    }

    let mut manifest = DatasetManifest::new(dict.model_ids.clone(), dir);
    manifest.source_tags = vec!["synthetic".into(), format!("checkpoint={checkpoint}")];
    let mut start = 0;
    let mut g = 0;
    while start < config.n_tokens {
        let n = config.shard_tokens.min(config.n_tokens - start);
        let stream = ((checkpoint as u64) << 24) | g as u64;
        let acts = token_activations(dict, config, n, stream);
        let files = write_group(dir, &format!("shards/group_{g:04}"), dict, config, &acts, None)?;
        manifest.shard_groups.push(files);
        start += n;
        g += 1;
    }
    manifest.estimate_normalization(SCALE_SAMPLE)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;

    let distractors = (0..config.tasks.n_tasks)
        .map(|t| TaskDistractors {
            task: task_name(t),
            atoms: task_distractors(dict, config, t),
        })
        .collect();
    let truth = GroundTruth {
        schema_version: SCHEMA_VERSION,
        checkpoint,
        config: config.clone(),
        dictionary: dict.clone(),
        distractors,
    };
    let truth_path = dir.join(GROUND_TRUTH_FILE);
    std::fs::write(&truth_path, serde_json::to_string_pretty(&truth)?).map_err(|e| Error::io(&truth_path, e))?;

    let (mut eval_records, mut critical_manifest) = (None, None);
    if config.tasks.n_tasks > 0 {
        let samples = task_samples(dict, config, checkpoint as u64);
        let rec_path = dir.join(EVAL_RECORDS_FILE);
        EvalRecords::new(samples.records).save(&rec_path)?;
        std::fs::create_dir_all(dir.join("critical")).map_err(|e| Error::io(dir, e))?;
        let mut cm = DatasetManifest::new(dict.model_ids.clone(), dir);
        cm.shard_groups.push(write_group(
            dir,
            "critical/final_tokens",
            dict,
            config,
            &samples.acts,
            Some(&samples.meta),
        )?);
        cm.normalization = manifest.normalization.clone();
        cm.source_tags = vec!["synthetic".into(), "final_token".into()];
        let cm_path = dir.join(CRITICAL_MANIFEST_FILE);
        cm.save(&cm_path)?;
        eval_records = Some(rec_path);
        critical_manifest = Some(cm_path);
    }
    Ok(SynthArtifacts {
        dir: dir.to_path_buf(),
        manifest: manifest_path,
        ground_truth: truth_path,
        eval_records,
        critical_manifest,
    })
}

/// Full generation from a config: one dataset in `dir`, or with several
/// pseudo-checkpoints one dataset per `dir/ckpt_{c}`.
pub fn synthesize(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<Vec<SynthArtifacts>> {
    config.validate()?;
    let dir = dir.as_ref();
    let dict = gen_dictionary(config, &mut seeded_rng(config.seed, DICT_STREAM))?;
    if config.n_checkpoints == 1 {
        return Ok(vec![gen_dataset(&dict, config, dir, 0)?]);
    }
    turnover_sequence(&dict, config, &mut seeded_rng(config.seed, TURNOVER_STREAM))
        .iter()
        .enumerate()
        .map(|(c, d)| gen_dataset(d, config, dir.join(format!("ckpt_{c}")), c))
        .collect()
}

/// Dictionaries `synthesize` would use, without writing anything.
pub fn synth_dictionaries(config: &SynthConfig) -> Result<Vec<GroundTruthDictionary>> {
    config.validate()?;
    let dict = gen_dictionary(config, &mut seeded_rng(config.seed, DICT_STREAM))?;
    Ok(turnover_sequence(
        &dict,
        config,
        &mut seeded_rng(config.seed, TURNOVER_STREAM),
    ))
}
