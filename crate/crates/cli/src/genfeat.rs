use std::path::{Path, PathBuf};

use crossdiff::actstore::{ActivationDataset, DatasetManifest};
use crossdiff::crosscoder::Checkpoint;
use crossdiff::genfeat::{
    critical_activations, export_intervention, gen_scores, intersect, select_critical, threshold_features, EvalRecords,
    FeatureIntersection, GenScoreVector, InterventionMode, TaskFeatureSet,
};
use crossdiff::Error;
use serde::{Deserialize, Serialize};

use crate::io::{ensure_dir, read_json, write_csv, write_json, CliError, CliResult, EXIT_EMPTY_SET};

pub const SCORES_FILE: &str = "scores.json";
pub const SETS_FILE: &str = "sets.json";
pub const INTERSECTION_FILE: &str = "intersection.json";
pub const SPEC_FILE: &str = "intervention.json";

#[derive(Serialize, Deserialize)]
pub struct ScoresDoc {
    pub base_model_id: String,
    pub rl_model_id: String,
    pub tasks: Vec<GenScoreVector>,
}

#[derive(Serialize, Deserialize)]
pub struct SetsDoc {
    pub sets: Vec<TaskFeatureSet>,
}

fn rl_model(ckpt: &Checkpoint, model: Option<String>) -> String {
    model.unwrap_or_else(|| ckpt.config.model_ids.last().cloned().unwrap_or_default())
}

/// Scores every task in the evaluation records. `manifest` indexes the
/// critical samples' activations, already carrying the training scales.
pub fn score(ckpt_path: &Path, records: &Path, manifest: &Path, model: Option<String>, out: &Path) -> CliResult {
    let out = ensure_dir(out)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let base = ckpt.config.model_ids[0].clone();
    let rl = rl_model(&ckpt, model);
    let records = EvalRecords::load(records)?;
    let sets = select_critical(&records.records, &base, &rl)?;
    if sets.is_empty() {
        return Err(CliError::new(EXIT_EMPTY_SET, "evaluation records contain no tasks"));
    }
    let data = ActivationDataset::load(&DatasetManifest::load(manifest)?)?;
    let mut tasks = Vec::with_capacity(sets.len());
    for set in &sets {
        if set.sample_ids.is_empty() {
            return Err(Error::EmptyCriticalSet(set.task.clone()).into());
        }
        let (b, r) = critical_activations(&data, set, &base, &rl)?;
        tasks.push(gen_scores(&ckpt.params, &base, &rl, &set.task, &b, &r)?);
        eprintln!("{}: {} critical samples", set.task, set.sample_ids.len());
    }
    let mut header = vec!["feature"];
    header.extend(tasks.iter().map(|t| t.task.as_str()));
    write_csv(
        &out.join("scores.csv"),
        &header,
        (0..ckpt.params.d_sparse()).map(|k| {
            let mut row = vec![k.to_string()];
            row.extend(tasks.iter().map(|t| t.scores[k].to_string()));
            row
        }),
    )?;
    write_json(
        &out.join(SCORES_FILE),
        &ScoresDoc {
            base_model_id: base,
            rl_model_id: rl,
            tasks,
        },
    )
}

pub fn threshold(scores: &Path, fraction: f64, out: &Path) -> CliResult {
    let out = ensure_dir(out)?;
    let doc: ScoresDoc = read_json(scores)?;
    let sets = doc
        .tasks
        .iter()
        .map(|t| Ok(threshold_features(t, fraction)?))
        .collect::<CliResult<Vec<_>>>()?;
    write_csv(
        &out.join("sets.csv"),
        &["task", "feature", "score"],
        sets.iter().zip(&doc.tasks).flat_map(|(s, t)| {
            s.features
                .iter()
                .map(|&k| vec![s.task.clone(), k.to_string(), t.scores[k].to_string()])
        }),
    )?;
    write_json(&out.join(SETS_FILE), &SetsDoc { sets })
}

/// Intersects the task sets found in every given sets file.
pub fn intersect_cmd(files: &[PathBuf], out: &Path) -> CliResult {
    let out = ensure_dir(out)?;
    let mut sets = Vec::new();
    for f in files {
        sets.extend(read_json::<SetsDoc>(f)?.sets);
    }
    if sets.is_empty() {
        return Err(CliError::config("no task sets given"));
    }
    let inter = intersect(&sets)?;
    write_csv(
        &out.join("intersection.csv"),
        &["feature"],
        inter.features.iter().map(|k| vec![k.to_string()]),
    )?;
    write_csv(
        &out.join("pairwise_overlap.csv"),
        &["task_a", "task_b", "overlap"],
        inter
            .pairwise
            .iter()
            .map(|p| vec![p.task_a.clone(), p.task_b.clone(), crate::io::cell(p.fraction)]),
    )?;
    write_json(&out.join(INTERSECTION_FILE), &inter)
}

pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub features: Vec<usize>,
    pub intersection: Option<PathBuf>,
    pub mode: InterventionMode,
    pub value: f64,
    pub model: Option<String>,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn export(a: ExportArgs) -> CliResult {
    let out = ensure_dir(&a.out)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = rl_model(&ckpt, a.model);
    let mut features = a.features;
    if let Some(path) = &a.intersection {
        features.extend(read_json::<FeatureIntersection>(path)?.features);
    }
    features.sort_unstable();
    features.dedup();
    let scale = match &a.manifest {
        Some(m) => DatasetManifest::load(m)?.scale_for(&model),
        None => {
            eprintln!("no --manifest given; assuming the crosscoder was trained on unscaled activations");
            1.0
        }
    };
    let id = a
        .checkpoint
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| a.checkpoint.display().to_string());
    let spec = export_intervention(
        &ckpt.params,
        &id,
        ckpt.layer_index,
        &features,
        &model,
        a.mode,
        a.value,
        scale,
    )?;
    let path = out.join(SPEC_FILE);
    spec.save(&path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}
