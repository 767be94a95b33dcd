use std::path::{Path, PathBuf};

use crossdiff::actstore::{ActivationDataset, DatasetManifest};
use crossdiff::crosscoder::{train, Checkpoint, CrosscoderConfig};
use serde::Serialize;

use crate::config::RunConfigFile;
use crate::io::{ensure_dir, write_csv, write_json, CliError, CliResult};

pub const FINAL_DIR: &str = "final";
pub const CHECKPOINTS_DIR: &str = "checkpoints";

#[derive(Serialize)]
struct ConfigEcho<'a> {
    manifest: &'a Path,
    crosscoder: &'a CrosscoderConfig,
    top_n: usize,
    bins: usize,
    fraction: f64,
    min_cosine: f64,
}

pub fn run(mut file: RunConfigFile, manifest: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> CliResult {
    if let Some(m) = manifest {
        file.manifest = Some(m);
    }
    if let Some(s) = seed {
        file.seed = s;
    }
    let manifest_path = file.manifest.clone().ok_or_else(|| {
        CliError::config("missing required field `manifest` (set it in the config or pass --manifest)")
    })?;
    let out = ensure_dir(&out.or(file.out.clone()).unwrap_or_else(|| PathBuf::from(".")))?;

    let manifest = DatasetManifest::load(&manifest_path)?;
    let data = ActivationDataset::load(&manifest)?;
    let config = file.crosscoder(&manifest.models, data.d_model(), data.n_tokens())?;
    write_json(
        &out.join("config.json"),
        &ConfigEcho {
            manifest: &manifest_path,
            crosscoder: &config,
            top_n: file.top_n,
            bins: file.bins,
            fraction: file.fraction,
            min_cosine: file.min_cosine,
        },
    )?;

    let snapshots = out.join(CHECKPOINTS_DIR);
    let ckpt = train(&config, &data, |c| {
        c.save(snapshots.join(format!("step_{:08}", c.step)))?;
        Ok(())
    })?;
    ckpt.save(out.join(FINAL_DIR))?;
    write_loss_log(&out.join("loss_log.csv"), &ckpt)?;
    eprintln!(
        "trained {} steps; final loss {:.6}",
        ckpt.step,
        ckpt.final_loss().map_or(f64::NAN, |l| l.total)
    );
    Ok(())
}

fn write_loss_log(path: &Path, ckpt: &Checkpoint) -> CliResult {
    let ids = &ckpt.config.model_ids;
    let mut header = vec!["step".to_string(), "total".into(), "sparsity".into()];
    header.extend(ids.iter().map(|id| format!("recon_{id}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = ckpt.loss_log.iter().map(|e| {
        let mut row = vec![
            e.step.to_string(),
            e.loss.total.to_string(),
            e.loss.sparsity.to_string(),
        ];
        row.extend(ids.iter().map(|id| cell(e.loss.recon_per_model.get(id))));
        row
    });
    write_csv(path, &header, rows)
}

fn cell(v: Option<&f64>) -> String {
    crate::io::cell(v.copied())
}
