use std::path::{Path, PathBuf};

use crossdiff::attribution::{
    decoder_l1_norms, histogram, mas, match_all, match_features, nrn, overlap_matrix, rank_by_nrn, rank_shift,
    NrnVector, RankedFeatures,
};
use crossdiff::crosscoder::Checkpoint;
use serde::Serialize;

use crate::io::{cell, ensure_dir, write_csv, write_json, CliError, CliResult};

/// Analysis parameters after merging flags over the config file.
pub struct Params {
    pub out: PathBuf,
    pub top_n: usize,
    pub bins: usize,
    pub min_cosine: f64,
    /// Model whose decoder columns drive cross-checkpoint matching; defaults
    /// to the last model.
    pub model: Option<String>,
}

struct Loaded {
    label: String,
    ckpt: Checkpoint,
}

fn load(paths: &[PathBuf]) -> CliResult<Vec<Loaded>> {
    let loaded = paths
        .iter()
        .map(|p| {
            Ok(Loaded {
                label: p.display().to_string(),
                ckpt: Checkpoint::load(p)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    if let Some(first) = loaded.first() {
        let ids = &first.ckpt.config.model_ids;
        for l in &loaded[1..] {
            if &l.ckpt.config.model_ids != ids {
                return Err(CliError::mismatch(format!(
                    "{} has models {:?}, {} has {:?}",
                    first.label, ids, l.label, l.ckpt.config.model_ids
                )));
            }
        }
    }
    Ok(loaded)
}

fn nrn_of(l: &Loaded) -> CliResult<NrnVector> {
    let ids = &l.ckpt.config.model_ids;
    if ids.len() != 2 {
        return Err(CliError::mismatch(format!(
            "NRN needs a two-model crosscoder; {} has {:?}",
            l.label, ids
        )));
    }
    Ok(nrn(&decoder_l1_norms(&l.ckpt.params), &ids[0], &ids[1])?)
}

fn rankings(loaded: &[Loaded], top_n: usize) -> CliResult<Vec<RankedFeatures>> {
    loaded
        .iter()
        .map(|l| Ok(rank_by_nrn(&nrn_of(l)?, &l.label, top_n)?))
        .collect()
}

fn reference_model(loaded: &[Loaded], p: &Params) -> String {
    p.model
        .clone()
        .unwrap_or_else(|| loaded[0].ckpt.config.model_ids.last().cloned().unwrap_or_default())
}

fn need(paths: &[PathBuf], n: usize, what: &str) -> CliResult {
    if paths.len() < n {
        return Err(CliError::config(format!("{what} needs at least {n} checkpoint(s)")));
    }
    Ok(())
}

pub fn nrn_cmd(paths: &[PathBuf], p: &Params) -> CliResult {
    need(paths, 1, "nrn")?;
    let out = ensure_dir(&p.out)?;
    let l = &load(&paths[..1])?[0];
    let v = nrn_of(l)?;
    write_csv(
        &out.join("nrn.csv"),
        &["feature", "nrn"],
        v.values.iter().enumerate().map(|(k, x)| vec![k.to_string(), cell(*x)]),
    )?;
    write_json(&out.join("nrn.json"), &v)
}

pub fn mas_cmd(paths: &[PathBuf], p: &Params) -> CliResult {
    need(paths, 1, "mas")?;
    let out = ensure_dir(&p.out)?;
    let l = &load(&paths[..1])?[0];
    let ids = &l.ckpt.config.model_ids;
    if ids.len() != 3 {
        return Err(CliError::mismatch(format!(
            "MAS needs a three-model crosscoder; {} has {:?}",
            l.label, ids
        )));
    }
    let order: Vec<&str> = ids.iter().map(String::as_str).collect();
    let table = mas(&decoder_l1_norms(&l.ckpt.params), &order)?;
    let mut header = vec!["feature"];
    header.extend(order.iter().copied());
    write_csv(
        &out.join("mas.csv"),
        &header,
        table.rows.iter().enumerate().map(|(k, row)| {
            let mut r = vec![k.to_string()];
            match row {
                Some(v) => r.extend(v.iter().map(f64::to_string)),
                None => r.extend(order.iter().map(|_| String::new())),
            }
            r
        }),
    )?;
    write_json(&out.join("mas.json"), &table)
}

#[derive(Serialize)]
struct RankDoc<'a> {
    rankings: &'a [RankedFeatures],
}

pub fn rank_cmd(paths: &[PathBuf], p: &Params) -> CliResult {
    need(paths, 1, "rank")?;
    let out = ensure_dir(&p.out)?;
    let loaded = load(paths)?;
    let ranked = rankings(&loaded, p.top_n)?;
    write_csv(
        &out.join("rank.csv"),
        &["checkpoint", "rank", "feature", "nrn"],
        ranked.iter().flat_map(|r| {
            r.entries.iter().enumerate().map(|(i, e)| {
                vec![
                    r.label.clone(),
                    (i + 1).to_string(),
                    e.index.to_string(),
                    e.value.to_string(),
                ]
            })
        }),
    )?;
    write_json(&out.join("rank.json"), &RankDoc { rankings: &ranked })
}

pub fn overlap_cmd(paths: &[PathBuf], p: &Params) -> CliResult {
    need(paths, 2, "overlap")?;
    let out = ensure_dir(&p.out)?;
    let loaded = load(paths)?;
    let ranked = rankings(&loaded, p.top_n)?;
    let params: Vec<_> = loaded.iter().map(|l| l.ckpt.params.clone()).collect();
    let matchings = match_all(&params, &reference_model(&loaded, p), p.min_cosine)?;
    let m = overlap_matrix(&ranked, &matchings)?;
    let mut header = vec!["checkpoint"];
    header.extend(m.labels.iter().map(String::as_str));
    write_csv(
        &out.join("overlap.csv"),
        &header,
        m.fractions.iter().zip(&m.labels).map(|(row, label)| {
            let mut r = vec![label.clone()];
            r.extend(row.iter().map(f64::to_string));
            r
        }),
    )?;
    write_json(&out.join("overlap.json"), &m)
}

pub fn rankshift_cmd(paths: &[PathBuf], p: &Params) -> CliResult {
    if paths.len() != 2 {
        return Err(CliError::config("rankshift takes exactly two checkpoints (old, new)"));
    }
    let out = ensure_dir(&p.out)?;
    let loaded = load(paths)?;
    let ranked = rankings(&loaded, p.top_n)?;
    let matching = match_features(
        &loaded[0].ckpt.params,
        &loaded[1].ckpt.params,
        &reference_model(&loaded, p),
        p.min_cosine,
    )?;
    let table = rank_shift(&ranked[0], &ranked[1], &matching)?;
    write_csv(
        &out.join("rankshift.csv"),
        &["old_feature", "new_feature", "old_rank", "new_rank", "shift", "blank"],
        table.rows.iter().map(|r| {
            vec![
                cell(r.old_index),
                cell(r.new_index),
                cell(r.old_rank),
                cell(r.new_rank),
                cell(r.shift),
                r.blank.to_string(),
            ]
        }),
    )?;
    write_json(&out.join("rankshift.json"), &table)
}

pub fn hist_cmd(paths: &[PathBuf], p: &Params) -> CliResult {
    need(paths, 1, "hist")?;
    let out = ensure_dir(&p.out)?;
    let l = &load(&paths[..1])?[0];
    let h = histogram(&nrn_of(l)?.values, p.bins)?;
    write_csv(
        &out.join("hist.csv"),
        &["bin_lo", "bin_hi", "count"],
        h.counts.iter().enumerate().map(|(i, c)| {
            vec![
                h.bin_edges[i].to_string(),
                h.bin_edges[i + 1].to_string(),
                c.to_string(),
            ]
        }),
    )?;
    write_json(&out.join("hist.json"), &h)
}

pub fn out_dir(flag: Option<PathBuf>, file: Option<&Path>) -> PathBuf {
    flag.or_else(|| file.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."))
}
