//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line to
//! stderr (bypassing the test harness capture); the test fails if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use crossdiff::actstore::{read_shard, write_shard, ActivationDataset, DatasetManifest, ShardHeader, TokenMeta};
use crossdiff::attribution::{
    decoder_l1_norms, mas, match_all, nrn, overlap_matrix, rank_by_nrn, rank_shift, DEFAULT_MIN_COSINE, DEFAULT_TOP_N,
};
use crossdiff::crosscoder::{
    check_gradients, train, Checkpoint, CrosscoderConfig, CrosscoderParams, GradCheckDims, NormKind,
};
use crossdiff::genfeat::{
    critical_activations, export_intervention, gen_scores, intersect, select_critical, threshold_features, EvalRecords,
    InterventionMode, DEFAULT_AMPLIFY_VALUE, DEFAULT_FRACTION,
};
use crossdiff::numerics::{seeded_rng, Matrix, DEFAULT_LR};
use crossdiff::synthlab::{
    recovery_eval, synthesize, AtomRole, GroundTruth, RecoveryReport, SynthArtifacts, SynthConfig, TaskConfig,
    RECOVERY_COSINE,
};
use rand::Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn announce(o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[{tag}] criterion {}: {} ({})",
        o.id,
        o.name,
        o.detail
    );
}

#[derive(Clone)]
struct Trained {
    ckpt: Checkpoint,
    art: SynthArtifacts,
    truth: GroundTruth,
}

/// Trains on one generated dataset for `passes` passes over its tokens.
fn train_on(art: &SynthArtifacts, d_sparse: usize, batch: usize, passes: u64, lr: f64, seed: u64) -> Trained {
    let truth = GroundTruth::load(&art.ground_truth).unwrap();
    let manifest = DatasetManifest::load(&art.manifest).unwrap();
    let data = ActivationDataset::load(&manifest).unwrap();
    let sc = &truth.config;
    let mut cfg = CrosscoderConfig::new(sc.model_ids.clone(), sc.d_model, data.n_tokens() as u64 * passes);
    cfg.d_sparse = d_sparse;
    cfg.batch_size = batch;
    cfg.lr = lr;
    cfg.seed = seed;
    let ckpt = train(&cfg, &data, |_| Ok(())).unwrap();
    Trained {
        ckpt,
        art: art.clone(),
        truth,
    }
}

fn recovery_setup() -> SynthConfig {
    SynthConfig {
        model_ids: vec!["base".into(), "tuned".into()],
        d_model: 64,
        n_shared: 32,
        n_rl_specific: 8,
        n_base_only: 4,
        n_tokens: 200_000,
        seed: 11,
        ..SynthConfig::default()
    }
}

const RECOVERY_BATCH: usize = 64;
const RECOVERY_PASSES: u64 = 10;
/// Ten trainings over 66 crowded tuned atoms do not converge at the default
/// rate inside the suite's time budget.
const DYNAMICS_LR: f64 = 1e-3;

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for kind in [NormKind::L1, NormKind::L2] {
        let r = check_gradients(GradCheckDims::default(), kind, 0, false).unwrap();
        worst = worst.max(r.max_rel_error);
    }
    let elapsed = t.elapsed();
    Outcome {
        id: 1,
        name: "gradient correctness",
        pass: worst < 1e-4 && elapsed < Duration::from_secs(5),
        detail: format!("max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    }
}

fn attribution_algebra() -> Outcome {
    let n = 10_000;
    let d = 4;
    let ids = vec!["base".to_string(), "sft".to_string(), "rl".to_string()];
    let mut rng = seeded_rng(2024, 0);
    let mut p = CrosscoderParams::<f64>::zeros(ids.clone(), d, n);
    for m in 0..3 {
        p.dec[m] = Matrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
    }
    // Degenerate rows: some features silent in one or two models, a few in all.
    for k in (0..n).step_by(37) {
        let silent = k % 4;
        for m in 0..3 {
            if silent == 3 || m == silent {
                p.dec[m].set_column(k, &vec![0.0; d]);
            }
        }
    }
    let order = ["base", "sft", "rl"];
    let norms = decoder_l1_norms(&p);
    let table = mas(&norms, &order).unwrap();
    let v = nrn(&norms, "base", "rl").unwrap();
    let pair = mas(&norms, &["base", "rl"]).unwrap();

    let mut failures = Vec::new();
    let mut worst_sum = 0.0f64;
    for k in 0..n {
        // Independent evaluation from the raw decoder entries.
        let l1 = |m: usize| (0..d).map(|r| p.dec[m].get(r, k).abs()).sum::<f64>();
        let (o, s, r) = (l1(0), l1(1), l1(2));
        match &table.rows[k] {
            Some(row) => {
                let sum: f64 = row.iter().sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
                if row.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    failures.push(format!("MAS entry out of range at {k}"));
                }
                let want = [o / (o + s + r), s / (o + s + r), r / (o + s + r)];
                if row.iter().zip(want).any(|(a, b)| (a - b).abs() > 1e-12) {
                    failures.push(format!("MAS disagrees with hand value at {k}"));
                }
            }
            None if o + s + r == 0.0 => {}
            None => failures.push(format!("MAS undefined at {k}")),
        }
        match (v.values[k], &pair.rows[k]) {
            (Some(x), Some(row)) => {
                if !(0.0..=1.0).contains(&x) {
                    failures.push(format!("NRN out of range at {k}"));
                }
                if (row[0] - (1.0 - x)).abs() > 1e-9 || (row[1] - x).abs() > 1e-9 {
                    failures.push(format!("two-model MAS differs from (1-NRN, NRN) at {k}"));
                }
            }
            (None, None) => {}
            _ => failures.push(format!("definedness differs at {k}")),
        }
    }
    if worst_sum > 1e-9 {
        failures.push(format!("MAS row sum off by {worst_sum:e}"));
    }
    let mut worst_scale = 0.0f64;
    for c in [0.1, 10.0] {
        let mut q = p.clone();
        q.scale_decoders(c);
        let qn = decoder_l1_norms(&q);
        let qt = mas(&qn, &order).unwrap();
        let qv = nrn(&qn, "base", "rl").unwrap();
        for k in 0..n {
            if let (Some(a), Some(b)) = (&table.rows[k], &qt.rows[k]) {
                for (x, y) in a.iter().zip(b) {
                    worst_scale = worst_scale.max((x - y).abs());
                }
            }
            if let (Some(a), Some(b)) = (v.values[k], qv.values[k]) {
                worst_scale = worst_scale.max((a - b).abs());
            }
        }
    }
    if worst_scale > 1e-9 {
        failures.push(format!("scaling changed attribution by {worst_scale:e}"));
    }
    Outcome {
        id: 2,
        name: "attribution algebra",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{n} features, max row-sum error {worst_sum:.1e}, max scaling drift {worst_scale:.1e}")
        } else {
            failures[..failures.len().min(3)].join("; ")
        },
    }
}

fn two_model_recovery(dir: &Path) -> Outcome {
    let t = Instant::now();
    let art = synthesize(&recovery_setup(), dir).unwrap().remove(0);
    let run = train_on(&art, 128, RECOVERY_BATCH, RECOVERY_PASSES, DEFAULT_LR, 1);
    let r = recovery_eval(&run.ckpt.params, &run.truth.dictionary).unwrap();
    let tuned = r.rate(AtomRole::RlSpecific, |a| {
        a.cosine > 0.9 && a.nrn.is_some_and(|x| x > 0.8)
    });
    let base = r.rate(AtomRole::BaseOnly, |a| a.cosine > 0.9 && a.nrn.is_some_and(|x| x < 0.2));
    let shared = r.rate(AtomRole::Shared, |a| {
        a.cosine > 0.9 && a.nrn.is_some_and(|x| (0.35..=0.65).contains(&x))
    });
    let elapsed = t.elapsed();
    Outcome {
        id: 3,
        name: "two-model synthetic recovery",
        pass: tuned >= 0.8 && base >= 0.8 && shared >= 0.8 && elapsed < Duration::from_secs(15 * 60),
        detail: format!(
            "tuned-specific {:.0}%, base-only {:.0}%, shared {:.0}%, {:.0}s",
            tuned * 100.0,
            base * 100.0,
            shared * 100.0,
            elapsed.as_secs_f64()
        ),
    }
}

fn three_model_recovery(dir: &Path) -> Outcome {
    let sc = SynthConfig {
        model_ids: vec!["base".into(), "sft".into(), "rl".into()],
        n_sft_specific: 8,
        n_rl_specific: 3,
        seed: 12,
        ..recovery_setup()
    };
    let art = synthesize(&sc, dir).unwrap().remove(0);
    let run = train_on(&art, 128, RECOVERY_BATCH, RECOVERY_PASSES, DEFAULT_LR, 2);
    let r: RecoveryReport = recovery_eval(&run.ckpt.params, &run.truth.dictionary).unwrap();
    let mas_at = |a: &crossdiff::synthlab::AtomRecovery, c: usize| a.mas.as_ref().map_or(0.0, |m| m[c]);
    let sft_rate = r.rate(AtomRole::SftSpecific, |a| mas_at(a, 1) > 0.6);
    let rl_hits = r
        .atoms
        .iter()
        .filter(|a| a.role == AtomRole::RlSpecific && mas_at(a, 2) > 0.6)
        .count();
    let table = mas(&decoder_l1_norms(&run.ckpt.params), &["base", "sft", "rl"]).unwrap();
    let count = |c: usize| table.rows.iter().flatten().filter(|row| row[c] > 0.6).count();
    let (n_s, n_r) = (count(1), count(2));
    Outcome {
        id: 4,
        name: "three-model synthetic recovery",
        pass: sft_rate >= 0.8 && rl_hits >= 2 && n_s > n_r,
        detail: format!(
            "sft-specific MAS_S>0.6 {:.0}%, rl-specific MAS_R>0.6 {rl_hits}/3, features MAS_S>0.6 {n_s} vs MAS_R>0.6 {n_r}",
            sft_rate * 100.0
        ),
    }
}

struct DynamicsSummary {
    mean_overlap: f64,
    blanks: usize,
}

fn dynamics_run(dir: &Path, turnover: f64, seed: u64) -> DynamicsSummary {
    let sc = SynthConfig {
        model_ids: vec!["base".into(), "tuned".into()],
        d_model: 64,
        n_shared: 16,
        n_base_only: 0,
        n_rl_specific: 50,
        n_dormant: 60,
        n_tokens: 60_000,
        shard_tokens: 30_000,
        turnover_rate: turnover,
        n_checkpoints: 5,
        seed,
        ..SynthConfig::default()
    };
    let arts = synthesize(&sc, dir).unwrap();
    let params: Vec<CrosscoderParams<f32>> = arts
        .iter()
        .enumerate()
        .map(|(c, a)| {
            train_on(a, 96, RECOVERY_BATCH, RECOVERY_PASSES, DYNAMICS_LR, 100 + c as u64)
                .ckpt
                .params
        })
        .collect();
    let rankings: Vec<_> = params
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let v = nrn(&decoder_l1_norms(p), "base", "tuned").unwrap();
            rank_by_nrn(&v, &format!("ckpt_{c}"), DEFAULT_TOP_N).unwrap()
        })
        .collect();
    // Tuned-specific features have near-zero base decoder columns, so the
    // tuned model is the only usable anchor for identifying them.
    let matchings = match_all(&params, "tuned", DEFAULT_MIN_COSINE).unwrap();
    let overlap = overlap_matrix(&rankings, &matchings).unwrap();
    let blanks = (0..rankings.len() - 1)
        .map(|c| {
            rank_shift(&rankings[c], &rankings[c + 1], &matchings[&(c, c + 1)])
                .unwrap()
                .blank_count()
        })
        .sum();
    DynamicsSummary {
        mean_overlap: overlap.mean_off_diagonal(),
        blanks,
    }
}

fn dynamics_contrast(dir: &Path) -> Outcome {
    let sft = dynamics_run(&dir.join("sft_like"), 0.05, 21);
    let rl = dynamics_run(&dir.join("rl_like"), 0.5, 21);
    Outcome {
        id: 5,
        name: "dynamics contrast",
        pass: sft.mean_overlap - rl.mean_overlap >= 0.2 && rl.blanks > sft.blanks,
        detail: format!(
            "mean off-diagonal overlap {:.2} (low turnover) vs {:.2} (high turnover); blanks {} vs {}",
            sft.mean_overlap, rl.mean_overlap, sft.blanks, rl.blanks
        ),
    }
}

fn generalization_setup() -> SynthConfig {
    SynthConfig {
        model_ids: vec!["base".into(), "rl".into()],
        n_generalization: 2,
        n_tokens: 120_000,
        shard_tokens: 60_000,
        seed: 13,
        tasks: TaskConfig {
            n_tasks: 3,
            critical_per_task: 200,
            distractors_per_task: 2,
            // Distractors louder than the generalization atoms split the
            // latter across task-specific features at this dictionary size.
            distractor_magnitude: 1.0,
            generalization_magnitude: 2.0,
            ..TaskConfig::default()
        },
        ..recovery_setup()
    }
}

fn generalization_pipeline(run: &Trained) -> Outcome {
    let records = EvalRecords::load(run.art.eval_records.as_ref().unwrap()).unwrap();
    let critical = DatasetManifest::load(run.art.critical_manifest.as_ref().unwrap()).unwrap();
    let crit_data = ActivationDataset::load(&critical).unwrap();
    let sets = select_critical(&records.records, "base", "rl").unwrap();
    let params = &run.ckpt.params;

    let rec = recovery_eval(params, &run.truth.dictionary).unwrap();
    let feature_of = |atom: usize| rec.atoms[atom].feature.unwrap();
    let planted: Vec<usize> = run
        .truth
        .dictionary
        .with_role(AtomRole::Generalization)
        .into_iter()
        .map(feature_of)
        .collect();
    let distractors: BTreeSet<usize> = run
        .truth
        .distractors
        .iter()
        .flat_map(|d| d.atoms.iter().map(|&a| feature_of(a)))
        .collect();

    let mut task_sets = Vec::new();
    let mut problems = Vec::new();
    for set in &sets {
        if set.sample_ids.len() != 200 {
            problems.push(format!("{} has {} critical samples", set.task, set.sample_ids.len()));
        }
        let (base, rl) = critical_activations(&crit_data, set, "base", "rl").unwrap();
        let scores = gen_scores(params, "base", "rl", &set.task, &base, &rl).unwrap();
        let ts = threshold_features(&scores, DEFAULT_FRACTION).unwrap();
        if !planted.iter().all(|k| ts.features.contains(k)) {
            problems.push(format!("{} misses a planted feature", set.task));
        }
        task_sets.push(ts);
    }
    let inter = intersect(&task_sets).unwrap();
    let min_overlap = inter
        .pairwise
        .iter()
        .map(|p| p.fraction.unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    if !planted.iter().all(|k| inter.features.contains(k)) {
        problems.push("intersection misses a planted feature".into());
    }
    let leaked = inter.features.iter().filter(|k| distractors.contains(k)).count();
    if leaked > 0 {
        problems.push(format!("{leaked} distractor features in the intersection"));
    }
    if min_overlap < 0.8 {
        problems.push(format!("pairwise overlap {min_overlap:.2}"));
    }
    Outcome {
        id: 6,
        name: "generalization-feature pipeline",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "task set sizes {:?}, intersection {:?}, planted {:?}, min pairwise overlap {min_overlap:.2}",
                task_sets.iter().map(|t| t.features.len()).collect::<Vec<_>>(),
                inter.features,
                planted
            )
        } else {
            problems.join("; ")
        },
    }
}

fn patch_rule(run: &Trained) -> Outcome {
    let critical = DatasetManifest::load(run.art.critical_manifest.as_ref().unwrap()).unwrap();
    let scale = critical.scale_for("rl");
    let rl_index = critical.models.iter().position(|m| m == "rl").unwrap();
    // Raw activations: the spec carries the scale itself.
    let raw = critical.read_model_shards(rl_index).unwrap().remove(0).data;
    let params = &run.ckpt.params;
    let rec = recovery_eval(params, &run.truth.dictionary).unwrap();
    let gen_atom = run.truth.dictionary.with_role(AtomRole::Generalization)[0];
    let k = rec.atoms[gen_atom].feature.unwrap();
    // The atom may be spread over near-duplicate features, each absorbing part
    // of the patch; patch every feature whose decoder column points at it.
    let m = params.model_index("rl").unwrap();
    let dec = &params.dec[m];
    let atom = run.truth.dictionary.atom(gen_atom);
    let mut group: Vec<usize> = (0..dec.cols())
        .filter(|&j| {
            let col: Vec<f64> = (0..dec.rows()).map(|r| f64::from(dec.get(r, j))).collect();
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            norm > 0.0 && col.iter().zip(atom).map(|(x, y)| x * y).sum::<f64>() / norm > RECOVERY_COSINE
        })
        .collect();
    if !group.contains(&k) {
        group.push(k);
    }

    let zero = export_intervention(
        params,
        "acceptance",
        0,
        &group,
        "rl",
        InterventionMode::Zero,
        0.0,
        scale,
    )
    .unwrap();
    let amp = export_intervention(
        params,
        "acceptance",
        0,
        &group,
        "rl",
        InterventionMode::Amplify,
        DEFAULT_AMPLIFY_VALUE,
        scale,
    )
    .unwrap();
    let feat = zero.features.iter().find(|f| f.index == k).unwrap();
    let (mut before, mut after_zero, mut after_amp, mut n) = (0.0, 0.0, 0.0, 0usize);
    for r in 0..raw.rows() {
        let a = raw.row(r);
        let f = feat.activation(a);
        if f <= 0.0 {
            continue;
        }
        n += 1;
        before += f;
        after_zero += feat.activation(&zero.apply(a).unwrap());
        after_amp += feat.activation(&amp.apply(a).unwrap());
    }
    let nf = n.max(1) as f64;
    let (before, after_zero, after_amp) = (before / nf, after_zero / nf, after_amp / nf);
    Outcome {
        id: 7,
        name: "patch-rule causal check",
        pass: n > 0 && after_zero < 0.1 * before && (after_amp - 3.0).abs() <= 0.3,
        detail: format!(
            "{} patched features, {n} firing tokens, mean activation {before:.3} -> zero {after_zero:.3}, amplify {after_amp:.3}",
            group.len()
        ),
    }
}

fn files_identical(a: &Path, b: &Path) -> bool {
    let list = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (la, lb) = (list(a), list(b));
    la == lb
        && la
            .iter()
            .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
}

fn format_and_determinism(dir: &Path, suite_start: Instant) -> Outcome {
    let mut problems = Vec::new();
    std::fs::create_dir_all(dir).unwrap();

    let mut rng = seeded_rng(8, 0);
    let data = Matrix::from_fn(37, 5, |_, _| rng.random_range(-3.0f32..3.0));
    let meta: Vec<TokenMeta> = (0..37)
        .map(|i| TokenMeta {
            sample_id: format!("s{}", i / 4),
            position: (i % 4) as i64,
            is_final_token: i % 4 == 3,
        })
        .collect();
    let first = dir.join("a.acts");
    let second = dir.join("b.acts");
    write_shard(&first, &ShardHeader::new("base", 7, 5, 37), &data, Some(&meta)).unwrap();
    let back = read_shard(&first).unwrap();
    back.write(&second).unwrap();
    if std::fs::read(&first).unwrap() != std::fs::read(&second).unwrap() || back.data != data {
        problems.push("shard round trip is not byte-exact".to_string());
    }

    let sc = SynthConfig {
        d_model: 16,
        n_shared: 6,
        n_base_only: 2,
        n_rl_specific: 2,
        n_tokens: 4_000,
        shard_tokens: 2_000,
        seed: 14,
        ..SynthConfig::default()
    };
    let art = synthesize(&sc, dir.join("data")).unwrap().remove(0);
    let mut saved = Vec::new();
    for run in 0..2 {
        let t = train_on(&art, 32, 64, 3, DEFAULT_LR, 5);
        let out = dir.join(format!("ckpt_{run}"));
        t.ckpt.save(&out).unwrap();
        saved.push(out);
    }
    if !files_identical(&saved[0], &saved[1]) {
        problems.push("checkpoints from identical seeds differ".into());
    }
    let elapsed = suite_start.elapsed();
    if elapsed > Duration::from_secs(30 * 60) {
        problems.push(format!("suite took {:.0}s", elapsed.as_secs_f64()));
    }
    Outcome {
        id: 8,
        name: "format and determinism",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "byte-exact shard and checkpoint files, suite runtime {:.0}s",
                elapsed.as_secs_f64()
            )
        } else {
            problems.join("; ")
        },
    }
}

/// Criteria selected by `ACCEPTANCE_ONLY` (comma-separated ids); all when unset.
fn selected() -> impl Fn(u32) -> bool {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    move |id| only.as_ref().is_none_or(|s| s.contains(&id))
}

#[test]
fn acceptance_suite() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let want = selected();
    let mut outcomes = Vec::new();
    let mut run = |id: u32, f: &mut dyn FnMut() -> Outcome| {
        if want(id) {
            let o = f();
            announce(&o);
            outcomes.push(o);
        }
    };

    run(1, &mut gradient_correctness);
    run(2, &mut attribution_algebra);
    run(3, &mut || two_model_recovery(&root.join("c3")));
    run(4, &mut || three_model_recovery(&root.join("c4")));
    run(5, &mut || dynamics_contrast(&root.join("c5")));
    // Criteria 6 and 7 share one trained crosscoder.
    let mut gen_run = None;
    let mut shared = || {
        gen_run
            .get_or_insert_with(|| {
                let art = synthesize(&generalization_setup(), root.join("c6")).unwrap().remove(0);
                train_on(&art, 128, RECOVERY_BATCH, RECOVERY_PASSES, DEFAULT_LR, 3)
            })
            .clone()
    };
    run(6, &mut || generalization_pipeline(&shared()));
    run(7, &mut || patch_rule(&shared()));
    run(8, &mut || format_and_determinism(&root.join("c8"), start));

    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    let summary: BTreeMap<u32, bool> = outcomes.iter().map(|o| (o.id, o.pass)).collect();
    let _ = writeln!(std::io::stderr(), "acceptance summary: {summary:?}");
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
