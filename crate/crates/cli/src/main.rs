//! `crossdiff` command-line tool.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 training
//! divergence, 4 model-set mismatch, 5 empty critical set, 6 infeasible
//! synthetic dictionary. Thread count comes from `CROSSDIFF_THREADS`.

mod analyze;
mod config;
mod genfeat;
mod io;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossdiff::crosscoder::{check_gradients, GradCheckDims, NormKind};
use crossdiff::genfeat::{InterventionMode, DEFAULT_AMPLIFY_VALUE};
use crossdiff::synthlab::{synthesize, SynthConfig};
use serde::Serialize;

use config::RunConfigFile;
use io::{read_doc, write_json, CliError, CliResult};

/// Gradient checks above this relative error fail.
const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "crossdiff", version, about = "Crosscoder model diffing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a crosscoder on a dataset manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decoder-norm attribution and cross-checkpoint analyses.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Generalization-feature scoring, selection and intervention export.
    Genfeat {
        #[command(subcommand)]
        what: GenfeatCommand,
    },
    /// Generate a planted-feature dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check analytic crosscoder gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        d_sparse: usize,
        #[arg(long, default_value_t = 3)]
        n_models: usize,
        #[arg(long, default_value_t = 4)]
        n_tokens: usize,
        #[arg(long, value_enum, default_value_t = Norm::L2)]
        norm: Norm,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturb one analytic gradient entry (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint directories.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    min_cosine: Option<f64>,
    /// Model whose decoder columns are matched across checkpoints.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Normalized relative norm per feature (two-model crosscoders).
    Nrn(AnalyzeArgs),
    /// Model attribution scores per feature (three-model crosscoders).
    Mas(AnalyzeArgs),
    /// Top features by NRN for each checkpoint.
    Rank(AnalyzeArgs),
    /// Overlap of top-feature sets between every pair of checkpoints.
    Overlap(AnalyzeArgs),
    /// Rank changes of top features between two checkpoints.
    Rankshift(AnalyzeArgs),
    /// Histogram of NRN values over [0, 1].
    Hist(AnalyzeArgs),
}

#[derive(Subcommand)]
enum GenfeatCommand {
    /// Mean activation gap per feature over each task's critical samples.
    Score {
        checkpoint: PathBuf,
        /// Evaluation records JSON.
        #[arg(long)]
        records: PathBuf,
        /// Manifest of the critical samples' final-token activations.
        #[arg(long)]
        manifest: PathBuf,
        /// RL model id; defaults to the last model.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Keep features scoring above a fraction of each task's maximum.
    Threshold {
        /// scores.json from `genfeat score`.
        scores: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Features shared by every task set.
    Intersect {
        /// sets.json files from `genfeat threshold`.
        #[arg(required = true)]
        sets: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write an intervention spec for the given features.
    Export {
        checkpoint: PathBuf,
        /// Comma-separated feature indices.
        #[arg(long, value_delimiter = ',')]
        features: Vec<usize>,
        /// Also export every feature of this intersection.json.
        #[arg(long)]
        intersection: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = DEFAULT_AMPLIFY_VALUE)]
        value: f64,
        /// Target model id; defaults to the last model.
        #[arg(long)]
        model: Option<String>,
        /// Training manifest, for the target model's normalization scale.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    L1,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Zero,
    Amplify,
}

fn analyze(what: AnalyzeCommand) -> CliResult {
    let (cmd, a): (fn(&[PathBuf], &analyze::Params) -> CliResult, AnalyzeArgs) = match what {
        AnalyzeCommand::Nrn(a) => (analyze::nrn_cmd, a),
        AnalyzeCommand::Mas(a) => (analyze::mas_cmd, a),
        AnalyzeCommand::Rank(a) => (analyze::rank_cmd, a),
        AnalyzeCommand::Overlap(a) => (analyze::overlap_cmd, a),
        AnalyzeCommand::Rankshift(a) => (analyze::rankshift_cmd, a),
        AnalyzeCommand::Hist(a) => (analyze::hist_cmd, a),
    };
    let file = RunConfigFile::load_or_default(a.config.as_deref())?;
    let params = analyze::Params {
        out: analyze::out_dir(a.out, file.out.as_deref()),
        top_n: a.top_n.unwrap_or(file.top_n),
        bins: a.bins.unwrap_or(file.bins),
        min_cosine: a.min_cosine.unwrap_or(file.min_cosine),
        model: a.model,
    };
    cmd(&a.checkpoints, &params)
}

fn genfeat(what: GenfeatCommand) -> CliResult {
    match what {
        GenfeatCommand::Score {
            checkpoint,
            records,
            manifest,
            model,
            out,
        } => genfeat::score(&checkpoint, &records, &manifest, model, &out),
        GenfeatCommand::Threshold {
            scores,
            config,
            fraction,
            out,
        } => {
            let file = RunConfigFile::load_or_default(config.as_deref())?;
            genfeat::threshold(&scores, fraction.unwrap_or(file.fraction), &out)
        }
        GenfeatCommand::Intersect { sets, out } => genfeat::intersect_cmd(&sets, &out),
        GenfeatCommand::Export {
            checkpoint,
            features,
            intersection,
            mode,
            value,
            model,
            manifest,
            out,
        } => {
            if features.is_empty() && intersection.is_none() {
                return Err(CliError::config("give --features or --intersection"));
            }
            genfeat::export(genfeat::ExportArgs {
                checkpoint,
                features,
                intersection,
                mode: match mode {
                    Mode::Zero => InterventionMode::Zero,
                    Mode::Amplify => InterventionMode::Amplify,
                },
                value,
                model,
                manifest,
                out,
            })
        }
    }
}

#[derive(Serialize)]
struct SynthSummary {
    datasets: Vec<SynthEntry>,
}

#[derive(Serialize)]
struct SynthEntry {
    manifest: PathBuf,
    ground_truth: PathBuf,
    eval_records: Option<PathBuf>,
    critical_manifest: Option<PathBuf>,
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut c: SynthConfig = match config {
        Some(p) => read_doc(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        c.seed = s;
    }
    let arts = synthesize(&c, out)?;
    let datasets = arts
        .into_iter()
        .map(|a| SynthEntry {
            manifest: a.manifest,
            ground_truth: a.ground_truth,
            eval_records: a.eval_records,
            critical_manifest: a.critical_manifest,
        })
        .collect();
    write_json(&out.join("synth_summary.json"), &SynthSummary { datasets })
}

#[derive(Serialize)]
struct GradCheckDoc {
    dims: GradCheckDims,
    norm_kind: NormKind,
    seed: u64,
    max_rel_error: f64,
    probes: usize,
    tolerance: f64,
    pass: bool,
}

fn gradcheck(dims: GradCheckDims, norm: Norm, seed: u64, out: Option<&Path>, corrupt: bool) -> CliResult {
    let norm_kind = match norm {
        Norm::L1 => NormKind::L1,
        Norm::L2 => NormKind::L2,
    };
    if !(2..=3).contains(&dims.n_models) || dims.d_model == 0 || dims.d_sparse == 0 || dims.n_tokens == 0 {
        return Err(CliError::config("gradcheck needs 2 or 3 models and nonzero dimensions"));
    }
    let r = check_gradients(dims, norm_kind, seed, corrupt)?;
    let pass = r.max_rel_error <= GRADCHECK_TOLERANCE;
    println!(
        "max relative error {:.3e} over {} entries",
        r.max_rel_error,
        r.probes.len()
    );
    if let Some(dir) = out {
        let doc = GradCheckDoc {
            dims,
            norm_kind,
            seed,
            max_rel_error: r.max_rel_error,
            probes: r.probes.len(),
            tolerance: GRADCHECK_TOLERANCE,
            pass,
        };
        write_json(&io::ensure_dir(dir)?.join("gradcheck.json"), &doc)?;
    }
    if !pass {
        return Err(CliError::new(
            io::EXIT_FAILURE,
            format!(
                "gradient check failed: {:.3e} > {GRADCHECK_TOLERANCE:e}",
                r.max_rel_error
            ),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train {
            config,
            manifest,
            out,
            seed,
        } => train::run(RunConfigFile::load_or_default(config.as_deref())?, manifest, out, seed),
        Command::Analyze { what } => analyze(what),
        Command::Genfeat { what } => genfeat(what),
        Command::Synth { config, out, seed } => synth(config.as_deref(), &out, seed),
        Command::Gradcheck {
            d_model,
            d_sparse,
            n_models,
            n_tokens,
            norm,
            seed,
            out,
            corrupt,
        } => gradcheck(
            GradCheckDims {
                d_model,
                d_sparse,
                n_models,
                n_tokens,
            },
            norm,
            seed,
            out.as_deref(),
            corrupt,
        ),
    }
}

fn main() -> ExitCode {
    crossdiff::par::init_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(io::EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
