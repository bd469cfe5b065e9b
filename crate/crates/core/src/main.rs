use std::path::{Path, PathBuf};
use std::process::ExitCode;

use balanced_energy::eval::ScoreKind;
use balanced_energy::experiment::{self as ex, ExperimentConfig};
use balanced_energy::Result;
use clap::{Parser, Subcommand, ValueEnum};

/// Balanced energy regularization for OOD detection on synthetic long-tailed data.
#[derive(Parser)]
#[command(name = "balen", version)]
struct Cli {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (also the default input directory of later stages).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run with this single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Energy,
    Msp,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every data split as CSV plus a manifest.
    GenData,
    /// Train the classifier with cross-entropy only.
    Pretrain {
        /// Directory holding the generated CSVs [default: --out].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Estimate the OOD class prior from pretrained predictions on auxiliary outliers.
    EstimatePrior {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        aux: Option<PathBuf>,
        /// Prior exponent [default: loss.gamma from the config].
        #[arg(long, allow_hyphen_values = true)]
        gamma: Option<f64>,
        /// Smoothing added to p before exponentiation.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Fine-tune the pretrained model with the configured loss.
    Train {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a model on an ID/OOD test pair.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        id: Option<PathBuf>,
        #[arg(long)]
        ood: Option<PathBuf>,
        /// Detection score [default: eval.score from the config].
        #[arg(long, value_enum)]
        score: Option<ScoreArg>,
        /// Stem of the report files.
        #[arg(long, default_value = "report")]
        name: String,
    },
    /// Run every sweep cell for every seed and aggregate.
    Sweep,
    /// Compare class-wise total energy gaps of a baseline and a candidate model.
    GapAnalysis {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        id: Option<PathBuf>,
        #[arg(long)]
        ood: Option<PathBuf>,
    },
}

fn or(p: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| dir.join(name))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            ex::cmd_gen_data(&cfg, out)?;
        }
        Command::Pretrain { data } => {
            ex::cmd_pretrain(&cfg, data.as_deref().unwrap_or(out), out)?;
        }
        Command::EstimatePrior { model, aux, gamma, epsilon } => {
            let gamma = gamma.unwrap_or(cfg.loss.gamma);
            let eps = epsilon.or(cfg.prior.epsilon);
            ex::cmd_estimate_prior(
                &cfg,
                &or(model, out, ex::PRETRAINED_MODEL),
                &or(aux, out, "ood_aux.csv"),
                gamma,
                eps,
                out,
            )?;
        }
        Command::Train { model, prior, data } => {
            let data = data.as_deref().unwrap_or(out);
            let prior = or(prior, out, ex::PRIOR_FILE);
            let prior = (prior.exists() || cfg.loss.variant == balanced_energy::losses::Variant::BalancedEnergy)
                .then_some(prior);
            ex::cmd_train(&cfg, &or(model, out, ex::PRETRAINED_MODEL), prior.as_deref(), data, out)?;
        }
        Command::Eval { model, id, ood, score, name } => {
            let scores = match score {
                None => vec![cfg.eval.score],
                Some(ScoreArg::Energy) => vec![ScoreKind::Energy],
                Some(ScoreArg::Msp) => vec![ScoreKind::Msp],
                Some(ScoreArg::Both) => vec![ScoreKind::Energy, ScoreKind::Msp],
            };
            let model = or(model, out, ex::FINETUNED_MODEL);
            ex::cmd_eval(&cfg, &model, &or(id, out, "id_test.csv"), &or(ood, out, "ood_test.csv"), &scores, name, out)?;
        }
        Command::Sweep => {
            ex::cmd_sweep(&cfg, out, cli.jobs)?;
        }
        Command::GapAnalysis { baseline, ours, id, ood } => {
            ex::cmd_gap_analysis(
                &cfg,
                baseline,
                ours,
                &or(id, out, "id_test.csv"),
                &or(ood, out, "ood_test.csv"),
                out,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
