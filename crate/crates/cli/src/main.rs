//! `prefgen`: run the preference-data pipeline, validate and account for its
//! outputs, and exercise the DPO math on exported pairs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use prefgen_core::config::PipelineConfig;
use prefgen_core::curator::import_jsonl;
use prefgen_core::dpo::{
    batch_loss, dpo_grad, dpo_loss, toy_train, DpoExample, DpoParams, ToyPolicy,
};
use prefgen_core::pipeline::{run, stats_from_journal, validate_dataset};

#[derive(Parser)]
#[command(
    name = "prefgen",
    version,
    about = "Step-wise preference dataset generator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the full pipeline over a problem corpus.
    Run(RunArgs),
    /// Re-parse and re-validate an exported pairs.jsonl.
    Validate {
        /// Path to the dataset file.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Reconstruct the accounting table from a run journal.
    Stats {
        /// Path to journal.jsonl.
        #[arg(long)]
        journal: PathBuf,
        /// Also print the stats as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train the toy tabular policy on exported pairs and trace the margin.
    TrainToy(TrainToyArgs),
    /// Loss/gradient self-check suite for the DPO module.
    DpoEval {
        /// Random examples for the finite-difference check.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem corpus: JSONL of {id, question, answer}.
    #[arg(long)]
    problems: PathBuf,
    /// Output directory (pairs.jsonl, stats.json, journal.jsonl).
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config worker count.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Skip problems already journaled in the output directory.
    #[arg(long)]
    resume: bool,
    /// Force the deterministic mock backends regardless of config.
    #[arg(long)]
    mock: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate { dataset } => cmd_validate(&dataset),
        Command::Stats { journal, json } => cmd_stats(&journal, json),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::DpoEval { samples } => cmd_dpo_eval(samples),
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path).context("loading config")?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(concurrency) = args.concurrency {
        cfg.concurrency = concurrency;
    }
    if args.mock {
        cfg.force_mock();
    }
    cfg.validate()?;

    let stats = run(&cfg, &args.problems, &args.out, args.resume)?;
    print!("{}", stats.render_report());
    println!("outputs written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(dataset: &Path) -> Result<ExitCode> {
    let report = validate_dataset(dataset)?;
    if report.total_lines == 0 {
        eprintln!("warning: {} holds no pairs", dataset.display());
    }
    for failure in &report.failures {
        println!("line {}: {}", failure.line, failure.cause);
    }
    println!(
        "{} pairs checked, {} valid, {} failures",
        report.total_lines,
        report.valid_pairs,
        report.failures.len()
    );
    Ok(if report.all_valid() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_stats(journal: &Path, json: bool) -> Result<ExitCode> {
    let stats = stats_from_journal(journal)?;
    print!("{}", stats.render_report());
    if json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct TrainToyArgs {
    /// Exported pairs.jsonl to train on.
    #[arg(long)]
    pairs: PathBuf,
    /// Margin-trace CSV destination.
    #[arg(long, default_value = "margins.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
}

fn cmd_train_toy(args: TrainToyArgs) -> Result<ExitCode> {
    let pairs = import_jsonl(&args.pairs).context("importing pairs")?;
    if pairs.is_empty() {
        bail!("{} holds no pairs to train on", args.pairs.display());
    }
    // The tabular policy knows exactly the responses the dataset mentions.
    let mut policy = ToyPolicy::new();
    for pair in &pairs {
        policy.set_logit(&pair.prompt, &pair.chosen, 0.0);
        policy.set_logit(&pair.prompt, &pair.rejected, 0.0);
    }
    let reference = policy.clone();
    let params = DpoParams::new(args.beta);
    let outcome = toy_train(&policy, &reference, &pairs, args.steps, args.lr, &params)?;

    let mut csv = String::from("step,loss,margin\n");
    for point in &outcome.trace {
        csv.push_str(&format!("{},{},{}\n", point.step, point.loss, point.margin));
    }
    fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;

    let first = outcome.trace.first().expect("steps >= 1");
    let last = outcome.trace.last().expect("steps >= 1");
    println!(
        "trained {} steps on {} pairs: loss {:.6} -> {:.6}, margin {:.6} -> {:.6}",
        args.steps,
        pairs.len(),
        first.loss,
        last.loss,
        first.margin,
        last.margin
    );
    println!("margin trace written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_dpo_eval(samples: usize) -> Result<ExitCode> {
    let params = DpoParams::new(0.8);
    let mut all_ok = true;
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        all_ok &= ok;
    };

    let ln2 = std::f64::consts::LN_2;
    let z0 = DpoExample::new(-1.0, -1.0, -1.0, -1.0);
    let loss0 = dpo_loss(&z0, &params);
    check(
        "loss at z=0 equals ln 2",
        (loss0 - ln2).abs() < 1e-9,
        format!("{loss0:.10}"),
    );

    let unit_gap = DpoExample::new(-1.0, -2.0, -1.5, -1.5);
    let loss1 = dpo_loss(&unit_gap, &params);
    let expected = (1.0 + (-0.8f64).exp()).ln();
    check(
        "loss at beta=0.8, a-b=1 equals ln(1+e^-0.8)",
        (loss1 - expected).abs() < 1e-9,
        format!("{loss1:.10} vs {expected:.10}"),
    );

    let (dc, dr) = dpo_grad(&z0, &params);
    check(
        "gradient at z=0 is (-beta/2, +beta/2)",
        (dc + 0.4).abs() < 1e-12 && (dr - 0.4).abs() < 1e-12,
        format!("({dc:.6}, {dr:.6})"),
    );

    let mut rng = StdRng::seed_from_u64(20240817);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut antisymmetric = true;
    for _ in 0..samples {
        let ex = DpoExample::new(
            rng.random_range(-3.0..0.0),
            rng.random_range(-3.0..0.0),
            rng.random_range(-3.0..0.0),
            rng.random_range(-3.0..0.0),
        );
        let (dc, dr) = dpo_grad(&ex, &params);
        antisymmetric &= dc == -dr;
        let fd = |bump_chosen: bool| {
            let mut plus = ex;
            let mut minus = ex;
            if bump_chosen {
                plus.logp_theta_chosen += h;
                minus.logp_theta_chosen -= h;
            } else {
                plus.logp_theta_rejected += h;
                minus.logp_theta_rejected -= h;
            }
            (dpo_loss(&plus, &params) - dpo_loss(&minus, &params)) / (2.0 * h)
        };
        worst = worst.max((fd(true) - dc).abs() / dc.abs().max(1e-12));
        worst = worst.max((fd(false) - dr).abs() / dr.abs().max(1e-12));
    }
    check(
        "finite difference matches analytic gradient",
        worst < 1e-6,
        format!("worst relative error {worst:.3e} over {samples} samples"),
    );
    check(
        "gradient antisymmetry d_chosen = -d_rejected",
        antisymmetric,
        "exact".to_string(),
    );

    let base = dpo_loss(&unit_gap, &params);
    let shifted = DpoExample::new(
        unit_gap.logp_theta_chosen,
        unit_gap.logp_theta_rejected,
        unit_gap.logp_ref_chosen + 5.0,
        unit_gap.logp_ref_rejected + 5.0,
    );
    check(
        "reference invariance under equal shift",
        (dpo_loss(&shifted, &params) - base).abs() < 1e-9,
        "shift +5.0".to_string(),
    );

    let batch = [z0, unit_gap];
    let mean = batch_loss(&batch, &params)?;
    check(
        "batch loss is the arithmetic mean",
        (mean - (loss0 + loss1) / 2.0).abs() < 1e-12,
        format!("{mean:.10}"),
    );

    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
