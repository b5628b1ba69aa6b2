use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zsl_cli::*;
use zsl_core::evaluate::EvalMode;

#[derive(Parser)]
#[command(name = "zsl", version, about = "Zero-shot recognition with multi-part attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Repeatable: no-ma-loss, no-parts, random-parts, loss={softmax|cct|combined}, shared-backbone.
    #[arg(long, global = true, value_parser = clap::value_parser!(Ablation))]
    ablation: Vec<Ablation>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Zsl,
    Gzsl,
    Detect,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Zsl => EvalMode::Zsl,
            Mode::Gzsl => EvalMode::Gzsl,
            Mode::Detect => EvalMode::Detect,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        num_unseen: Option<usize>,
    },
    /// Train on --dataset; writes the log and checkpoint under --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate --checkpoint on --dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "zsl")]
        mode: Mode,
        /// Comma-separated fusion weights, one report each.
        #[arg(long, value_parser = parse_betas, conflicts_with = "beta_sweep")]
        betas: Option<Vec<f64>>,
        /// Shorthand for --betas 0,0.5,1,2.
        #[arg(long)]
        beta_sweep: bool,
    },
    /// Finite-difference checks of every operation and loss path.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Flip the sign of one diversity gradient term; the suite must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Write attention maps, part crops and boxes for the first N unseen test samples.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        n: usize,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            common,
            num_classes,
            num_unseen,
        } => {
            let cfg = resolve(
                common.config.as_deref(),
                &Overrides {
                    seed: common.seed,
                    ablations: common.ablation.clone(),
                    num_classes,
                    num_unseen,
                    ..Default::default()
                },
            )?;
            let out = default_out(common.out.as_deref(), "data");
            let ds = cmd_synth(&cfg, &out)?;
            println!("wrote {}: {}", out.display(), summarize_dataset(&ds));
        }
        Command::Train { common, epochs } => {
            let cfg = resolve(
                common.config.as_deref(),
                &Overrides {
                    seed: common.seed,
                    ablations: common.ablation.clone(),
                    epochs,
                    ..Default::default()
                },
            )?;
            let ds = load_dataset(common.dataset.as_deref())?;
            let out = default_out(common.out.as_deref(), "run");
            cmd_train(&cfg, &ds, &out)?;
            println!(
                "trained; log {} checkpoint {}",
                out.join(TRAIN_LOG).display(),
                out.join(CHECKPOINT_DIR).display()
            );
        }
        Command::Eval {
            common,
            mode,
            betas,
            beta_sweep,
        } => {
            let betas = if beta_sweep { Some(BETA_SWEEP.to_vec()) } else { betas };
            let cfg = resolve(
                common.config.as_deref(),
                &Overrides {
                    seed: common.seed,
                    ablations: common.ablation.clone(),
                    betas,
                    ..Default::default()
                },
            )?;
            let ds = load_dataset(common.dataset.as_deref())?;
            let ckpt = common
                .checkpoint
                .ok_or_else(|| CliError::Validation("--checkpoint is required for eval".into()))?;
            let model = load_compatible(&ckpt, &ds)?;
            let mode = EvalMode::from(mode);
            let reports = cmd_eval(&cfg, &model, &ds, mode)?;
            for r in &reports {
                print!("{}", r.table());
                println!();
            }
            if let Some(out) = &common.out {
                write_eval(
                    out,
                    &EvalOutput {
                        mode,
                        config: &cfg,
                        reports: &reports,
                    },
                )?;
            }
        }
        Command::Gradcheck { common, inject_fault } => {
            let cfg = resolve(
                common.config.as_deref(),
                &Overrides {
                    seed: common.seed,
                    ..Default::default()
                },
            )?;
            let report = cmd_gradcheck(&cfg, inject_fault)?;
            print!("{}", report.table());
            if let Some(out) = &common.out {
                let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
                zsl_core::synth::write_atomic(out, text.as_bytes())?;
            }
            if !report.passed() {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(CliError::CheckFailed(format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
        Command::Export { common, n } => {
            let cfg = resolve(
                common.config.as_deref(),
                &Overrides {
                    seed: common.seed,
                    ..Default::default()
                },
            )?;
            let ds = load_dataset(common.dataset.as_deref())?;
            let ckpt = common
                .checkpoint
                .ok_or_else(|| CliError::Validation("--checkpoint is required for export".into()))?;
            let model = load_compatible(&ckpt, &ds)?;
            let out = default_out(common.out.as_deref(), "export");
            let s = cmd_export(&cfg, &model, &ds, n, &out)?;
            println!(
                "wrote {} maps, {} crops and {}",
                s.maps.len(),
                s.crops.len(),
                s.sidecar.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
