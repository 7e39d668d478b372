//! Command-line front end. Exit codes: 0 success, 1 user error, 2 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nbss::cli::{cmd_eval, cmd_separate, cmd_simulate, cmd_train, Sources, System};
use nbss::config::Config;

#[derive(Parser)]
#[command(name = "nbss", version, about = "Multichannel narrow-band speech separation")]
struct Args {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured reference microphone.
    #[arg(long, global = true)]
    ref_channel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate reverberant two-speaker mixtures.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_scenes: Option<usize>,
        /// Use procedurally generated speech instead of a corpus.
        #[arg(long)]
        synthetic: bool,
    },
    /// Train the separator on a manifest.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Separate a multichannel wav or every mixture of a manifest.
    Separate {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "nbss")]
        system: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a system against the true images.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        system: String,
        #[arg(long)]
        est_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args) -> nbss::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.ref_channel {
        cfg.ref_channel = r;
    }
    cfg.validate()?;
    let out_or = |o: Option<PathBuf>| o.unwrap_or_else(|| cfg.out_dir.clone());
    match args.command {
        Command::Simulate { out, n_scenes, synthetic } => {
            let sources = Sources::choose(synthetic, &cfg)?;
            let out = out_or(out);
            let m = cmd_simulate(&cfg, n_scenes.unwrap_or(cfg.n_scenes), &sources, &out)?;
            println!("wrote {} scenes to {}", m.len(), out.display());
        }
        Command::Train { manifest, val, resume, out } => {
            let out = out_or(out);
            let reports = cmd_train(&cfg, &manifest, val.as_deref(), resume.as_deref(), &out)?;
            if let Some(r) = reports.last() {
                println!("epoch {} train loss {:.4} val loss {:.4}", r.epoch, r.train_loss, r.val_loss);
            }
        }
        Command::Separate { input, checkpoint, system, out } => {
            let out = out_or(out);
            let n = cmd_separate(&cfg, &checkpoint, &input, system.parse::<System>()?, &out)?;
            println!("separated {n} mixture(s) into {}", out.display());
        }
        Command::Eval { manifest, system, est_dir, out } => {
            let report = cmd_eval(&cfg, system.parse::<System>()?, &manifest, est_dir.as_deref(), &out_or(out))?;
            print!("{}", report.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(args)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
