use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use advpatch_cli::commands::{self, exit_code};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "advpatch",
    version,
    about = "Train and evaluate adversarial patches against person detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write detector-generated person labels for every image in a directory.
    Label {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config value, e.g. `--set label.conf_threshold=0.4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Optimize a patch against the configured detector.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare recall across patch conditions on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// NOISE, or OBJ / CLS / OBJ-CLS with a sidecar: `OBJ=runs/x/patch.apf`.
        /// CLEAN is always included.
        #[arg(long = "condition", value_name = "NAME[=PATCH]")]
        conditions: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render a patch sidecar as a print-ready PNG.
    Export {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 150.0)]
        dpi: f64,
        /// Printed side length in centimeters.
        #[arg(long, default_value_t = 40.0)]
        size_cm: f64,
    },
    /// Generate synthetic person scenes for desk-scale runs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut out = io::stdout().lock();
    let result = match &cli.command {
        Command::Label {
            config,
            images,
            out: dir,
            overrides,
        } => commands::cmd_label(config, overrides, images, dir, &mut out),
        Command::Train {
            config,
            resume,
            overrides,
        } => commands::cmd_train(config, overrides, resume.as_deref(), &mut out),
        Command::Eval {
            config,
            conditions,
            overrides,
        } => commands::cmd_eval(config, overrides, conditions, &mut out),
        Command::Export {
            patch,
            out: png,
            dpi,
            size_cm,
        } => commands::cmd_export(patch, png, *dpi, *size_cm, &mut out),
        Command::Synth {
            out: dir,
            count,
            size,
            seed,
        } => commands::cmd_synth(dir, *count, *size, *seed, &mut out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
