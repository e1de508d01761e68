use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use upat_cli::commands::{self, AdversaryChoice, AnalyzeMode, AnalyzeOptions, CliError};
use upat_cli::config::{self, ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "upat", version, about = "Pyramid adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainFlags {
    /// baseline | pat | upat | upat_flat | upat_no_clean
    #[arg(long)]
    method: Option<String>,
    /// Radius such as `8/255`.
    #[arg(long)]
    radius: Option<String>,
    /// Radius decay: on | off.
    #[arg(long)]
    schedule: Option<String>,
    /// Sample-wise attack steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Parent directory for run directories.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration in its content-addressed run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Train every ablation variant and write a merged table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Analyse a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// strength | landscape | viz | corruption | cost
        #[arg(long)]
        mode: String,
        /// Config; defaults to the run's config.toml.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// universal | samplewise | both
        #[arg(long, default_value = "both")]
        adversary: String,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        span: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load and split the dataset, print its manifest.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write the manifest to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(raw: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    raw.iter().map(|s| config::parse_override(s)).collect()
}

fn load(path: Option<&std::path::Path>, set: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    Ok(config::load_config(path, set)?)
}

fn train_overrides(flags: &TrainFlags) -> Result<Vec<(String, String)>, CliError> {
    let mut o = Vec::new();
    let q = |s: &str| format!("{s:?}");
    if let Some(m) = &flags.method {
        o.push(("train.method".into(), q(m)));
    }
    if let Some(r) = &flags.radius {
        o.push(("train.radius".into(), q(r)));
    }
    if let Some(s) = &flags.schedule {
        let on = match s.as_str() {
            "on" | "true" => true,
            "off" | "false" => false,
            _ => return Err(CliError::Usage(format!("--schedule expects on or off, got {s:?}"))),
        };
        o.push(("train.schedule".into(), on.to_string()));
    }
    if let Some(k) = flags.steps {
        o.push(("train.attack_steps".into(), k.to_string()));
    }
    if let Some(e) = flags.epochs {
        o.push(("train.epochs".into(), e.to_string()));
    }
    if let Some(s) = flags.seed {
        o.push(("train.seed".into(), s.to_string()));
    }
    if let Some(l) = flags.lambda {
        o.push(("train.lambda".into(), format!("{l:?}")));
    }
    if let Some(p) = &flags.output {
        o.push(("output_dir".into(), q(&p.display().to_string())));
    }
    Ok(o)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Train { cfg, flags } => {
            let mut set = overrides(&cfg.set)?;
            set.extend(train_overrides(&flags)?);
            let c = load(cfg.config.as_deref(), &set)?;
            let summary = commands::train(&c, &mut out)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
        }
        Command::Ablate { cfg } => {
            let c = load(cfg.config.as_deref(), &overrides(&cfg.set)?)?;
            let rows = commands::ablate(&c, &mut out)?;
            write!(out, "{}", commands::render_table(&rows))?;
        }
        Command::Analyze {
            checkpoint,
            mode,
            config: cfg_path,
            set,
            adversary,
            grid,
            span,
            out: out_dir,
        } => {
            let mode: AnalyzeMode = mode.parse().map_err(CliError::Usage)?;
            let adversary: AdversaryChoice = adversary.parse().map_err(CliError::Usage)?;
            if !checkpoint.is_file() {
                return Err(CliError::Usage(format!("checkpoint {} not found", checkpoint.display())));
            }
            let path = cfg_path.or_else(|| commands::config_for_checkpoint(&checkpoint));
            let c = load(path.as_deref(), &overrides(&set)?)?;
            let opts = AnalyzeOptions {
                mode,
                adversary,
                grid,
                span,
                out_dir,
            };
            for p in commands::analyze(&checkpoint, &c, &opts, &mut out)? {
                writeln!(out, "{}", p.display())?;
            }
        }
        Command::Ingest { cfg, out: dest } => {
            let c = load(cfg.config.as_deref(), &overrides(&cfg.set)?)?;
            let splits = commands::ingest(&c)?;
            let m = serde_json::to_string_pretty(&commands::manifest(&c, &splits)).expect("manifest serializes");
            if let Some(p) = dest {
                std::fs::write(p, &m)?;
            }
            writeln!(out, "{m}")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
