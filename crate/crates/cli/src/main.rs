use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod manifest;

use config::{parse_count, parse_count_list, parse_pair, RawConfig, RunConfig};

/// Bad input from the user: flags, config values or incompatible files.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Parser)]
#[command(name = "spadcorr", version, about = "Photon-pair correlation pipelines for SPAD frame data")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate frames and write them as SPF1 files.
    Simulate {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Accumulate frame files and write marginal, sum, minus and conditional maps.
    Jpd {
        /// SPF1 frame files.
        #[arg(required = true)]
        frames: Vec<PathBuf>,
        /// Conditional anchor pixel as x,y; defaults to the sensor centre.
        #[arg(long)]
        anchor: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fit correlation widths of an NF/FF pair of files and test the EPR bound.
    Epr {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        files: PairArgs,
        /// Frame counts at which to repeat the analysis, e.g. 1e3,1e4,1e5.
        #[arg(long)]
        checkpoints: Option<String>,
    },
    /// Certify the entanglement dimensionality of an NF/FF pair of files.
    Certify {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        files: PairArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Simulate both planes and run every analysis in one go.
    Pipeline {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        checkpoints: Option<String>,
        /// Also write the simulated frames.
        #[arg(long)]
        save_frames: bool,
    },
}

#[derive(Args)]
struct BaseArgs {
    /// key = value config file, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled preset: paper, paper-ff, paper-nf or separable.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Frame count; scientific notation such as 1e6 is accepted.
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    nf: PathBuf,
    #[arg(long)]
    ff: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    grid_side: Option<usize>,
    #[arg(long)]
    grid_spacing: Option<usize>,
}

/// Flag overrides applied after the preset and config file.
#[derive(Default)]
struct Overrides<'a> {
    frames: Option<&'a str>,
    seed: Option<u64>,
    mode: Option<&'a str>,
    checkpoints: Option<&'a str>,
    grid_side: Option<usize>,
    grid_spacing: Option<usize>,
}

fn resolve(base: &BaseArgs, o: Overrides) -> Result<RunConfig> {
    let mut raw = match (&base.preset, &base.config) {
        (Some(p), _) => RawConfig::preset(p)?,
        (None, Some(_)) => RawConfig::default(),
        (None, None) => RawConfig::preset("paper")?,
    };
    if let Some(path) = &base.config {
        raw.merge(RawConfig::load(path)?);
    }
    if let Some(f) = o.frames {
        raw.set("n_frames", parse_count(f)?.to_string());
    }
    if let Some(s) = o.seed {
        raw.set("seed", s.to_string());
    }
    if let Some(m) = o.mode {
        raw.set("mode", m);
    }
    if let Some(c) = o.checkpoints {
        parse_count_list(c)?;
        raw.set("checkpoints", c);
    }
    if let Some(s) = o.grid_side {
        raw.set("grid.side", s.to_string());
    }
    if let Some(s) = o.grid_spacing {
        raw.set("grid.spacing", s.to_string());
    }
    if let Some(out) = &base.out {
        raw.set("output_dir", out.display().to_string());
    }
    raw.resolve()
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Simulate { base, run, mode } => {
            let cfg = resolve(
                &base,
                Overrides {
                    frames: run.frames.as_deref(),
                    seed: run.seed,
                    mode: mode.as_deref(),
                    ..Overrides::default()
                },
            )?;
            commands::simulate(&cfg)
        }
        Command::Jpd { frames, anchor, out } => {
            let anchor = anchor.as_deref().map(parse_pair).transpose()?;
            commands::jpd(&frames, anchor, &out)
        }
        Command::Epr { base, files, checkpoints } => {
            let cfg = resolve(
                &base,
                Overrides {
                    checkpoints: checkpoints.as_deref(),
                    ..Overrides::default()
                },
            )?;
            // a preset's checkpoints only apply when asked for
            let cfg = if checkpoints.is_some() {
                cfg
            } else {
                RunConfig { checkpoints: Vec::new(), ..cfg }
            };
            commands::epr(&cfg, &files.nf, &files.ff)
        }
        Command::Certify { base, files, grid } => {
            let cfg = resolve(
                &base,
                Overrides {
                    grid_side: grid.grid_side,
                    grid_spacing: grid.grid_spacing,
                    ..Overrides::default()
                },
            )?;
            commands::certify(&cfg, &files.nf, &files.ff)
        }
        Command::Pipeline { base, run, grid, checkpoints, save_frames } => {
            let cfg = resolve(
                &base,
                Overrides {
                    frames: run.frames.as_deref(),
                    seed: run.seed,
                    checkpoints: checkpoints.as_deref(),
                    grid_side: grid.grid_side,
                    grid_spacing: grid.grid_spacing,
                    ..Overrides::default()
                },
            )?;
            commands::pipeline(&cfg, save_frames)
        }
    }
}

/// 2 for invalid input, 3 for file system and frame-file errors, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<spadcorr::Error>() {
            use spadcorr::Error as E;
            return match e {
                E::Io { .. } | E::BadMagic { .. } | E::Truncated { .. } => 3,
                E::NoConvergence { .. } | E::OracleTooLarge(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
