//! `spikerecon`: simulate spike streams, build datasets, train and evaluate
//! reconstruction models, and inspect stream files.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "spikerecon",
    version,
    about = "Spike camera simulation and image reconstruction"
)]
struct Cli {
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Run kernels sequentially even when built with parallel support.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SensorArgs {
    /// Firing threshold.
    #[arg(long, default_value_t = 2.0)]
    theta: f64,
    /// Photoelectric conversion rate.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
}

#[derive(Args, Debug, Clone)]
struct ChargeArgs {
    /// Initial accumulator: `zero`, `uniform` (seeded draw in [0, theta)) or a constant.
    #[arg(long, default_value = "zero")]
    initial_charge: String,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// `key = value` file with model and run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, `key=value`; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Tfi,
    Tfp,
    Swinsf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum EvalMethod {
    Swinsf,
    Tfi,
    Tfp,
    /// Ground truth scored against itself.
    Gt,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a spike stream from luminance frames or a synthetic scene.
    Simulate {
        /// Directory of graymap frames, read in file-name order.
        #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
        input: Option<PathBuf>,
        /// Synthetic scene: gradient, moving_bar, checker or constant:<level>.
        #[arg(long)]
        scene: Option<String>,
        /// Synthetic scene size as WxHxFRAMES.
        #[arg(long, default_value = "32x32x64")]
        size: String,
        /// Moving-bar speed in pixels per frame.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Duration of one luminance frame (one tick).
        #[arg(long, default_value_t = 1.0)]
        frame_duration: f64,
        #[command(flatten)]
        sensor: SensorArgs,
        #[command(flatten)]
        charge: ChargeArgs,
        /// Output stream file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct images from a stream file.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        stream: PathBuf,
        /// Reference tick for tfi/tfp; defaults to the middle of the stream.
        #[arg(long)]
        t_ref: Option<usize>,
        /// Playback window for tfp; defaults to the whole stream.
        #[arg(long)]
        window: Option<usize>,
        /// Model checkpoint, required for swinsf.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        sensor: SensorArgs,
        /// Output graymap; swinsf writes `<stem>_left`, `_mid` and `_right` beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut simulated training samples out of luminance sources.
    BuildDataset {
        /// Directory of graymap frames; repeatable.
        #[arg(long)]
        source: Vec<PathBuf>,
        /// Synthetic source scene; repeatable. Sized by --scene-size.
        #[arg(long)]
        scene: Vec<String>,
        /// Synthetic source size as WxHxFRAMES.
        #[arg(long, default_value = "64x64x100")]
        scene_size: String,
        /// Moving-bar speed in pixels per frame.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Crop size as WxH.
        #[arg(long)]
        crop: String,
        /// Temporal segment lengths l,m,r.
        #[arg(long, default_value = "7,11,7")]
        windows: String,
        /// Number of samples; defaults to one per available segment.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        sensor: SensorArgs,
        /// Initial charge and seed; the seed also places the crops.
        #[command(flatten)]
        charge: ChargeArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reconstruction network on a dataset manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest; overrides the `manifest` config key.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for the log, checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a reconstructor against dataset ground truth.
    Eval {
        #[arg(long, value_enum, default_value = "swinsf")]
        method: EvalMethod,
        #[arg(long)]
        manifest: PathBuf,
        /// Model checkpoint, required for swinsf.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Model settings the checkpoint must match.
        #[command(flatten)]
        config: ConfigArgs,
        /// Temporal segment lengths l,m,r for tfi/tfp/gt; swinsf uses the checkpoint's.
        #[arg(long, default_value = "7,11,7")]
        windows: String,
        /// Playback window for tfp; defaults to each segment's length.
        #[arg(long)]
        window: Option<usize>,
        #[command(flatten)]
        sensor: SensorArgs,
        /// Also write the table as comma-separated values.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print stream dimensions and spike densities.
    Inspect {
        #[arg(long)]
        stream: PathBuf,
        /// Dump this tick as a text bitmap.
        #[arg(long)]
        frame: Option<usize>,
    },
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.sequential {
        spikerecon::par::set_exec(spikerecon::par::Exec::Sequential);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
