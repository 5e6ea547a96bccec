//! `sketchlift` command-line interface.
//!
//! Commands run in-process by default. With `--server URL`, `plan` and
//! `train` go through the HTTP service instead.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "sketchlift", version, about = "Sketch instructions to 3D trajectory distributions")]
struct Cli {
    /// Base URL of a running service; plan and train requests go there.
    #[arg(long, global = true, env = "SKETCHLIFT_SERVER")]
    server: Option<String>,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct PipelineArgs {
    #[arg(long)]
    instruction: PathBuf,
    /// Scene bundle file.
    #[arg(long)]
    scene: PathBuf,
    /// Pipeline configuration file; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the lifting seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write a motion plan.
    Plan {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Scripted scenario file to replay; without it the live backend is used.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the stage trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Lift a pair of pixel trajectories into a trajectory distribution.
    Lift {
        #[arg(long)]
        xi1: PathBuf,
        #[arg(long)]
        xi2: PathBuf,
        /// Calibration file holding both views.
        #[arg(long)]
        calib: PathBuf,
        /// Lifting configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior cloning followed by TD3+BC on the toy reach task.
    Train {
        /// Demonstration dataset (JSON lines).
        #[arg(long, conflicts_with = "from_plan", required_unless_present = "from_plan")]
        demo: Option<PathBuf>,
        /// Plan file whose distribution generates the demonstrations.
        #[arg(long)]
        from_plan: Option<PathBuf>,
        #[arg(long, default_value_t = sketchlift_service::DEFAULT_ROLLOUTS)]
        rollouts: usize,
        /// Reach experiment configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot success-rate curves from CSV files.
    Plot {
        /// `label=path.csv`, repeatable.
        #[arg(long = "curve", required = true)]
        curves: Vec<String>,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 400)]
        height: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record or replay model interactions.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Check a scene bundle or an instruction file.
    Validate {
        #[arg(long, required_unless_present = "instruction")]
        scene: Option<PathBuf>,
        #[arg(long)]
        instruction: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        min_baseline_deg: f64,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "CI_DATA_DIR", default_value = "data")]
        data: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Run against the live backend (CI_LIVE_URL) and save every exchange.
    Record {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the recorded run's plan.
        #[arg(long)]
        plan_out: Option<PathBuf>,
    },
    /// Run from a recorded scenario; fails on any unrecorded request.
    Replay {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let json = cli.json;
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                eprintln!("{}", serde_json::json!({ "error": e }));
            } else {
                match &e.stage {
                    Some(stage) => eprintln!("error [{}] at stage {stage}: {}", e.code, e.message),
                    None => eprintln!("error [{}]: {}", e.code, e.message),
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
