//! `hoirecon`: generate synthetic captures, disentangle object motion,
//! render, refine and evaluate reconstructions.

mod commands;
mod recon;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hoirecon", version, about = "World-frame human-object-scene reconstruction")]
pub struct Cli {
    /// Overrides the seed of scripts and configs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 picks the number of cores, 1 runs serially.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Print machine-readable results to stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset from a scene script.
    Gen(GenArgs),
    /// Recover object-to-world poses from apparent and scene trajectories.
    Disentangle(DisentangleArgs),
    /// Render one frame of a dataset.
    Render(RenderArgs),
    /// Run the alternating shape/pose optimization on a dataset.
    Refine(RefineArgs),
    /// Temporally filter a contact timeline.
    FilterContacts(FilterArgs),
    /// Compare a prediction against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Standard,
    Defect,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Scene script (JSON).
    #[arg(required_unless_present = "preset", conflicts_with = "preset")]
    pub script: Option<PathBuf>,
    /// Use a built-in script instead of a file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Render every n-th frame (0 disables rendering).
    #[arg(long)]
    pub render_stride: Option<usize>,
    /// Also write the resolved script next to the dataset.
    #[arg(long)]
    pub save_script: bool,
}

#[derive(Args, Debug)]
pub struct DisentangleArgs {
    /// Apparent (object-frame) camera trajectory.
    #[arg(long)]
    pub obj: PathBuf,
    /// Scene camera trajectory.
    #[arg(long)]
    pub scn: PathBuf,
    /// Known Sim(3) gauge; estimated from static frames when absent.
    #[arg(long)]
    pub align: Option<PathBuf>,
    /// Static-frame thresholds: camera-center distance in meters.
    #[arg(long)]
    pub max_center_distance: Option<f64>,
    /// Static-frame thresholds: relative rotation in degrees.
    #[arg(long)]
    pub max_rotation_deg: Option<f64>,
    #[arg(long)]
    pub ransac_iterations: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoseSource {
    Gt,
    Init,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub frame: usize,
    #[arg(long)]
    pub samples_per_component: Option<usize>,
    /// Fixed SDF-to-density scale; twice the grid spacing when absent.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum, default_value = "gt")]
    pub poses: PoseSource,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Refinement config (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub rays_per_frame: Option<usize>,
    /// Drop the contact and collision terms.
    #[arg(long)]
    pub no_contact_loss: bool,
    #[arg(long, value_enum, default_value = "init")]
    pub poses: PoseSource,
    /// Skip per-cycle checkpoints.
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub timeline: PathBuf,
    /// Physical parameters (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sigma_win: Option<usize>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub min_span: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PdMode {
    FrameMax,
    Points,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Reconstruction directory (from `refine`) or dataset directory.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    /// Surface samples per shape.
    #[arg(long, default_value_t = 4000)]
    pub surface_points: usize,
    /// Evaluate images on every n-th rendered frame; 0 skips images.
    #[arg(long, default_value_t = 10)]
    pub image_stride: usize,
    #[arg(long, value_enum, default_value = "frame-max")]
    pub pd: PdMode,
}

/// Errors in the command line or its inputs.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<hoirecon::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

/// The error chain, skipping causes whose text the outer messages already carry.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
