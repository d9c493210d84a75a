//! `reglat`: phantom generation, training, latent PCA, probes and the
//! explorer service from one binary.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit code for missing input files.
const EXIT_MISSING: u8 = 3;
/// Exit code for model / basis / latent fingerprint mismatches.
const EXIT_FINGERPRINT: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "reglat",
    version,
    about = "Learned deformable registration with latent-space PCA"
)]
pub struct Cli {
    /// Root directory for runs and datasets.
    #[arg(long, global = true, env = "REGLAT_RUNS", default_value = "runs")]
    pub runs: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with settings; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

/// Where a trained model lives.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Run name under the runs root, or a run directory path.
    #[arg(long)]
    pub run: Option<String>,
    /// Checkpoint file; defaults to the newest one in the run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory or manifest file; defaults to the run's dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train a registration network.
    Train(TrainArgs),
    /// Evaluate registration Dice and folding over a split.
    Eval(EvalArgs),
    /// Encode a split into a latent matrix.
    Latents(LatentsArgs),
    /// Fit a PCA basis to a latent matrix.
    Pca(PcaArgs),
    /// Decode one principal direction into a deformation grid.
    Component(ComponentArgs),
    /// Render a subject deformed along one principal direction.
    Sweep(SweepArgs),
    /// Measure latent coefficient changes under an input transform.
    Probe(ProbeArgs),
    /// PCA on predicted increment fields against a fixed reference.
    Fieldpca(FieldPcaArgs),
    /// Serve the explorer HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output dataset directory [default: <runs>/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cube side in voxels [default: 32].
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of subjects [default: 40].
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Trailing subjects assigned to validation [default: 8].
    #[arg(long)]
    pub val: Option<usize>,
    /// Only translate subjects along z by up to this many voxels.
    #[arg(long)]
    pub translation_only: Option<f64>,
    /// Translation jitter in voxels per axis [default: 3].
    #[arg(long)]
    pub jitter_translation: Option<f64>,
    /// Rotation jitter in degrees per axis [default: 5].
    #[arg(long)]
    pub jitter_rotation: Option<f64>,
    /// Isotropic scale jitter [default: 0.05].
    #[arg(long)]
    pub jitter_scale: Option<f64>,
    /// Peak smooth-warp displacement in voxels [default: 1].
    #[arg(long)]
    pub warp: Option<f64>,
    /// Gaussian noise sigma [default: 0.02].
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory or manifest file [default: <runs>/data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run name or directory [default: default].
    #[arg(long)]
    pub run: Option<String>,
    /// Epochs; 0 writes only the initialization checkpoint [default: 50].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Pairs per optimization step [default: 4].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Smoothness weight [default: 0.1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Jacobian weight [default: 1].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Local NCC window, 0 for global [default: 0].
    #[arg(long)]
    pub ncc_window: Option<usize>,
    /// Channels at full resolution [default: 8].
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Number of downsamplings [default: 3].
    #[arg(long)]
    pub n_down: Option<usize>,
    /// Enable encoder-decoder skip connections.
    #[arg(long)]
    pub skip: bool,
    /// Disable data augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Checkpoint and evaluate every N epochs, 0 = at the end [default: 0].
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Split to evaluate: train or val [default: val].
    #[arg(long)]
    pub split: Option<String>,
    /// Report file [default: <run>/eval_<split>.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LatentsArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Split to encode [default: train].
    #[arg(long)]
    pub split: Option<String>,
    /// Latent matrix file [default: <run>/latents.bin].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run name or directory, used for defaults [default: default].
    #[arg(long)]
    pub run: Option<String>,
    /// Latent matrix file [default: <run>/latents.bin].
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Number of components [default: 32].
    #[arg(long)]
    pub k: Option<usize>,
    /// Subtract the latent mean before fitting.
    #[arg(long)]
    pub center: bool,
    /// Basis directory [default: <run>/basis].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ComponentArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Basis directory [default: <run>/basis].
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Component index, starting at 1 [default: 1].
    #[arg(long)]
    pub j: Option<usize>,
    /// Scale of the component [default: 100].
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    /// Also render this subject deformed by the component.
    #[arg(long)]
    pub subject: Option<String>,
    /// Output directory [default: <run>/components/c<j>_l<lambda>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Basis directory [default: <run>/basis].
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Component index, starting at 1 [default: 1].
    #[arg(long)]
    pub j: Option<usize>,
    /// Comma-separated scales [default: -200,-100,0,100,200].
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Subject to deform [default: first validation subject].
    #[arg(long)]
    pub subject: Option<String>,
    /// Output directory [default: <run>/sweep/c<j>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Basis directory [default: <run>/basis].
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// identity, translation[:axis[:voxels]], rotation[:axis[:degrees]] or
    /// scaling[:factor] [default: translation:z:10].
    #[arg(long)]
    pub transform: Option<String>,
    /// Split to probe [default: val].
    #[arg(long)]
    pub split: Option<String>,
    /// Output directory for probe CSVs [default: <run>/probes].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Second run (same architecture, skip connections on) to compare against.
    #[arg(long)]
    pub compare_run: Option<String>,
    /// Basis of the comparison run [default: <compare-run>/basis].
    #[arg(long)]
    pub compare_basis: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FieldPcaArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of components [default: 32].
    #[arg(long)]
    pub k: Option<usize>,
    /// Subtract the field mean before fitting.
    #[arg(long)]
    pub center: bool,
    /// Output directory [default: <run>/fieldpca].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Basis directory [default: <run>/basis].
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Directory with probe CSVs [default: <run>/probes].
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Listen address [default: 127.0.0.1].
    #[arg(long)]
    pub host: Option<String>,
    /// Listen port [default: 8080].
    #[arg(long)]
    pub port: Option<u16>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<reglat::Error>() {
            match e {
                reglat::Error::MissingFile(_) => return EXIT_MISSING,
                reglat::Error::FingerprintMismatch { .. } => return EXIT_FINGERPRINT,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version go to stdout with status 0; usage errors use 2
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
