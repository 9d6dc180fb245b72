//! `vffc`: synthesize fragments, train, predict, evaluate, sweep, ablate
//! and benchmark.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric
//! failure (non-finite values).

mod ablate;
mod bench;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vffc_core::network::BottleneckKind;
use vffc_core::pipeline::loss::LossMode;

#[derive(Parser)]
#[command(name = "vffc", version, about = "Volumetric FFC ink detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_list<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a non-negative integer")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected {N} comma-separated integers"))
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic fragment: PGM slice stack, volume.meta and mask.pgm.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Depth, height and width.
        #[arg(long, value_parser = parse_list::<3>, default_value = "24,512,512")]
        size: [usize; 3],
        /// Texture contrast of ink; 0 gives a control fragment with no signal.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        strokes: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a network and keep the checkpoint with the best validation F-beta.
    Train(TrainArgs),
    /// Tiled inference over a volume.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Binarized map (PGM, 0/255).
        #[arg(long)]
        out: PathBuf,
        /// Probability map quantized to 8 bits.
        #[arg(long)]
        prob_out: Option<PathBuf>,
        /// Exact probabilities as a tensor container file.
        #[arg(long)]
        raw: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 256)]
        tile: usize,
    },
    /// Score a predicted map against a ground-truth mask.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Name written in the `fragment` column (defaults to the prediction's file stem).
        #[arg(long)]
        fragment: Option<String>,
    },
    /// Time an operator; CSV on stdout.
    Bench {
        #[arg(long, value_enum)]
        op: bench::BenchOp,
        /// N,D,H,W,C
        #[arg(long, value_parser = parse_list::<5>, default_value = "1,16,64,64,32")]
        shape: [usize; 5],
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Depth-activation sweep over a square region of a volume.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Top-left corner y,x of the region.
        #[arg(long, value_parser = parse_list::<2>)]
        region: [usize; 2],
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// input, stem, stageN or bottleneck (default: last encoder stage).
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the augmentation, loss and bottleneck ablation rows.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated subset of tables 1, 2, 3.
        #[arg(long, default_value = "1,2,3")]
        tables: String,
    },
}

#[derive(Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training fragment directories (volume slices plus mask.pgm).
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub val: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub bottleneck: Option<BottleneckKind>,
    #[arg(long)]
    pub no_dihedral: bool,
    #[arg(long)]
    pub no_randcrop: bool,
    #[arg(long)]
    pub no_chdrop: bool,
    /// dice, wbce or both.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub ink_weight: Option<f64>,
}

impl TrainArgs {
    pub fn loss_mode(&self) -> Result<Option<LossMode>, String> {
        self.loss.as_deref().map(str::parse).transpose()
    }
}

pub enum Failure {
    Usage(String),
    Core(vffc_core::Error),
}

impl From<vffc_core::Error> for Failure {
    fn from(e: vffc_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("VFFC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("VFFC_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Synth {
            out,
            seed,
            size,
            delta,
            strokes,
            noise,
        } => commands::synth(&out, seed, size, delta, strokes, noise),
        Command::Train(args) => commands::train(&args),
        Command::Predict {
            ckpt,
            volume,
            out,
            prob_out,
            raw,
            threshold,
            tile,
        } => commands::predict(&ckpt, &volume, &out, prob_out.as_deref(), raw.as_deref(), threshold, tile),
        Command::Eval {
            pred,
            gt,
            out,
            threshold,
            fragment,
        } => commands::eval(&pred, &gt, &out, threshold, fragment),
        Command::Bench { op, shape, iters, seed } => bench::run(op, shape, iters, seed),
        Command::Sweep {
            ckpt,
            volume,
            region,
            size,
            layer,
            out,
        } => commands::sweep(&ckpt, &volume, region, size, layer.as_deref(), &out),
        Command::Ablate { data, tables } => ablate::run(&data, &tables),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                vffc_core::Error::NonFinite { .. } | vffc_core::Error::NonFiniteLoss(_) => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
