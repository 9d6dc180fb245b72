//! Operator timing: median, p10 and p90 wall time for forward and
//! forward+backward passes.

use std::time::Instant;

use clap::ValueEnum;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vffc_core::ffc::{depth_one_discrepancy, FfcBlock, Variant};
use vffc_core::params::{Conv, Ctx, Mode, ParamStore};
use vffc_core::{Error, Tensor};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchOp {
    Vffc,
    Stffc,
    Sffc,
    Conv3d,
}

/// Inputs above this many values are refused.
const MAX_ELEMENTS: usize = 1 << 24;

enum Op {
    Ffc(FfcBlock),
    Conv(Conv),
}

impl Op {
    fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> vffc_core::Result<Tensor> {
        match self {
            Op::Ffc(b) => b.forward(ctx, x),
            Op::Conv(c) => c.forward(ctx, x),
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

pub fn run(op: BenchOp, shape: [usize; 5], iters: usize, seed: u64) -> Result<(), Failure> {
    let [n, d, h, w, c] = shape;
    if shape.contains(&0) || iters == 0 {
        return Err(Failure::Usage("shape entries and --iters must be positive".into()));
    }
    let numel = shape.iter().product::<usize>();
    if numel > MAX_ELEMENTS {
        return Err(Failure::Usage(format!("shape {shape:?} has {numel} values, above the {MAX_ELEMENTS} limit")));
    }
    if matches!(op, BenchOp::Vffc | BenchOp::Stffc) {
        let gap = depth_one_discrepancy(n, h, w, c, seed)?;
        if gap > 1e-9 {
            return Err(Error::invalid("bench", format!("vFFC and stFFC disagree at depth 1 by {gap:e}")).into());
        }
    }
    let (block, in_shape) = match op {
        BenchOp::Vffc => (Op::Ffc(FfcBlock::with_ratio("b", c, 0.5, Variant::Volumetric)?), vec![n, d, h, w, c]),
        BenchOp::Stffc => (
            Op::Ffc(FfcBlock::with_ratio("b", c, 0.5, Variant::SpatioTemporal { depth: d })?),
            vec![n, d, h, w, c],
        ),
        BenchOp::Sffc => (Op::Ffc(FfcBlock::with_ratio("b", c, 0.5, Variant::Spatial)?), vec![n * d, h, w, c]),
        BenchOp::Conv3d => (Op::Conv(Conv::same3("b", c, c, 3)), vec![n, d, h, w, c]),
    };
    let mut store = ParamStore::new(seed);
    match &block {
        Op::Ffc(b) => b.declare(&mut store)?,
        Op::Conv(cv) => cv.declare(&mut store)?,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::leaf(&in_shape, (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    println!("op,phase,shape,iters,median_ms,p10_ms,p90_ms,output_sum");
    let label = format!("{op:?}").to_lowercase();
    let dims = shape.map(|v| v.to_string()).join("x");
    for phase in ["forward", "forward_backward"] {
        let mut times = Vec::with_capacity(iters);
        let mut checksum = 0.0;
        for _ in 0..iters {
            let t = Instant::now();
            let mut ctx = Ctx::new(&mut store, Mode::Train, seed).with_grads(phase != "forward");
            let y = block.forward(&mut ctx, &if phase == "forward" { x.detach() } else { x.clone() })?;
            checksum = y.data().iter().sum::<f64>();
            if phase != "forward" {
                y.sum_all()?.backward()?;
            }
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        println!(
            "{label},{phase},{dims},{iters},{:.3},{:.3},{:.3},{checksum:.12e}",
            percentile(&times, 0.5),
            percentile(&times, 0.1),
            percentile(&times, 0.9)
        );
    }
    Ok(())
}
