//! The training loop: lattice sampling, augmentation, Dice + WBCE, AdamW
//! under a one-cycle schedule, and per-epoch validation by tiled inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::io::{FragmentVolume, InkMask};
use super::loss::total_loss;
use super::sampling::{build_lattice, d4_transform, drop_slices, sample_subvolume, FragmentSample, LatticeCell, D4};
use crate::error::{Error, Result};
use crate::evalkit::{self, tile_predict, Metrics, NetworkModel, StitchPlan};
use crate::network::Network;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Fragment {
    pub name: String,
    pub volume: FragmentVolume,
    pub mask: InkMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val: Metrics,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub network: Network,
    /// Parameters of the epoch with the best mean validation F-beta (the
    /// initial parameters when no epoch ran).
    pub best: ParamStore,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochStats>,
    pub log: Vec<String>,
}

pub const LOG_HEADER: &str = "epoch,loss,f_beta,pfm,psnr,lr";

fn log_line(s: &EpochStats) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{},{:.6e}",
        s.epoch,
        s.loss,
        s.val.f_beta,
        s.val.pfm,
        evalkit::format_psnr(s.val.psnr),
        s.lr
    )
}

/// Random stream for one sample, independent of batch layout and workers.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// The fragment restricted to the configured depth window.
pub fn windowed(f: &Fragment, window: Option<(usize, usize)>) -> Result<Fragment> {
    Ok(match window {
        Some((start, count)) => Fragment {
            volume: f.volume.depth_window(start, count)?,
            ..f.clone()
        },
        None => f.clone(),
    })
}

/// One augmented training sample, as drawn for `(epoch, index)`.
pub fn draw_sample(
    cfg: &TrainConfig,
    cell: &LatticeCell,
    frag: &Fragment,
    epoch: usize,
    index: usize,
) -> Result<FragmentSample> {
    let mut rng = sample_rng(cfg.seed, epoch, index);
    let mut s = sample_subvolume(cell, &frag.volume, &frag.mask, cfg.subvolume, cfg.random_crop, &mut rng)?;
    if cfg.dihedral {
        s = d4_transform(&s, D4::ALL[rng.gen_range(0..8)])?;
    }
    if cfg.channel_dropout {
        drop_slices(&mut s, cfg.chdrop_rate, cfg.chdrop_max_fraction, &mut rng);
    }
    Ok(s)
}

/// Input slices used for inference on a volume of `depth` slices: the
/// centred window of the network's input depth.
pub fn inference_window(depth: usize, in_depth: usize) -> Result<usize> {
    if depth < in_depth {
        return Err(Error::invalid(
            "inference",
            format!("volume has {depth} slices, network needs {in_depth}"),
        ));
    }
    Ok((depth - in_depth) / 2)
}

/// Full-resolution probability map of a fragment, tiled with `tile`-sized
/// windows at half-tile stride.
pub fn predict_fragment(network: &Network, store: &mut ParamStore, volume: &FragmentVolume, tile: usize) -> Result<Vec<f64>> {
    let plan = StitchPlan::new(volume.height, volume.width, tile, tile / 2)?;
    let d = network.config.in_depth;
    let start = inference_window(volume.depth, d)?;
    let mut model = NetworkModel { network, store };
    Ok(tile_predict(volume, &mut model, &plan, start, d)?.upsample().data)
}

/// Mean metrics over the validation fragments at the configured threshold.
pub fn validate(network: &Network, store: &mut ParamStore, cfg: &TrainConfig, val: &[Fragment]) -> Result<Metrics> {
    let mut sum = Metrics {
        f_beta: 0.0,
        pfm: 0.0,
        psnr: 0.0,
    };
    for f in val {
        let p = predict_fragment(network, store, &f.volume, cfg.tile)?;
        let m = evalkit::evaluate(&evalkit::binarize(&p, cfg.threshold), &f.mask.data, f.mask.height, f.mask.width)?;
        sum.f_beta += m.f_beta;
        sum.pfm += m.pfm;
        sum.psnr += m.psnr;
    }
    let n = val.len() as f64;
    Ok(Metrics {
        f_beta: sum.f_beta / n,
        pfm: sum.pfm / n,
        psnr: sum.psnr / n,
    })
}

fn batch_tensors(samples: &[FragmentSample]) -> Result<(Tensor, Tensor)> {
    let [d, h, w] = samples[0].size;
    let b = samples.len();
    let x: Vec<f64> = samples.iter().flat_map(|s| s.volume.iter().copied()).collect();
    let t: Vec<f64> = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    Ok((Tensor::new(&[b, d, h, w, 1], x)?, Tensor::new(&[b, h / 4, w / 4, 1], t)?))
}

/// Trains from scratch; `on_line` receives the log header and one line per
/// epoch as they are produced.
pub fn train(cfg: &TrainConfig, train_set: &[Fragment], val_set: &[Fragment], on_line: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train", "need at least one training and one validation fragment"));
    }
    if let Some(f) = val_set.iter().find(|v| train_set.iter().any(|t| t.name == v.name)) {
        return Err(Error::invalid("train", format!("fragment `{}` is in both training and validation sets", f.name)));
    }
    let train_set: Vec<Fragment> = train_set.iter().map(|f| windowed(f, cfg.depth_window)).collect::<Result<_>>()?;
    let val_set: Vec<Fragment> = val_set.iter().map(|f| windowed(f, cfg.depth_window)).collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for (i, f) in train_set.iter().enumerate() {
        let v = &f.volume;
        cells.extend(build_lattice([v.depth, v.height, v.width], cfg.cell, cfg.lattice_stride, i)?);
    }
    let per_epoch = cells.len() * cfg.samples_per_cell;
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let network = Network::new(cfg.network.clone())?;
    let mut store = network.init(cfg.seed)?;
    let mut best = store.clone();
    let mut best_epoch = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut log = vec![LOG_HEADER.to_string()];
    on_line(LOG_HEADER);

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..per_epoch).collect();
        order.shuffle(&mut sample_rng(cfg.seed ^ 0x5eed_0bde, epoch, 0));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<FragmentSample> = batch
                .par_iter()
                .map(|&k| {
                    let cell = &cells[k / cfg.samples_per_cell];
                    draw_sample(cfg, cell, &train_set[cell.fragment], epoch, k)
                })
                .collect::<Result<_>>()?;
            let provenance = || {
                let items: Vec<String> = samples
                    .iter()
                    .map(|s| format!("[{} {}]", train_set[s.fragment].name, s.provenance()))
                    .collect();
                format!("epoch {epoch} step {step}: {}", items.join(" "))
            };
            let numeric = |e: Error| match e {
                Error::NonFinite { op } => Error::NonFiniteLoss(format!("{op} at {}", provenance())),
                other => other,
            };
            let (x, target) = batch_tensors(&samples)?;
            let batch_seed = sample_rng(cfg.seed ^ 0xba7c, epoch, step).gen();
            let (loss, grads) = {
                let mut ctx = Ctx::new(&mut store, Mode::Train, batch_seed);
                let p = network.forward(&mut ctx, &x).and_then(|l| l.sigmoid()).map_err(numeric)?;
                let loss = total_loss(&p, &target, &cfg.loss).map_err(numeric)?;
                let value = loss.item()?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss(provenance()));
                }
                loss.backward().map_err(numeric)?;
                (value, ctx.grads())
            };
            lr = cfg.schedule.lr(step, total_steps)?;
            cfg.optimizer
                .step(&mut store, &grads, lr, step as u64 + 1)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss(format!("gradient at {}", provenance())),
                    other => other,
                })?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let val = validate(&network, &mut store, cfg, &val_set).map_err(|e| match e {
            Error::NonFinite { op } => Error::NonFiniteLoss(format!("{op} while validating after epoch {epoch}")),
            other => other,
        })?;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / per_epoch as f64,
            val,
            lr,
        };
        let line = log_line(&stats);
        on_line(&line);
        log.push(line);
        if val.f_beta > best_score {
            best_score = val.f_beta;
            best = store.clone();
            best_epoch = Some(epoch);
        }
        history.push(stats);
    }
    Ok(TrainOutcome {
        network,
        best,
        best_epoch,
        history,
        log,
    })
}
