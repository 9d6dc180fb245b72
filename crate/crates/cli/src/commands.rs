use std::fs;
use std::path::Path;

use vffc_core::container;
use vffc_core::evalkit::{self, depth_activation_sweep, Metrics};
use vffc_core::network::{load_checkpoint, save_checkpoint, Network, ProbeLayer};
use vffc_core::pipeline::config::TrainConfig;
use vffc_core::pipeline::io::{self, load_mask, load_volume, save_map, save_mask, save_volume, InkMask};
use vffc_core::pipeline::synth::{synth_fragment, SynthParams};
use vffc_core::pipeline::train::{self, predict_fragment, validate, Fragment, TrainOutcome};
use vffc_core::Error;

use crate::manifest::{self, Manifest};
use crate::{DataArgs, Failure, TrainArgs};

pub const MASK_FILE: &str = "mask.pgm";
pub const CHECKPOINT_FILE: &str = "checkpoint.vffc";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::format(dir, format!("cannot create directory: {e}")).into())
}

pub fn synth(
    out: &Path,
    seed: u64,
    size: [usize; 3],
    delta: Option<f64>,
    strokes: Option<usize>,
    noise: Option<f64>,
) -> Result<(), Failure> {
    let mut manifest = Manifest::start("synth");
    let [d, h, w] = size;
    let mut p = SynthParams::new(d, h, w);
    if let Some(v) = delta {
        p.delta = v;
    }
    if let Some(v) = strokes {
        p.strokes = v;
    }
    if let Some(v) = noise {
        p.noise = v;
    }
    let (volume, mask) = synth_fragment(seed, &p)?;
    create_dir(out)?;
    save_volume(out, &volume)?;
    save_mask(&out.join(MASK_FILE), &mask)?;
    let (b0, b1) = p.band();
    manifest
        .set("seed", seed)
        .set("size", format!("{d},{h},{w}"))
        .set("delta", format!("{:?}", p.delta))
        .set("control", p.delta == 0.0)
        .set("strokes", p.strokes)
        .set("noise", format!("{:?}", p.noise))
        .set("ink_band", format!("{b0}..{b1}"))
        .set("prevalence", format!("{:.6}", mask.prevalence()))
        .output(out);
    manifest.write(&manifest::in_dir(out))?;
    Ok(())
}

pub fn load_fragment(dir: &Path) -> Result<Fragment, Failure> {
    let volume = load_volume(dir)?;
    let mask = load_mask(&dir.join(MASK_FILE))?;
    if (mask.height, mask.width) != (volume.height, volume.width) {
        return Err(Error::format(
            dir.join(MASK_FILE),
            format!(
                "mask is {}x{} but the volume is {}x{}",
                mask.height, mask.width, volume.height, volume.width
            ),
        )
        .into());
    }
    Ok(Fragment {
        name: dir.display().to_string(),
        volume,
        mask,
    })
}

/// Defaults, then the config file, then command-line overrides.
pub fn resolve_config(args: &DataArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
            TrainConfig::from_text(&text).map_err(|e| match e {
                Error::Config { line, msg } => Error::format(path, format!("line {line}: {msg}")),
                other => other,
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn load_sets(args: &DataArgs) -> Result<(Vec<Fragment>, Vec<Fragment>), Failure> {
    let tr = args.data.iter().map(|d| load_fragment(d)).collect::<Result<_, _>>()?;
    let va = args.val.iter().map(|d| load_fragment(d)).collect::<Result<_, _>>()?;
    Ok((tr, va))
}

/// Trains and writes checkpoint, log and resolved config into `out`.
pub fn train_into(
    cfg: &TrainConfig,
    tr: &[Fragment],
    va: &[Fragment],
    out: &Path,
    echo: bool,
) -> Result<(TrainOutcome, Metrics), Failure> {
    cfg.validate()?;
    create_dir(out)?;
    let mut outcome = train::train(cfg, tr, va, &mut |line| {
        if echo {
            println!("{line}");
        }
    })?;
    fs::write(out.join(LOG_FILE), outcome.log.join("\n") + "\n")?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &cfg.network, &outcome.best)?;
    let metrics = match outcome.best_epoch {
        Some(e) => outcome.history[e].val,
        None => {
            let windowed: Vec<Fragment> = va
                .iter()
                .map(|f| train::windowed(f, cfg.depth_window))
                .collect::<vffc_core::Result<_>>()?;
            validate(&outcome.network, &mut outcome.best, cfg, &windowed)?
        }
    };
    Ok((outcome, metrics))
}

pub fn train(args: &TrainArgs) -> Result<(), Failure> {
    let mut manifest = Manifest::start("train");
    let mut cfg = resolve_config(&args.data)?;
    if let Some(b) = args.bottleneck {
        cfg.network.bottleneck = b;
    }
    cfg.dihedral &= !args.no_dihedral;
    cfg.random_crop &= !args.no_randcrop;
    cfg.channel_dropout &= !args.no_chdrop;
    if let Some(mode) = args.loss_mode().map_err(Failure::Usage)? {
        cfg.loss.mode = mode;
    }
    if let Some(w) = args.ink_weight {
        cfg.loss.ink_weight = w;
    }
    let (tr, va) = load_sets(&args.data)?;
    let out = &args.data.out;
    let (outcome, m) = train_into(&cfg, &tr, &va, out, true)?;
    manifest
        .set("seed", cfg.seed)
        .set("data", tr.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(","))
        .set("val", va.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(","))
        .set("best_epoch", outcome.best_epoch.map_or("none".to_string(), |e| e.to_string()))
        .set("val_f_beta", format!("{:.6}", m.f_beta))
        .set("val_pfm", format!("{:.6}", m.pfm))
        .set("val_psnr", evalkit::format_psnr(m.psnr))
        .config(&cfg.to_text())
        .output(&out.join(CHECKPOINT_FILE))
        .output(&out.join(LOG_FILE));
    manifest.write(&manifest::in_dir(out))?;
    Ok(())
}

pub fn predict(
    ckpt: &Path,
    volume_dir: &Path,
    out: &Path,
    prob_out: Option<&Path>,
    raw: Option<&Path>,
    threshold: f64,
    tile: usize,
) -> Result<(), Failure> {
    let mut manifest = Manifest::start("predict");
    let (config, mut store) = load_checkpoint(ckpt)?;
    let network = Network::new(config)?;
    let volume = load_volume(volume_dir)?;
    let (h, w) = (volume.height, volume.width);
    let prob = predict_fragment(&network, &mut store, &volume, tile)?;
    let mask = InkMask::new(h, w, evalkit::binarize(&prob, threshold))?;
    save_mask(out, &mask)?;
    manifest
        .set("checkpoint", ckpt.display())
        .set("volume", volume_dir.display())
        .set("threshold", threshold)
        .set("tile", tile)
        .set("depth_start", train::inference_window(volume.depth, network.config.in_depth)?)
        .output(out);
    if let Some(p) = prob_out {
        save_map(p, h, w, &prob)?;
        manifest.output(p);
    }
    if let Some(p) = raw {
        let mut f = fs::File::create(p)?;
        container::write_raw(&mut f, &[h, w], &prob)?;
        manifest.output(p);
    }
    manifest.write(&manifest::beside(out))?;
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path, out: &Path, threshold: f64, fragment: Option<String>) -> Result<(), Failure> {
    let mut manifest = Manifest::start("eval");
    let (ph, pw, values) = io::load_map(pred)?;
    let truth = load_mask(gt)?;
    if (ph, pw) != (truth.height, truth.width) {
        return Err(Error::ShapeMismatch {
            op: "eval",
            expected: vec![truth.height, truth.width],
            found: vec![ph, pw],
        }
        .into());
    }
    let binary = evalkit::binarize(&values, threshold);
    let m = evalkit::evaluate(&binary, &truth.data, ph, pw)?;
    let name = fragment.unwrap_or_else(|| pred.file_stem().unwrap_or_default().to_string_lossy().into_owned());
    let csv = format!("{}\n{}\n", evalkit::REPORT_HEADER, evalkit::report_row(&name, &m, threshold));
    fs::write(out, &csv)?;
    print!("{csv}");
    manifest
        .set("pred", pred.display())
        .set("gt", gt.display())
        .set("threshold", threshold)
        .output(out);
    manifest.write(&manifest::beside(out))?;
    Ok(())
}

pub fn sweep(
    ckpt: &Path,
    volume_dir: &Path,
    region: [usize; 2],
    size: usize,
    layer: Option<&str>,
    out: &Path,
) -> Result<(), Failure> {
    let mut manifest = Manifest::start("sweep");
    let (config, mut store) = load_checkpoint(ckpt)?;
    let network = Network::new(config)?;
    let layer: ProbeLayer = match layer {
        Some(l) => l.parse().map_err(Failure::Usage)?,
        None => ProbeLayer::Stage(network.config.stages() - 1),
    };
    let volume = load_volume(volume_dir)?;
    let [y, x] = region;
    if y + size > volume.height || x + size > volume.width {
        return Err(Error::invalid(
            "sweep",
            format!("region {y},{x} of size {size} exceeds {}x{}", volume.height, volume.width),
        )
        .into());
    }
    let dims = [volume.depth, size, size];
    let data = volume.crop([0, y, x], dims)?;
    let m = depth_activation_sweep(&network, &mut store, &data, dims, layer)?;
    fs::write(out, m.to_csv())?;
    manifest
        .set("checkpoint", ckpt.display())
        .set("volume", volume_dir.display())
        .set("region", format!("{y},{x}"))
        .set("size", size)
        .set("layer", format!("{layer:?}"))
        .output(out);
    manifest.write(&manifest::beside(out))?;
    Ok(())
}
