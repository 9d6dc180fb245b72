//! Training configuration and its `key = value` file format.
//!
//! Network keys (`preset`, `widths`, `bottleneck`, ...) are accepted in the
//! same file. A `preset` line resets every network field except the
//! bottleneck, so it belongs at the top.

use std::fmt::Write as _;

use super::loss::{LossConfig, LossMode};
use super::optim::{AdamW, OneCycle};
use crate::error::{Error, Result};
use crate::kv;
use crate::network::NetworkConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub subvolume: [usize; 3],
    pub cell: [usize; 3],
    pub lattice_stride: usize,
    pub samples_per_cell: usize,
    /// Slices `start..start + count` of every volume; `None` keeps all.
    pub depth_window: Option<(usize, usize)>,
    pub loss: LossConfig,
    pub optimizer: AdamW,
    pub schedule: OneCycle,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dihedral: bool,
    pub random_crop: bool,
    pub channel_dropout: bool,
    pub chdrop_rate: f64,
    pub chdrop_max_fraction: f64,
    pub threshold: f64,
    /// Spatial size of inference tiles; neighbours overlap by half a tile.
    pub tile: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::desk(),
            subvolume: [16, 256, 256],
            cell: [32, 512, 512],
            lattice_stride: 64,
            samples_per_cell: 1,
            depth_window: None,
            loss: LossConfig::default(),
            optimizer: AdamW::default(),
            schedule: OneCycle::default(),
            batch_size: 4,
            epochs: 20,
            seed: 0,
            dihedral: true,
            random_crop: true,
            channel_dropout: true,
            chdrop_rate: 0.5,
            chdrop_max_fraction: 0.5,
            threshold: 0.5,
            tile: 256,
        }
    }
}

fn triple(e: &kv::Entry) -> Result<[usize; 3]> {
    let v = e.usize_list()?;
    v.try_into().map_err(|_| e.invalid("expected three integers D,H,W"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("train config", m));
        self.network.validate()?;
        if (0..3).any(|a| self.subvolume[a] > self.cell[a]) {
            return bad(format!("subvolume {:?} does not fit in cell {:?}", self.subvolume, self.cell));
        }
        if self.subvolume[0] != self.network.in_depth {
            return bad(format!(
                "subvolume depth {} differs from network input depth {}",
                self.subvolume[0], self.network.in_depth
            ));
        }
        let t = self.network.total_stride();
        if !self.subvolume[1].is_multiple_of(t) || !self.subvolume[2].is_multiple_of(t) {
            return bad(format!("subvolume height and width must be multiples of {t}"));
        }
        if self.dihedral && self.subvolume[1] != self.subvolume[2] {
            return bad("dihedral augmentation needs square subvolumes".into());
        }
        if self.batch_size == 0 || self.samples_per_cell == 0 || self.lattice_stride == 0 {
            return bad("batch_size, samples_per_cell and lattice_stride must be at least 1".into());
        }
        if !self.tile.is_multiple_of(t) || !self.tile.is_multiple_of(8) {
            return bad(format!("tile {} must be a multiple of {} and of 8", self.tile, t.max(8)));
        }
        if let Some((_, 0)) = self.depth_window {
            return bad("depth window must contain at least one slice".into());
        }
        if !(0.0..=1.0).contains(&self.chdrop_rate) || !(0.0..=1.0).contains(&self.chdrop_max_fraction) {
            return bad("channel dropout rate and fraction must lie in [0, 1]".into());
        }
        if !(self.loss.ink_weight > 0.0) || !(self.loss.eps > 0.0) {
            return bad("ink_weight and dice_eps must be positive".into());
        }
        let s = &self.schedule;
        if !(s.lr_max > 0.0 && s.div > 0.0 && s.final_div > 0.0 && (0.0..=1.0).contains(&s.pct_start)) {
            return bad("learning-rate schedule parameters out of range".into());
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("optimizer parameters out of range".into());
        }
        Ok(())
    }

    pub fn apply(&mut self, e: &kv::Entry) -> Result<()> {
        if self.network.apply(e)? {
            return Ok(());
        }
        match e.key.as_str() {
            "subvolume" => self.subvolume = triple(e)?,
            "cell" => self.cell = triple(e)?,
            "lattice_stride" => self.lattice_stride = e.usize()?,
            "samples_per_cell" => self.samples_per_cell = e.usize()?,
            "depth_window" => {
                self.depth_window = if e.value == "all" {
                    None
                } else {
                    match e.usize_list()?.as_slice() {
                        [s, c] => Some((*s, *c)),
                        _ => return Err(e.invalid("expected `start,count` or `all`")),
                    }
                }
            }
            "loss" => self.loss.mode = e.value.parse::<LossMode>().map_err(|m| e.invalid(m))?,
            "ink_weight" => self.loss.ink_weight = e.f64()?,
            "dice_eps" => self.loss.eps = e.f64()?,
            "wbce_verbatim" => self.loss.wbce_verbatim = e.bool()?,
            "lr" => self.schedule.lr_max = e.f64()?,
            "pct_start" => self.schedule.pct_start = e.f64()?,
            "div" => self.schedule.div = e.f64()?,
            "final_div" => self.schedule.final_div = e.f64()?,
            "beta1" => self.optimizer.beta1 = e.f64()?,
            "beta2" => self.optimizer.beta2 = e.f64()?,
            "adam_eps" => self.optimizer.eps = e.f64()?,
            "weight_decay" => self.optimizer.weight_decay = e.f64()?,
            "batch_size" => self.batch_size = e.usize()?,
            "epochs" => self.epochs = e.usize()?,
            "seed" => self.seed = e.u64()?,
            "dihedral" => self.dihedral = e.bool()?,
            "random_crop" => self.random_crop = e.bool()?,
            "channel_dropout" => self.channel_dropout = e.bool()?,
            "chdrop_rate" => self.chdrop_rate = e.f64()?,
            "chdrop_max_fraction" => self.chdrop_max_fraction = e.f64()?,
            "threshold" => self.threshold = e.f64()?,
            "tile" => self.tile = e.usize()?,
            _ => return Err(e.invalid("unknown key")),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for e in kv::parse(text)? {
            cfg.apply(&e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, in a form [`TrainConfig::from_text`] reads back exactly.
    pub fn to_text(&self) -> String {
        let mut s = self.network.to_text();
        let w = &mut s;
        let _ = writeln!(w, "subvolume = {}", kv::join(&self.subvolume));
        let _ = writeln!(w, "cell = {}", kv::join(&self.cell));
        let _ = writeln!(w, "lattice_stride = {}", self.lattice_stride);
        let _ = writeln!(w, "samples_per_cell = {}", self.samples_per_cell);
        match self.depth_window {
            Some((a, b)) => writeln!(w, "depth_window = {a},{b}"),
            None => writeln!(w, "depth_window = all"),
        }
        .ok();
        let _ = writeln!(w, "loss = {}", self.loss.mode);
        let _ = writeln!(w, "ink_weight = {:?}", self.loss.ink_weight);
        let _ = writeln!(w, "dice_eps = {:?}", self.loss.eps);
        let _ = writeln!(w, "wbce_verbatim = {}", self.loss.wbce_verbatim);
        let _ = writeln!(w, "lr = {:?}", self.schedule.lr_max);
        let _ = writeln!(w, "pct_start = {:?}", self.schedule.pct_start);
        let _ = writeln!(w, "div = {:?}", self.schedule.div);
        let _ = writeln!(w, "final_div = {:?}", self.schedule.final_div);
        let _ = writeln!(w, "beta1 = {:?}", self.optimizer.beta1);
        let _ = writeln!(w, "beta2 = {:?}", self.optimizer.beta2);
        let _ = writeln!(w, "adam_eps = {:?}", self.optimizer.eps);
        let _ = writeln!(w, "weight_decay = {:?}", self.optimizer.weight_decay);
        let _ = writeln!(w, "batch_size = {}", self.batch_size);
        let _ = writeln!(w, "epochs = {}", self.epochs);
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "dihedral = {}", self.dihedral);
        let _ = writeln!(w, "random_crop = {}", self.random_crop);
        let _ = writeln!(w, "channel_dropout = {}", self.channel_dropout);
        let _ = writeln!(w, "chdrop_rate = {:?}", self.chdrop_rate);
        let _ = writeln!(w, "chdrop_max_fraction = {:?}", self.chdrop_max_fraction);
        let _ = writeln!(w, "threshold = {:?}", self.threshold);
        let _ = writeln!(w, "tile = {}", self.tile);
        s
    }
}
