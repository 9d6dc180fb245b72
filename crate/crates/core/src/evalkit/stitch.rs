//! Whole-fragment inference from overlapping tiles. Each tile contributes
//! only its central region, except toward the fragment border where it
//! keeps its outer part too, so every map pixel comes from exactly one
//! tile.

use crate::error::{Error, Result};
use crate::network::Network;
use crate::params::ParamStore;
use crate::pipeline::io::FragmentVolume;
use crate::tensor::Tensor;

/// Model output is this many times smaller than its input, per axis.
pub const MAP_SCALE: usize = 4;

/// Probability map at `1 / MAP_SCALE` of the volume's spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct InkMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl InkMap {
    /// Bilinear upsampling by `MAP_SCALE` to full resolution (align-corners
    /// off, edges clamped).
    pub fn upsample(&self) -> InkMap {
        let (h, w) = (self.height * MAP_SCALE, self.width * MAP_SCALE);
        let s = MAP_SCALE as f64;
        let src = |o: usize, n: usize| {
            let f = ((o as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
            let i = f.floor() as usize;
            (i, (i + 1).min(n - 1), f - i as f64)
        };
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let (y0, y1, fy) = src(y, self.height);
            for x in 0..w {
                let (x0, x1, fx) = src(x, self.width);
                let v = |yy: usize, xx: usize| self.data[yy * self.width + xx];
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
        InkMap { height: h, width: w, data }
    }
}

/// Anything that maps a `(d, h, w)` tile to an `(h/4, w/4)` probability map.
pub trait InkModel {
    fn predict_tile(&mut self, tile: &[f64], size: [usize; 3]) -> Result<Vec<f64>>;
}

/// A network with its parameters, evaluated in inference mode.
pub struct NetworkModel<'a> {
    pub network: &'a Network,
    pub store: &'a mut ParamStore,
}

impl InkModel for NetworkModel<'_> {
    fn predict_tile(&mut self, tile: &[f64], [d, h, w]: [usize; 3]) -> Result<Vec<f64>> {
        let x = Tensor::new(&[1, d, h, w, 1], tile.to_vec())?;
        Ok(self.network.predict(self.store, &x)?.to_vec())
    }
}

/// One tile: its input origin `(y, x)` and the map-space rows/columns it
/// writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSpan {
    pub origin: [usize; 2],
    pub rows: std::ops::Range<usize>,
    pub cols: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StitchPlan {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub stride: usize,
    pub tiles: Vec<TileSpan>,
}

/// Origins along one axis and the map-space range each one keeps.
fn axis_plan(len: usize, tile: usize, stride: usize) -> Vec<(usize, std::ops::Range<usize>)> {
    let mut origins: Vec<usize> = Vec::new();
    let mut o = 0;
    loop {
        let c = o.min(len - tile);
        if origins.last() != Some(&c) {
            origins.push(c);
        }
        if c + tile >= len {
            break;
        }
        o += stride;
    }
    // Cut between neighbours in the middle of their overlap, on the map grid.
    let cuts: Vec<usize> = origins
        .windows(2)
        .map(|p| ((p[0] + p[1] + tile) / 2) / MAP_SCALE)
        .collect();
    (0..origins.len())
        .map(|i| {
            let lo = if i == 0 { 0 } else { cuts[i - 1] };
            let hi = if i + 1 == origins.len() { len / MAP_SCALE } else { cuts[i] };
            (origins[i], lo..hi)
        })
        .collect()
}

impl StitchPlan {
    pub fn new(height: usize, width: usize, tile: usize, stride: usize) -> Result<StitchPlan> {
        if tile == 0 || !tile.is_multiple_of(MAP_SCALE) || stride == 0 || !stride.is_multiple_of(MAP_SCALE) || stride > tile {
            return Err(Error::invalid("stitch", format!("tile {tile} / stride {stride} unusable")));
        }
        if height < tile || width < tile {
            return Err(Error::invalid(
                "stitch",
                format!("volume {height}x{width} smaller than one {tile}x{tile} tile"),
            ));
        }
        if !height.is_multiple_of(MAP_SCALE) || !width.is_multiple_of(MAP_SCALE) {
            return Err(Error::invalid("stitch", format!("{height}x{width} is not divisible by {MAP_SCALE}")));
        }
        let ys = axis_plan(height, tile, stride);
        let xs = axis_plan(width, tile, stride);
        let mut tiles = Vec::with_capacity(ys.len() * xs.len());
        for (oy, rows) in &ys {
            for (ox, cols) in &xs {
                tiles.push(TileSpan {
                    origin: [*oy, *ox],
                    rows: rows.clone(),
                    cols: cols.clone(),
                });
            }
        }
        Ok(StitchPlan {
            height,
            width,
            tile,
            stride,
            tiles,
        })
    }

    /// How many tiles write each map pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mw = self.width / MAP_SCALE;
        let mut c = vec![0; (self.height / MAP_SCALE) * mw];
        for t in &self.tiles {
            for r in t.rows.clone() {
                for col in t.cols.clone() {
                    c[r * mw + col] += 1;
                }
            }
        }
        c
    }
}

/// Runs `model` on every tile of the plan (slices `depth_start..+depth`)
/// in the given visiting order and assembles the kept regions.
pub fn tile_predict_ordered(
    volume: &FragmentVolume,
    model: &mut dyn InkModel,
    plan: &StitchPlan,
    depth_start: usize,
    depth: usize,
    order: &[usize],
) -> Result<InkMap> {
    if (plan.height, plan.width) != (volume.height, volume.width) {
        return Err(Error::invalid("tile_predict", "plan does not match volume size"));
    }
    let (mh, mw) = (plan.height / MAP_SCALE, plan.width / MAP_SCALE);
    let tm = plan.tile / MAP_SCALE;
    let mut out = vec![0.0; mh * mw];
    for &i in order {
        let t = plan.tiles.get(i).ok_or_else(|| Error::invalid("tile_predict", "tile index out of range"))?;
        let size = [depth, plan.tile, plan.tile];
        let x = volume.crop([depth_start, t.origin[0], t.origin[1]], size)?;
        let p = model.predict_tile(&x, size)?;
        if p.len() != tm * tm {
            return Err(Error::invalid("tile_predict", format!("model returned {} values for a {tm}x{tm} map", p.len())));
        }
        let (oy, ox) = (t.origin[0] / MAP_SCALE, t.origin[1] / MAP_SCALE);
        for r in t.rows.clone() {
            for c in t.cols.clone() {
                out[r * mw + c] = p[(r - oy) * tm + (c - ox)];
            }
        }
    }
    Ok(InkMap {
        height: mh,
        width: mw,
        data: out,
    })
}

pub fn tile_predict(
    volume: &FragmentVolume,
    model: &mut dyn InkModel,
    plan: &StitchPlan,
    depth_start: usize,
    depth: usize,
) -> Result<InkMap> {
    let order: Vec<usize> = (0..plan.tiles.len()).collect();
    tile_predict_ordered(volume, model, plan, depth_start, depth, &order)
}
