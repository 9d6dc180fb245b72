//! Synthetic carbonized-papyrus fragments.
//!
//! The substrate is two crossed layers of fibers (sinusoid bundles running
//! along each spatial axis, their phase drifting slowly with depth) plus
//! voxel noise. Ink is a set of polyline strokes; inside a band of slices it
//! low-passes the substrate texture and nudges density up by a fraction of
//! the noise level, so the cue is the missing high-frequency texture rather
//! than brightness.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io::{FragmentVolume, InkMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub strokes: usize,
    pub min_stroke_width: f64,
    pub max_stroke_width: f64,
    /// Texture contrast of ink: 0 leaves the substrate untouched, 1 fully
    /// replaces it by its 5x5 local mean.
    pub delta: f64,
    pub noise: f64,
    /// Slices `start..end` carrying the ink effect (default: the central
    /// eight slices).
    pub ink_band: Option<(usize, usize)>,
    pub max_prevalence: f64,
}

pub const DEFAULT_DELTA: f64 = 0.8;

impl SynthParams {
    /// Defaults for a fragment of the given size; the stroke count scales
    /// with the area (20 strokes per 512 x 512).
    pub fn new(depth: usize, height: usize, width: usize) -> SynthParams {
        let strokes = ((20.0 * (height * width) as f64 / (512.0 * 512.0)).round() as usize).max(1);
        SynthParams {
            depth,
            height,
            width,
            strokes,
            min_stroke_width: 4.0,
            max_stroke_width: 10.0,
            delta: DEFAULT_DELTA,
            noise: 0.08,
            ink_band: None,
            max_prevalence: 0.6,
        }
    }

    pub fn band(&self) -> (usize, usize) {
        self.ink_band.unwrap_or_else(|| {
            let c = self.depth / 2;
            (c.saturating_sub(4), (c + 4).min(self.depth))
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("synth", m));
        if self.depth * self.height * self.width == 0 {
            return bad("size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("delta {} outside [0, 1]", self.delta));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        if !(self.min_stroke_width > 0.0 && self.min_stroke_width <= self.max_stroke_width) {
            return bad("stroke widths must satisfy 0 < min <= max".into());
        }
        let (b0, b1) = self.band();
        if b0 >= b1 || b1 > self.depth {
            return bad(format!("ink band {b0}..{b1} invalid for depth {}", self.depth));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn draw_strokes(params: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (params.height, params.width);
    let mut mask = vec![0u8; h * w];
    for _ in 0..params.strokes {
        let width = rng.gen_range(params.min_stroke_width..=params.max_stroke_width);
        let r = width / 2.0;
        let mut p = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let mut angle = rng.gen_range(0.0..2.0 * PI);
        for _ in 0..rng.gen_range(3..=6) {
            let len = rng.gen_range(20.0..70.0);
            angle += rng.gen_range(-PI / 3.0..PI / 3.0);
            let q = (p.0 + len * angle.cos(), p.1 + len * angle.sin());
            let x0 = (p.0.min(q.0) - r).floor().max(0.0) as usize;
            let x1 = ((p.0.max(q.0) + r).ceil().max(0.0) as usize).min(w);
            let y0 = (p.1.min(q.1) - r).floor().max(0.0) as usize;
            let y1 = ((p.1.max(q.1) + r).ceil().max(0.0) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if segment_distance((x as f64 + 0.5, y as f64 + 0.5), p, q) <= r {
                        mask[y * w + x] = 1;
                    }
                }
            }
            p = q;
        }
    }
    mask
}

/// Ink strokes only; identical to the mask returned by [`synth_fragment`]
/// for the same seed and size.
pub fn synth_mask(seed: u64, params: &SynthParams) -> Result<InkMask> {
    params.validate()?;
    let mut rng = stream(seed, 1);
    let limit = params.max_prevalence;
    for _ in 0..100 {
        let mask = InkMask::new(params.height, params.width, draw_strokes(params, &mut rng))?;
        if mask.prevalence() <= limit {
            return Ok(mask);
        }
    }
    Err(Error::invalid("synth", format!("could not draw strokes under {limit} prevalence")))
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    drift: f64,
    amplitude: f64,
}

fn fiber_bundle(rng: &mut ChaCha8Rng, along_x: bool) -> Vec<Wave> {
    (0..rng.gen_range(2..=4))
        .map(|_| {
            let period = rng.gen_range(6.0..20.0);
            let tilt = rng.gen_range(-0.17..0.17);
            // Fibers along x vary across y, and vice versa.
            let theta = if along_x { PI / 2.0 + tilt } else { tilt };
            let k = 2.0 * PI / period;
            Wave {
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                phase: rng.gen_range(0.0..2.0 * PI),
                drift: rng.gen_range(-0.3..0.3),
                amplitude: rng.gen_range(0.03..0.06),
            }
        })
        .collect()
}

/// 5x5 box mean with edge clamping.
fn box5(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dx in -2isize..=2 {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                s += src[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -2isize..=2 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            out[y * w + x] = s / 25.0;
        }
    }
    out
}

/// Generates a volume and its ink mask; deterministic in `seed`. The mask
/// and the substrate do not depend on `delta`, so a `delta = 0` control
/// shares everything with its inked counterpart except the ink effect.
pub fn synth_fragment(seed: u64, params: &SynthParams) -> Result<(FragmentVolume, InkMask)> {
    let mask = synth_mask(seed, params)?;
    let (d, h, w) = (params.depth, params.height, params.width);
    let mut rng = stream(seed, 2);
    let horizontal = fiber_bundle(&mut rng, true);
    let vertical = fiber_bundle(&mut rng, false);
    // Per-pixel sin/cos of each wave's spatial phase; depth drift is then a
    // rotation by the drift angle.
    let tables = |waves: &[Wave]| -> Vec<(Vec<f64>, Vec<f64>)> {
        waves
            .iter()
            .map(|wv| {
                let mut s = vec![0.0; h * w];
                let mut c = vec![0.0; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let a = wv.kx * x as f64 + wv.ky * y as f64 + wv.phase;
                        s[y * w + x] = a.sin();
                        c[y * w + x] = a.cos();
                    }
                }
                (s, c)
            })
            .collect()
    };
    let (th, tv) = (tables(&horizontal), tables(&vertical));
    let mut noise_rng = stream(seed, 3);
    let normal = Normal::new(0.0, params.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid("synth", e.to_string()))?;
    let (b0, b1) = params.band();
    let zc = (d as f64 - 1.0) / 2.0;
    let mut voxels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        // Upper slices are dominated by the horizontal layer, lower by the vertical.
        let mix = 1.0 / (1.0 + ((z as f64 - zc) / 3.0).exp());
        let mut slice = vec![0.45; h * w];
        for (waves, tabs, weight) in [(&horizontal, &th, 0.5 + mix), (&vertical, &tv, 1.5 - mix)] {
            for (wv, (s, c)) in waves.iter().zip(tabs) {
                let (sd, cd) = (wv.drift * z as f64).sin_cos();
                let a = weight * wv.amplitude;
                for i in 0..h * w {
                    slice[i] += a * (s[i] * cd + c[i] * sd);
                }
            }
        }
        if params.noise > 0.0 {
            for v in slice.iter_mut() {
                *v += normal.sample(&mut noise_rng);
            }
        }
        if params.delta > 0.0 && (b0..b1).contains(&z) {
            let smooth = box5(&slice, h, w);
            let shift = 0.25 * params.noise * params.delta;
            for i in 0..h * w {
                if mask.data[i] == 1 {
                    slice[i] = (1.0 - params.delta) * slice[i] + params.delta * smooth[i] + shift;
                }
            }
        }
        voxels.extend(slice.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok((FragmentVolume::new(d, h, w, voxels)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let p = SynthParams::new(6, 64, 64);
        let a = synth_fragment(3, &p).unwrap();
        let b = synth_fragment(3, &p).unwrap();
        assert!(a.0.voxels.iter().zip(&b.0.voxels).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.1, b.1);
        assert_ne!(synth_fragment(4, &p).unwrap().1, a.1);
    }

    #[test]
    fn delta_only_touches_ink_in_the_band() {
        let mut p = SynthParams::new(12, 96, 96);
        let (inked, mask) = synth_fragment(5, &p).unwrap();
        p.delta = 0.0;
        let (plain, mask0) = synth_fragment(5, &p).unwrap();
        assert_eq!(mask, mask0);
        let (b0, b1) = p.band();
        let n = 96 * 96;
        for z in 0..12 {
            for i in 0..n {
                let same = inked.voxels[z * n + i] == plain.voxels[z * n + i];
                if !(b0..b1).contains(&z) || mask.data[i] == 0 {
                    assert!(same);
                }
            }
        }
    }

    #[test]
    fn ink_lowers_local_texture_energy() {
        let p = SynthParams::new(16, 128, 128);
        let (vol, mask) = synth_fragment(1, &p).unwrap();
        let (b0, _) = p.band();
        let s = vol.slice(b0);
        let lap = |i: usize| {
            let (y, x) = (i / 128, i % 128);
            (4.0 * s[i] - s[(y - 1) * 128 + x] - s[(y + 1) * 128 + x] - s[i - 1] - s[i + 1]).abs()
        };
        let (mut ink, mut bg) = (Vec::new(), Vec::new());
        for y in 1..127 {
            for x in 1..127 {
                let i = y * 128 + x;
                if mask.data[i] == 1 { ink.push(lap(i)) } else { bg.push(lap(i)) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&ink) < 0.5 * mean(&bg));
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = SynthParams::new(4, 16, 16);
        p.delta = 1.5;
        assert!(synth_fragment(0, &p).is_err());
        let mut p = SynthParams::new(4, 32, 32);
        p.strokes = 200;
        p.min_stroke_width = 10.0;
        assert!(synth_mask(0, &p).is_err());
    }

    #[test]
    fn default_prevalence_range() {
        let params = SynthParams::new(24, 512, 512);
        for seed in 0..20 {
            let p = synth_mask(seed, &params).unwrap().prevalence();
            assert!((0.05..=0.25).contains(&p), "seed {seed}: {p}");
        }
    }
}
