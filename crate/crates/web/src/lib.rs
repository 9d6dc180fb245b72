//! Browser bindings for a small interactive demo: generate a synthetic
//! fragment, look at any slice and its 2D spectrum, and score a
//! texture-energy ink map against the ground truth at a chosen threshold.

use vffc_core::evalkit::{self, quantile_threshold};
use vffc_core::pipeline::io::{FragmentVolume, InkMask};
use vffc_core::pipeline::synth::{synth_fragment, SynthParams};
use vffc_core::spectral::rfft2_stacked;
use vffc_core::Tensor;
use wasm_bindgen::prelude::*;

const DEPTH: usize = 24;

fn js(e: vffc_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn gray_rgba(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .flat_map(|&v| {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

/// Mean squared deviation from the 3x3 local mean, averaged over `slices`.
/// Ink smooths the substrate, so low values suggest ink.
pub fn texture_energy(volume: &FragmentVolume, slices: std::ops::Range<usize>) -> Vec<f64> {
    let (h, w) = (volume.height, volume.width);
    let mut out = vec![0.0; h * w];
    for z in slices.clone() {
        let s = volume.slice(z);
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        sum += s[yy * w + xx];
                        n += 1.0;
                    }
                }
                let d = s[y * w + x] - sum / n;
                out[y * w + x] += d * d;
            }
        }
    }
    let k = slices.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}

#[wasm_bindgen]
pub struct Demo {
    volume: FragmentVolume,
    mask: InkMask,
    band: (usize, usize),
    energy: Vec<f64>,
}

#[wasm_bindgen]
impl Demo {
    /// A `24 x size x size` fragment; `delta` is the ink texture contrast.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, delta: f64) -> Result<Demo, JsError> {
        let size = size as usize;
        let mut p = SynthParams::new(DEPTH, size, size);
        p.delta = delta;
        let (volume, mask) = synth_fragment(seed as u64, &p).map_err(js)?;
        let band = p.band();
        let energy = texture_energy(&volume, band.0..band.1);
        Ok(Demo {
            volume,
            mask,
            band,
            energy,
        })
    }

    pub fn size(&self) -> u32 {
        self.volume.width as u32
    }

    pub fn depth(&self) -> u32 {
        self.volume.depth as u32
    }

    pub fn band_start(&self) -> u32 {
        self.band.0 as u32
    }

    pub fn band_end(&self) -> u32 {
        self.band.1 as u32
    }

    pub fn prevalence(&self) -> f64 {
        self.mask.prevalence()
    }

    pub fn slice_rgba(&self, z: u32) -> Vec<u8> {
        let z = (z as usize).min(self.volume.depth - 1);
        gray_rgba(self.volume.slice(z), 0.0, 1.0)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        self.mask.data.iter().flat_map(|&m| if m == 1 { [255, 200, 0, 255] } else { [20, 20, 20, 255] }).collect()
    }

    /// Centred log-magnitude of the slice's 2D spectrum.
    pub fn spectrum_rgba(&self, z: u32) -> Result<Vec<u8>, JsError> {
        let z = (z as usize).min(self.volume.depth - 1);
        let mag = centred_log_spectrum(self.volume.slice(z), self.volume.height, self.volume.width).map_err(js)?;
        let (lo, hi) = min_max(&mag);
        Ok(gray_rgba(&mag, lo, hi))
    }

    pub fn energy_rgba(&self) -> Vec<u8> {
        let (lo, hi) = min_max(&self.energy);
        gray_rgba(&self.energy, lo, hi)
    }

    /// Energy level that marks as many pixels as the mask has ink.
    pub fn matched_threshold(&self) -> f64 {
        let neg: Vec<f64> = self.energy.iter().map(|v| -v).collect();
        -quantile_threshold(&neg, self.mask.prevalence())
    }

    pub fn energy_range(&self) -> Vec<f64> {
        let (lo, hi) = min_max(&self.energy);
        vec![lo, hi]
    }

    fn predict(&self, threshold: f64) -> Vec<u8> {
        self.energy.iter().map(|&e| (e <= threshold) as u8).collect()
    }

    /// `[f_beta, pfm, psnr, predicted fraction]` for ink = energy <= threshold.
    pub fn score(&self, threshold: f64) -> Result<Vec<f64>, JsError> {
        let pred = self.predict(threshold);
        let m = evalkit::evaluate(&pred, &self.mask.data, self.mask.height, self.mask.width).map_err(js)?;
        let frac = pred.iter().map(|&v| v as f64).sum::<f64>() / pred.len() as f64;
        Ok(vec![m.f_beta, m.pfm, m.psnr, frac])
    }

    /// True positives green, false positives red, misses blue.
    pub fn overlay_rgba(&self, threshold: f64) -> Vec<u8> {
        self.predict(threshold)
            .iter()
            .zip(&self.mask.data)
            .flat_map(|(&p, &g)| match (p, g) {
                (1, 1) => [40, 200, 60, 255],
                (1, 0) => [220, 50, 40, 255],
                (0, 1) => [40, 90, 230, 255],
                _ => [15, 15, 15, 255],
            })
            .collect()
    }
}

/// `log(1 + |X|)` of the full 2D spectrum with the zero frequency centred.
pub fn centred_log_spectrum(slice: &[f64], h: usize, w: usize) -> vffc_core::Result<Vec<f64>> {
    let x = Tensor::new(&[1, h, w, 1], slice.to_vec())?;
    let z = rfft2_stacked(&x)?;
    let wh = w / 2 + 1;
    let d = z.data();
    // Stacked layout (1, H, Wh, 2): re then im.
    let mag = |ky: usize, kx: usize| -> f64 {
        let (ky, kx) = if kx < wh { (ky, kx) } else { ((h - ky) % h, w - kx) };
        let i = (ky * wh + kx) * 2;
        (d[i] * d[i] + d[i + 1] * d[i + 1]).sqrt()
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (ky, kx) = ((y + h - h / 2) % h, (x + w - w / 2) % w);
            out[y * w + x] = (1.0 + mag(ky, kx)).ln();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_of_a_constant_is_a_centred_spike() {
        let s = centred_log_spectrum(&[1.0; 64], 8, 8).unwrap();
        let peak = (4 * 8 + 4, (1.0f64 + 64.0).ln());
        assert!((s[peak.0] - peak.1).abs() < 1e-9);
        assert!(s.iter().enumerate().all(|(i, &v)| i == peak.0 || v.abs() < 1e-9));
    }

    #[test]
    fn spectrum_is_symmetric() {
        let slice: Vec<f64> = (0..6 * 10).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let s = centred_log_spectrum(&slice, 6, 10).unwrap();
        for y in 1..6 {
            for x in 1..10 {
                let (my, mx) = (6 - y, 10 - x);
                assert!((s[y * 10 + x] - s[my * 10 + mx]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn texture_energy_separates_ink() {
        let demo = Demo::new(3, 128, 0.8).map_err(|_| ()).unwrap();
        let t = demo.matched_threshold();
        let scores = demo.score(t).map_err(|_| ()).unwrap();
        assert!((scores[3] - demo.prevalence()).abs() < 0.02);
        assert!(scores[0] > demo.prevalence() + 0.1, "{scores:?}");
        let control = Demo::new(3, 128, 0.0).map_err(|_| ()).unwrap();
        let s = control.score(control.matched_threshold()).map_err(|_| ()).unwrap();
        assert!(s[0] < scores[0]);
        assert_eq!(demo.slice_rgba(0).len(), 128 * 128 * 4);
    }
}
