//! Real-input multi-dimensional FFTs over the spatial axes of channels-last
//! tensors, with differentiable forward and inverse transforms.
//!
//! Conventions:
//! * the transformed axes are the `k` axes immediately before the channel
//!   axis (`k = 3` for `(N, D, H, W, C)`, `k = 2` for `(N, H, W, C)`); any
//!   leading axes are batch axes;
//! * the last transformed axis keeps `floor(W/2) + 1` bins (the DC and, for
//!   even `W`, Nyquist columns are retained);
//! * the forward transform is unscaled and the inverse scales by
//!   `1 / (D*H*W)`, so `irfft3(rfft3(x)) == x`.
//!
//! The "stacked" variants pack real and imaginary parts along the channel axis
//! as `[re_0..re_C, im_0..im_C]`, which is the layout the spectral transform
//! block feeds to its pointwise convolution.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::{Direction, FftPlan};
use crate::tensor::{numel, Tensor};

/// Half spectrum of a real volume.
#[derive(Debug, Clone)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
    /// Length of the last transformed axis before the transform.
    pub original_w: usize,
}

impl ComplexSpectrum {
    pub fn new(re: Tensor, im: Tensor, original_w: usize) -> Result<ComplexSpectrum> {
        if re.shape() != im.shape() {
            return Err(Error::ShapeMismatch {
                op: "spectrum",
                expected: re.shape().to_vec(),
                found: im.shape().to_vec(),
            });
        }
        if re.rank() < 4 {
            return Err(Error::invalid("spectrum", "expected (.., D, H, Wh, C)"));
        }
        let wh = re.shape()[re.rank() - 2];
        if wh != original_w / 2 + 1 {
            return Err(Error::invalid(
                "spectrum",
                format!("half width {wh} inconsistent with original width {original_w}"),
            ));
        }
        Ok(ComplexSpectrum { re, im, original_w })
    }
}

/// Spatial layout of a tensor for a `k`-dimensional transform.
#[derive(Debug, Clone)]
struct Layout {
    batch: usize,
    dims: Vec<usize>,
    channels: usize,
}

impl Layout {
    fn of(shape: &[usize], k: usize, op: &'static str) -> Result<Layout> {
        if shape.len() < k + 1 {
            return Err(Error::invalid(op, format!("rank {} too small for a {k}-d transform", shape.len())));
        }
        let r = shape.len();
        let dims = shape[r - 1 - k..r - 1].to_vec();
        if dims.contains(&0) || shape[r - 1] == 0 {
            return Err(Error::invalid(op, "empty axis"));
        }
        Ok(Layout {
            batch: shape[..r - 1 - k].iter().product(),
            dims,
            channels: shape[r - 1],
        })
    }

    fn half_dims(&self) -> Vec<usize> {
        let mut d = self.dims.clone();
        let last = d.len() - 1;
        d[last] = d[last] / 2 + 1;
        d
    }
}

/// Runs `plan` over every line of `buf` (shape `dims`) along `axis`.
fn transform_axis(buf: &mut [Complex64], dims: &[usize], axis: usize, plan: &FftPlan) {
    let len = dims[axis];
    if len == 1 {
        return;
    }
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut line = vec![Complex64::new(0.0, 0.0); len];
    for o in 0..outer {
        for i in 0..stride {
            let base = o * len * stride + i;
            for (j, v) in line.iter_mut().enumerate() {
                *v = buf[base + j * stride];
            }
            plan.process(&mut line);
            for (j, v) in line.iter().enumerate() {
                buf[base + j * stride] = *v;
            }
        }
    }
}

struct Plans {
    last: FftPlan,
    others: Vec<FftPlan>,
}

impl Plans {
    fn new(dims: &[usize], direction: Direction) -> Plans {
        let k = dims.len();
        Plans {
            last: FftPlan::new(dims[k - 1], direction),
            others: dims[..k - 1].iter().map(|&d| FftPlan::new(d, direction)).collect(),
        }
    }
}

/// Unscaled forward real transform of one volume (row-major `dims`).
fn rfft_volume(vol: &[f64], dims: &[usize], plans: &Plans) -> Vec<Complex64> {
    let k = dims.len();
    let w = dims[k - 1];
    let wh = w / 2 + 1;
    let rows = vol.len() / w;
    let mut half = vec![Complex64::new(0.0, 0.0); rows * wh];
    let mut line = vec![Complex64::new(0.0, 0.0); w];
    for r in 0..rows {
        for (j, v) in line.iter_mut().enumerate() {
            *v = Complex64::new(vol[r * w + j], 0.0);
        }
        plans.last.process(&mut line);
        half[r * wh..(r + 1) * wh].copy_from_slice(&line[..wh]);
    }
    let mut hdims = dims.to_vec();
    hdims[k - 1] = wh;
    for (axis, plan) in plans.others.iter().enumerate() {
        transform_axis(&mut half, &hdims, axis, plan);
    }
    half
}

/// Unscaled inverse of [`rfft_volume`] (the result is `N * x`).
fn irfft_volume(mut half: Vec<Complex64>, dims: &[usize], plans: &Plans) -> Vec<f64> {
    let k = dims.len();
    let w = dims[k - 1];
    let wh = w / 2 + 1;
    let mut hdims = dims.to_vec();
    hdims[k - 1] = wh;
    for (axis, plan) in plans.others.iter().enumerate() {
        transform_axis(&mut half, &hdims, axis, plan);
    }
    let rows = half.len() / wh;
    let mut out = vec![0.0; rows * w];
    let mut line = vec![Complex64::new(0.0, 0.0); w];
    for r in 0..rows {
        let h = &half[r * wh..(r + 1) * wh];
        for (j, v) in line.iter_mut().enumerate() {
            *v = if j < wh { h[j] } else { h[w - j].conj() };
        }
        plans.last.process(&mut line);
        for (j, v) in line.iter().enumerate() {
            out[r * w + j] = v.re;
        }
    }
    out
}

/// Forward transform of a channels-last buffer into the stacked layout.
fn rfft_stacked_raw(data: &[f64], layout: &Layout) -> Vec<f64> {
    let vol_len: usize = layout.dims.iter().product();
    let hdims = layout.half_dims();
    let half_len: usize = hdims.iter().product();
    let c = layout.channels;
    let plans = Plans::new(&layout.dims, Direction::Forward);
    let spectra: Vec<Vec<Complex64>> = (0..layout.batch * c)
        .into_par_iter()
        .map(|task| {
            let (b, ch) = (task / c, task % c);
            let base = b * vol_len * c;
            let vol: Vec<f64> = (0..vol_len).map(|v| data[base + v * c + ch]).collect();
            rfft_volume(&vol, &layout.dims, &plans)
        })
        .collect();
    let mut out = vec![0.0; layout.batch * half_len * 2 * c];
    for (task, spec) in spectra.iter().enumerate() {
        let (b, ch) = (task / c, task % c);
        let base = b * half_len * 2 * c;
        for (v, z) in spec.iter().enumerate() {
            out[base + v * 2 * c + ch] = z.re;
            out[base + v * 2 * c + c + ch] = z.im;
        }
    }
    out
}

/// Inverse of the stacked layout back to channels-last real data.
/// `scale` multiplies the unscaled inverse.
fn irfft_stacked_raw(data: &[f64], layout: &Layout, scale: f64) -> Vec<f64> {
    let vol_len: usize = layout.dims.iter().product();
    let hdims = layout.half_dims();
    let half_len: usize = hdims.iter().product();
    let c = layout.channels;
    let plans = Plans::new(&layout.dims, Direction::Inverse);
    let volumes: Vec<Vec<f64>> = (0..layout.batch * c)
        .into_par_iter()
        .map(|task| {
            let (b, ch) = (task / c, task % c);
            let base = b * half_len * 2 * c;
            let half: Vec<Complex64> = (0..half_len)
                .map(|v| Complex64::new(data[base + v * 2 * c + ch], data[base + v * 2 * c + c + ch]))
                .collect();
            irfft_volume(half, &layout.dims, &plans)
        })
        .collect();
    let mut out = vec![0.0; layout.batch * vol_len * c];
    for (task, vol) in volumes.iter().enumerate() {
        let (b, ch) = (task / c, task % c);
        let base = b * vol_len * c;
        for (v, x) in vol.iter().enumerate() {
            out[base + v * c + ch] = x * scale;
        }
    }
    out
}

/// Per-bin weight of the last axis in the inverse transform: 1 for the
/// self-conjugate columns (DC, and Nyquist when `w` is even), 2 otherwise.
fn column_multiplicity(w: usize, col: usize) -> f64 {
    if col == 0 || (w.is_multiple_of(2) && col == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// Multiplies each bin of a stacked spectrum by `f(column_multiplicity)`.
fn weight_columns(data: &mut [f64], layout: &Layout, f: impl Fn(f64) -> f64) {
    let w = *layout.dims.last().unwrap();
    let wh = w / 2 + 1;
    let c2 = 2 * layout.channels;
    for (i, chunk) in data.chunks_exact_mut(c2).enumerate() {
        let s = f(column_multiplicity(w, i % wh));
        if s != 1.0 {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn out_shape(shape: &[usize], k: usize, last: usize, channels: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = last;
    s[r - 1] = channels;
    debug_assert!(r > k);
    s
}

/// Differentiable real FFT over the `k` spatial axes before the channel axis,
/// returning the stacked `[re, im]` half spectrum.
pub fn rfftn_stacked(x: &Tensor, k: usize) -> Result<Tensor> {
    let layout = Layout::of(x.shape(), k, "rfft")?;
    let w = *layout.dims.last().unwrap();
    let data = rfft_stacked_raw(x.data(), &layout);
    let shape = out_shape(x.shape(), k, w / 2 + 1, 2 * layout.channels);
    Tensor::from_op(
        "rfft",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |g, _| {
            // Adjoint: x_n gets Re(sum_k G_k e^{+i theta}) over the half
            // spectrum, which is N * irfft of G with the doubled columns halved.
            let mut g = g.to_vec();
            weight_columns(&mut g, &layout, |m| 1.0 / m);
            vec![Some(irfft_stacked_raw(&g, &layout, 1.0))]
        }),
    )
}

/// Differentiable inverse of [`rfftn_stacked`]; `original_w` is the length of
/// the last spatial axis of the result.
pub fn irfftn_stacked(z: &Tensor, k: usize, original_w: usize) -> Result<Tensor> {
    let zl = Layout::of(z.shape(), k, "irfft")?;
    if zl.channels % 2 != 0 {
        return Err(Error::invalid("irfft", "stacked channel count must be even"));
    }
    let wh = *zl.dims.last().unwrap();
    if original_w == 0 || wh != original_w / 2 + 1 {
        return Err(Error::invalid(
            "irfft",
            format!("half width {wh} inconsistent with original width {original_w}"),
        ));
    }
    let mut dims = zl.dims.clone();
    *dims.last_mut().unwrap() = original_w;
    let layout = Layout {
        batch: zl.batch,
        dims,
        channels: zl.channels / 2,
    };
    let n_vol = numel(&layout.dims) as f64;
    let data = irfft_stacked_raw(z.data(), &layout, 1.0 / n_vol);
    let shape = out_shape(z.shape(), k, original_w, layout.channels);
    Tensor::from_op(
        "irfft",
        shape,
        data,
        vec![z.clone()],
        Box::new(move |g, _| {
            let mut gz = rfft_stacked_raw(g, &layout);
            weight_columns(&mut gz, &layout, |m| m / n_vol);
            vec![Some(gz)]
        }),
    )
}

pub fn rfft3_stacked(x: &Tensor) -> Result<Tensor> {
    rfftn_stacked(x, 3)
}

pub fn irfft3_stacked(z: &Tensor, original_w: usize) -> Result<Tensor> {
    irfftn_stacked(z, 3, original_w)
}

pub fn rfft2_stacked(x: &Tensor) -> Result<Tensor> {
    rfftn_stacked(x, 2)
}

pub fn irfft2_stacked(z: &Tensor, original_w: usize) -> Result<Tensor> {
    irfftn_stacked(z, 2, original_w)
}

/// Real 3D FFT over `(D, H, W)` of a `(.., D, H, W, C)` tensor.
pub fn rfft3(x: &Tensor) -> Result<ComplexSpectrum> {
    let stacked = rfft3_stacked(x)?;
    let c = x.shape()[x.rank() - 1];
    let mut parts = stacked.split(stacked.rank() - 1, &[c, c])?;
    let im = parts.pop().unwrap();
    let re = parts.pop().unwrap();
    ComplexSpectrum::new(re, im, x.shape()[x.rank() - 2])
}

/// Inverse of [`rfft3`].
pub fn irfft3(z: &ComplexSpectrum) -> Result<Tensor> {
    let stacked = Tensor::concat(&[z.re.clone(), z.im.clone()], z.re.rank() - 1)?;
    irfft3_stacked(&stacked, z.original_w)
}

/// Largest number of voxels accepted by [`dft3_reference`].
pub const DFT_REFERENCE_MAX_VOXELS: usize = 4096;

/// Full complex spectrum of a `(D, H, W, C)` volume from the direct sum.
#[derive(Debug, Clone)]
pub struct FullSpectrum {
    pub dims: [usize; 3],
    pub channels: usize,
    /// Indexed `((d*H + h)*W + w)*C + c`.
    pub bins: Vec<Complex64>,
}

impl FullSpectrum {
    pub fn at(&self, d: usize, h: usize, w: usize, c: usize) -> Complex64 {
        let [_, hh, ww] = self.dims;
        self.bins[((d * hh + h) * ww + w) * self.channels + c]
    }

    /// The `floor(W/2)+1` half spectrum in the stacked layout of
    /// [`rfft3_stacked`].
    pub fn half_stacked(&self) -> Vec<f64> {
        let [dd, hh, ww] = self.dims;
        let wh = ww / 2 + 1;
        let c = self.channels;
        let mut out = vec![0.0; dd * hh * wh * 2 * c];
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..wh {
                    for ch in 0..c {
                        let z = self.at(d, h, w, ch);
                        let base = ((d * hh + h) * wh + w) * 2 * c;
                        out[base + ch] = z.re;
                        out[base + c + ch] = z.im;
                    }
                }
            }
        }
        out
    }
}

/// Direct `O(N^2)` evaluation of the 3D DFT; the test oracle for [`rfft3`].
pub fn dft3_reference(x: &Tensor) -> Result<FullSpectrum> {
    if x.rank() != 4 {
        return Err(Error::invalid("dft3_reference", "expected (D, H, W, C)"));
    }
    let (dd, hh, ww, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if dd * hh * ww > DFT_REFERENCE_MAX_VOXELS {
        return Err(Error::invalid(
            "dft3_reference",
            format!("{} voxels exceeds the cap of {DFT_REFERENCE_MAX_VOXELS}", dd * hh * ww),
        ));
    }
    let tau = 2.0 * std::f64::consts::PI;
    let mut bins = vec![Complex64::new(0.0, 0.0); dd * hh * ww * c];
    for kd in 0..dd {
        for kh in 0..hh {
            for kw in 0..ww {
                for nd in 0..dd {
                    for nh in 0..hh {
                        for nw in 0..ww {
                            let phase = ((kd * nd) % dd) as f64 / dd as f64
                                + ((kh * nh) % hh) as f64 / hh as f64
                                + ((kw * nw) % ww) as f64 / ww as f64;
                            let e = Complex64::from_polar(1.0, -tau * phase);
                            let src = ((nd * hh + nh) * ww + nw) * c;
                            let dst = ((kd * hh + kh) * ww + kw) * c;
                            for ch in 0..c {
                                bins[dst + ch] += e * x.data()[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(FullSpectrum {
        dims: [dd, hh, ww],
        channels: c,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_volume_has_only_dc() {
        let x = Tensor::full(&[2, 2, 2, 1], 1.5);
        let z = rfft3(&x).unwrap();
        assert_eq!(z.re.shape(), &[2, 2, 2, 1]);
        assert!((z.re.data()[0] - 12.0).abs() < 1e-12);
        assert!(z.re.data()[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(z.im.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut data = vec![0.0; 3 * 4 * 5];
        data[0] = 1.0;
        let z = rfft3(&Tensor::new(&[3, 4, 5, 1], data).unwrap()).unwrap();
        assert!(z.re.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(z.im.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let mut re = vec![0.0; 2 * 2 * 2];
        re[0] = 8.0 * 0.75;
        let z = ComplexSpectrum::new(
            Tensor::new(&[2, 2, 2, 1], re).unwrap(),
            Tensor::zeros(&[2, 2, 2, 1]),
            2,
        )
        .unwrap();
        let x = irfft3(&z).unwrap();
        assert!(x.data().iter().all(|v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn inconsistent_width_is_rejected() {
        assert!(ComplexSpectrum::new(Tensor::zeros(&[2, 2, 3, 1]), Tensor::zeros(&[2, 2, 3, 1]), 6).is_err());
        assert!(irfft3_stacked(&Tensor::zeros(&[2, 2, 3, 2]), 6).is_err());
        assert!(irfft3_stacked(&Tensor::zeros(&[2, 2, 3, 2]), 5).is_ok());
    }

    #[test]
    fn matches_reference_on_small_random_volume() {
        let x = random(&[3, 4, 5, 2], 11);
        let z = rfft3_stacked(&x).unwrap();
        let reference = dft3_reference(&x).unwrap().half_stacked();
        assert!(max_abs_diff(z.data(), &reference) < 1e-9);
    }

    #[test]
    fn inverse_of_reference_spectrum() {
        let x = random(&[3, 4, 6, 1], 12);
        let half = dft3_reference(&x).unwrap().half_stacked();
        let z = Tensor::new(&[3, 4, 4, 2], half).unwrap();
        let back = irfft3_stacked(&z, 6).unwrap();
        assert!(max_abs_diff(back.data(), x.data()) < 1e-9);
    }

    #[test]
    fn single_cosine_energy() {
        // cos(2*pi*w/8) along W: amplitude W/2 = 4 at bins 1 and 7.
        let data: Vec<f64> = (0..8).map(|w| (2.0 * std::f64::consts::PI * w as f64 / 8.0).cos()).collect();
        let full = dft3_reference(&Tensor::new(&[1, 1, 8, 1], data).unwrap()).unwrap();
        for w in 0..8 {
            let want = if w == 1 || w == 7 { 4.0 } else { 0.0 };
            assert!((full.at(0, 0, w, 0).norm() - want).abs() < 1e-12, "bin {w}");
        }
    }

    #[test]
    fn reference_is_linear() {
        let x = random(&[2, 3, 4, 1], 13);
        let y = random(&[2, 3, 4, 1], 14);
        let combo = x.scale(0.3).unwrap().add(&y.scale(-1.7).unwrap()).unwrap();
        let (fx, fy, fc) = (
            dft3_reference(&x).unwrap(),
            dft3_reference(&y).unwrap(),
            dft3_reference(&combo).unwrap(),
        );
        for i in 0..fc.bins.len() {
            let want = fx.bins[i] * 0.3 + fy.bins[i] * -1.7;
            assert!((fc.bins[i] - want).norm() < 1e-9);
        }
    }

    #[test]
    fn reference_size_cap() {
        assert!(dft3_reference(&Tensor::zeros(&[16, 16, 17, 1])).is_err());
    }

    #[test]
    fn depth_one_equals_2d_transform() {
        let x = random(&[2, 1, 6, 7, 3], 15);
        let three = rfft3_stacked(&x).unwrap();
        let two = rfft2_stacked(&x.reshape(&[2, 6, 7, 3]).unwrap()).unwrap();
        assert_eq!(three.data(), two.data());
        let back3 = irfft3_stacked(&three, 7).unwrap();
        let back2 = irfft2_stacked(&two, 7).unwrap();
        assert_eq!(back3.data(), back2.data());
    }

    #[test]
    fn batch_axes_are_independent() {
        let x = random(&[3, 2, 3, 4, 2], 16);
        let z = rfft3_stacked(&x).unwrap();
        for b in 0..3 {
            let xb = x.narrow(0, b, 1).unwrap().reshape(&[2, 3, 4, 2]).unwrap();
            let zb = rfft3_stacked(&xb).unwrap();
            let n = zb.numel();
            assert_eq!(&z.data()[b * n..(b + 1) * n], zb.data());
        }
    }

    #[test]
    fn spectral_pipeline_gradients() {
        let x = random(&[3, 4, 5, 2], 17);
        let w = random(&[3, 4, 3, 4], 18);
        let err = grad_check(
            |t| {
                let z = rfft3_stacked(t)?.mul(&w)?;
                irfft3_stacked(&z, 5)?.square()?.sum_all()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        let x = random(&[2, 3, 4, 6, 1], 19);
        let w = random(&[2, 3, 4, 4, 2], 20);
        let err = grad_check(|t| irfft3_stacked(&rfft3_stacked(t)?.mul(&w)?, 6)?.sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn inverse_gradient_directly() {
        let z = random(&[2, 3, 3, 2], 21);
        let w = random(&[2, 3, 4, 1], 22);
        let err = grad_check(|t| irfft3_stacked(t, 4)?.mul(&w)?.sum_all(), &z, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
        let z = random(&[3, 2, 3, 2], 23);
        let w = random(&[3, 2, 5, 1], 24);
        let err = grad_check(|t| irfft2_stacked(t, 5)?.mul(&w)?.sum_all(), &z, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    /// `sum |Z|^2` over the full spectrum, rebuilt from the half spectrum
    /// with `Z[k] = conj(Z[-k])`.
    fn full_spectrum_energy(half: &Tensor, [d, h, w]: [usize; 3], c: usize) -> f64 {
        let wh = w / 2 + 1;
        let mut energy = 0.0;
        for kd in 0..d {
            for kh in 0..h {
                for kw in 0..w {
                    let (sd, sh, sw) = if kw < wh { (kd, kh, kw) } else { ((d - kd) % d, (h - kh) % h, w - kw) };
                    let base = ((sd * h + sh) * wh + sw) * 2 * c;
                    energy += half.data()[base..base + 2 * c].iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
        energy
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_oracle_and_parseval(
            d in 1usize..7,
            h in 1usize..7,
            w in 1usize..7,
            c in 1usize..3,
            seed in any::<u64>(),
        ) {
            let x = random(&[d, h, w, c], seed);
            let back = irfft3(&rfft3(&x).unwrap()).unwrap();
            prop_assert!(max_abs_diff(back.data(), x.data()) < 1e-10);

            let half = rfft3_stacked(&x).unwrap();
            let oracle = dft3_reference(&x).unwrap().half_stacked();
            prop_assert!(max_abs_diff(half.data(), &oracle) < 1e-9);

            let space: f64 = x.data().iter().map(|v| v * v).sum();
            let freq = full_spectrum_energy(&half, [d, h, w], c) / (d * h * w) as f64;
            prop_assert!((space - freq).abs() <= 1e-9 * space, "{} vs {}", space, freq);
        }
    }
}
