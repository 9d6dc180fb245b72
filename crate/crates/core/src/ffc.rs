//! Fast Fourier Convolution blocks in three flavours: the spatial (2D) FFC,
//! the spatio-temporal FFC that folds depth into channels for its spectral
//! path, and the volumetric FFC with a full 3D spectral path.
//!
//! A block splits its channels into a local part `x_l` and a global part
//! `x_g` and computes
//!
//! ```text
//! y_l = relu(bn_l(l2l(x_l) + g2l(x_g)))
//! y_g = relu(bn_g(l2g(x_l) + st(x_g)))
//! ```
//!
//! where `l2l`, `g2l`, `l2g` are k=3 convolutions and `st` is the spectral
//! transform. The half spectrum keeps `floor(W/2)+1` columns on the last
//! axis, so the DC and Nyquist columns are both present.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nnops;
use crate::params::{BatchNorm, Conv, Ctx, ParamStore};
use crate::spectral::{irfft2_stacked, irfft3_stacked, rfft2_stacked, rfft3_stacked};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// 2D FFC on `(N, H, W, C)`.
    Spatial,
    /// 3D branch convolutions; spectral path is a 2D FFT over `(H, W)` of
    /// the depth-folded features. Parameters depend on `depth`.
    SpatioTemporal { depth: usize },
    /// 3D branch convolutions and a 3D spectral path.
    Volumetric,
}

impl Variant {
    fn conv_rank(self) -> usize {
        match self {
            Variant::Spatial => 2,
            _ => 3,
        }
    }
}

/// rfft -> pointwise conv on stacked `[re, im]` channels -> BN -> ReLU -> irfft.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTransform {
    pub channels: usize,
    pub variant: Variant,
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl SpectralTransform {
    pub fn new(name: &str, channels: usize, variant: Variant) -> SpectralTransform {
        let spectral_c = match variant {
            Variant::SpatioTemporal { depth } => 2 * depth * channels,
            _ => 2 * channels,
        };
        let conv = match variant {
            Variant::Volumetric => Conv::same3(format!("{name}.conv"), spectral_c, spectral_c, 1),
            _ => Conv::same2(format!("{name}.conv"), spectral_c, spectral_c, 1),
        };
        SpectralTransform {
            channels,
            variant,
            conv,
            bn: BatchNorm::new(format!("{name}.bn"), spectral_c),
        }
    }

    pub fn declare(&self, store: &mut ParamStore) -> Result<()> {
        self.conv.declare(store)?;
        self.bn.declare(store)
    }

    fn frequency_mix(&self, ctx: &mut Ctx, z: &Tensor) -> Result<Tensor> {
        let z = self.conv.forward(ctx, z)?;
        let z = self.bn.forward(ctx, &z)?;
        ctx.relu(&z)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "spectral_transform",
                expected: vec![self.channels],
                found: vec![c],
            });
        }
        match self.variant {
            Variant::Volumetric => {
                let w = x.shape()[3];
                let z = self.frequency_mix(ctx, &rfft3_stacked(x)?)?;
                irfft3_stacked(&z, w)
            }
            Variant::Spatial => {
                let w = x.shape()[2];
                let z = self.frequency_mix(ctx, &rfft2_stacked(x)?)?;
                irfft2_stacked(&z, w)
            }
            Variant::SpatioTemporal { depth } => {
                let s = x.shape().to_vec();
                if s[1] != depth {
                    return Err(Error::invalid(
                        "spectral_transform",
                        format!("stFFC built for depth {depth}, input has depth {}", s[1]),
                    ));
                }
                let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
                let folded = x.permute(&[0, 2, 3, 1, 4])?.reshape(&[n, h, w, d * c])?;
                let z = self.frequency_mix(ctx, &rfft2_stacked(&folded)?)?;
                irfft2_stacked(&z, w)?
                    .reshape(&[n, h, w, d, c])?
                    .permute(&[0, 3, 1, 2, 4])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfcBlock {
    pub c_local: usize,
    pub c_global: usize,
    pub variant: Variant,
    pub l2l: Conv,
    pub g2l: Conv,
    pub l2g: Conv,
    pub st: SpectralTransform,
    pub bn_local: BatchNorm,
    pub bn_global: BatchNorm,
}

impl FfcBlock {
    pub fn new(name: &str, c_local: usize, c_global: usize, variant: Variant) -> Result<FfcBlock> {
        if c_local == 0 || c_global == 0 {
            return Err(Error::invalid("ffc", "both branches need at least one channel"));
        }
        let conv = |suffix: &str, i: usize, o: usize| {
            if variant.conv_rank() == 3 {
                Conv::same3(format!("{name}.{suffix}"), i, o, 3)
            } else {
                Conv::same2(format!("{name}.{suffix}"), i, o, 3)
            }
        };
        Ok(FfcBlock {
            c_local,
            c_global,
            variant,
            l2l: conv("l2l", c_local, c_local),
            g2l: conv("g2l", c_global, c_local),
            l2g: conv("l2g", c_local, c_global),
            st: SpectralTransform::new(&format!("{name}.st"), c_global, variant),
            bn_local: BatchNorm::new(format!("{name}.bn_l"), c_local),
            bn_global: BatchNorm::new(format!("{name}.bn_g"), c_global),
        })
    }

    /// Block on `channels` total channels with a `ratio_global` share going
    /// to the global branch (rounded, and kept at least one per branch).
    pub fn with_ratio(name: &str, channels: usize, ratio_global: f64, variant: Variant) -> Result<FfcBlock> {
        let c_global = ((channels as f64 * ratio_global).round() as usize).clamp(1, channels.saturating_sub(1).max(1));
        FfcBlock::new(name, channels.saturating_sub(c_global), c_global, variant)
    }

    pub fn channels(&self) -> usize {
        self.c_local + self.c_global
    }

    pub fn declare(&self, store: &mut ParamStore) -> Result<()> {
        for conv in [&self.l2l, &self.g2l, &self.l2g] {
            conv.declare(store)?;
        }
        self.st.declare(store)?;
        self.bn_local.declare(store)?;
        self.bn_global.declare(store)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let want_rank = self.variant.conv_rank() + 2;
        if x.rank() != want_rank {
            return Err(Error::invalid("ffc", format!("expected rank {want_rank} input, got {:?}", x.shape())));
        }
        let axis = x.rank() - 1;
        if x.shape()[axis] != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "ffc",
                expected: vec![self.c_local, self.c_global],
                found: vec![x.shape()[axis]],
            });
        }
        let parts = x.split(axis, &[self.c_local, self.c_global])?;
        let (xl, xg) = (&parts[0], &parts[1]);
        let yl = self.l2l.forward(ctx, xl)?.add(&self.g2l.forward(ctx, xg)?)?;
        let yg = self.l2g.forward(ctx, xl)?.add(&self.st.forward(ctx, xg)?)?;
        let yl = self.bn_local.forward(ctx, &yl)?;
        let yl = ctx.relu(&yl)?;
        let yg = self.bn_global.forward(ctx, &yg)?;
        let yg = ctx.relu(&yg)?;
        Tensor::concat(&[yl, yg], axis)
    }
}

/// `x + drop_path(second(first(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfcResidualBlock {
    pub first: FfcBlock,
    pub second: FfcBlock,
    pub drop_path: f64,
}

impl FfcResidualBlock {
    pub fn new(name: &str, channels: usize, ratio_global: f64, variant: Variant, drop_path: f64) -> Result<Self> {
        Ok(FfcResidualBlock {
            first: FfcBlock::with_ratio(&format!("{name}.ffc1"), channels, ratio_global, variant)?,
            second: FfcBlock::with_ratio(&format!("{name}.ffc2"), channels, ratio_global, variant)?,
            drop_path,
        })
    }

    pub fn declare(&self, store: &mut ParamStore) -> Result<()> {
        self.first.declare(store)?;
        self.second.declare(store)
    }

    /// Forward with an explicit DropPath keep mask (`None` draws one from
    /// the context in training mode).
    pub fn forward_with_keep(&self, ctx: &mut Ctx, x: &Tensor, keep: Option<&[bool]>) -> Result<Tensor> {
        let inner = self.first.forward(ctx, x)?;
        let branch = self.second.forward(ctx, &inner)?;
        let branch = match keep {
            Some(k) => nnops::drop_path_with_mask(&branch, k, self.drop_path)?,
            None => {
                let training = ctx.training();
                nnops::drop_path(&branch, self.drop_path, training, &mut ctx.rng)?
            }
        };
        x.add(&branch)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        self.forward_with_keep(ctx, x, None)
    }
}

/// Fills every parameter under `prefix` with uniform values in
/// `[-scale, scale]` (test and demo helper for "generic" parameters).
pub fn randomize_params<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, scale: f64, rng: &mut R) {
    for (name, p) in store.params.iter_mut() {
        if name.starts_with(prefix) {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        }
    }
}

/// Sets every parameter under `prefix` to zero.
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    for (name, p) in store.params.iter_mut() {
        if name.starts_with(prefix) {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Copies 2D FFC parameters into a 3D block of the same name layout,
/// placing each 2D kernel on the centre depth slice of the 3D kernel.
pub fn lift_spatial_params(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    for (name, p) in &src.params {
        let target = dst.get_mut(name)?;
        if target.shape == p.shape || target.value.len() == p.value.len() {
            target.value = p.value.clone();
            continue;
        }
        let (o, i, kh, kw) = match p.shape[..] {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::invalid("lift", format!("{name}: cannot lift shape {:?}", p.shape))),
        };
        if target.shape != [o, i, target.shape[2], kh, kw] || target.shape[2] % 2 == 0 {
            return Err(Error::invalid("lift", format!("{name}: incompatible target {:?}", target.shape)));
        }
        let kd = target.shape[2];
        let mut v = vec![0.0; target.value.len()];
        for oi in 0..o * i {
            let dst_base = (oi * kd + kd / 2) * kh * kw;
            v[dst_base..dst_base + kh * kw].copy_from_slice(&p.value[oi * kh * kw..(oi + 1) * kh * kw]);
        }
        target.value = v;
    }
    for (name, s) in &src.buffers {
        dst.buffers.insert(name.clone(), s.clone());
    }
    Ok(())
}

/// Largest absolute output difference between matched spatial, volumetric
/// and spatio-temporal blocks on a depth-1 input `(n, 1, h, w, c)` in eval
/// mode. The 3D blocks carry the spatial block's kernels on their centre
/// depth slice, so the result should be at rounding level.
pub fn depth_one_discrepancy(n: usize, h: usize, w: usize, channels: usize, seed: u64) -> Result<f64> {
    use crate::params::Mode;
    use rand::SeedableRng;
    let c_g = channels / 2;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spatial = FfcBlock::new("f", channels - c_g, c_g, Variant::Spatial)?;
    let mut s2 = ParamStore::new(seed);
    spatial.declare(&mut s2)?;
    randomize_params(&mut s2, "f", 0.5, &mut rng);
    let x2 = Tensor::new(&[n, h, w, channels], (0..n * h * w * channels).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let reference = spatial.forward(&mut Ctx::new(&mut s2, Mode::Eval, 0), &x2)?;
    let x3 = x2.reshape(&[n, 1, h, w, channels])?;
    let mut worst: f64 = 0.0;
    for variant in [Variant::Volumetric, Variant::SpatioTemporal { depth: 1 }] {
        let block = FfcBlock::new("f", channels - c_g, c_g, variant)?;
        let mut s3 = ParamStore::new(seed);
        block.declare(&mut s3)?;
        lift_spatial_params(&s2, &mut s3)?;
        let y = block.forward(&mut Ctx::new(&mut s3, Mode::Eval, 0), &x3)?;
        for (a, b) in reference.data().iter().zip(y.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}
