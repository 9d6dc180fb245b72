//! Lattice cells, random subvolume crops, D4 augmentation and the 4x mask
//! downscaling used as the training target.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::io::{FragmentVolume, InkMask};
use crate::error::{Error, Result};
use crate::nnops::draw_dropped_channels;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeCell {
    pub fragment: usize,
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

/// Cell origins along one spatial axis: every `stride` while the cell fits,
/// plus one cell flush with the far border if the regular grid misses it.
fn axis_origins(len: usize, cell: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p + cell <= len).collect();
    if out.last().is_none_or(|&p| p + cell < len) {
        out.push(len - cell);
    }
    out
}

/// Cells tile depth without overlap and slide spatially by `stride`.
pub fn build_lattice(dims: [usize; 3], cell: [usize; 3], stride: usize, fragment: usize) -> Result<Vec<LatticeCell>> {
    if cell.contains(&0) || stride == 0 {
        return Err(Error::invalid("lattice", "cell size and stride must be positive"));
    }
    if (0..3).any(|a| cell[a] > dims[a]) {
        return Err(Error::invalid("lattice", format!("cell {cell:?} larger than volume {dims:?}")));
    }
    let zs: Vec<usize> = (0..dims[0] / cell[0]).map(|i| i * cell[0]).collect();
    let ys = axis_origins(dims[1], cell[1], stride);
    let xs = axis_origins(dims[2], cell[2], stride);
    let mut out = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push(LatticeCell {
                    fragment,
                    origin: [z, y, x],
                    size: cell,
                });
            }
        }
    }
    Ok(out)
}

/// The eight symmetries of the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum D4 {
    Identity,
    R90,
    R180,
    R270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl D4 {
    pub const ALL: [D4; 8] = [
        D4::Identity,
        D4::R90,
        D4::R180,
        D4::R270,
        D4::FlipH,
        D4::FlipV,
        D4::Transpose,
        D4::AntiTranspose,
    ];

    /// Whether the element swaps the two spatial axes.
    pub fn swaps_axes(self) -> bool {
        matches!(self, D4::R90 | D4::R270 | D4::Transpose | D4::AntiTranspose)
    }

    /// Source pixel of output `(i, j)` for an `h x w` input (output is
    /// `w x h` when the axes swap). Rotations are counter-clockwise.
    fn source(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            D4::Identity => (i, j),
            D4::R90 => (j, w - 1 - i),
            D4::R180 => (h - 1 - i, w - 1 - j),
            D4::R270 => (h - 1 - j, i),
            D4::FlipH => (i, w - 1 - j),
            D4::FlipV => (h - 1 - i, j),
            D4::Transpose => (j, i),
            D4::AntiTranspose => (h - 1 - j, w - 1 - i),
        }
    }

    /// Applies the transform to `planes` stacked `h x w` planes.
    pub fn apply<T: Copy>(self, data: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        if h * w == 0 || !data.len().is_multiple_of(h * w) {
            return Err(Error::invalid("d4", format!("{} values are not whole {h}x{w} planes", data.len())));
        }
        if self.swaps_axes() && h != w {
            return Err(Error::invalid("d4", format!("{self} needs square planes, got {h}x{w}")));
        }
        let (oh, ow) = if self.swaps_axes() { (w, h) } else { (h, w) };
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks_exact(h * w) {
            for i in 0..oh {
                for j in 0..ow {
                    let (si, sj) = self.source(i, j, h, w);
                    out.push(plane[si * w + sj]);
                }
            }
        }
        Ok(out)
    }

    /// `other` applied after `self`, as a single element.
    pub fn then(self, other: D4) -> D4 {
        let probe: Vec<usize> = (0..9).collect();
        let both = other.apply(&self.apply(&probe, 3, 3).unwrap(), 3, 3).unwrap();
        *D4::ALL
            .iter()
            .find(|g| g.apply(&probe, 3, 3).unwrap() == both)
            .expect("D4 is closed under composition")
    }

    pub fn inverse(self) -> D4 {
        *D4::ALL.iter().find(|g| self.then(**g) == D4::Identity).unwrap()
    }
}

impl fmt::Display for D4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            D4::Identity => "e",
            D4::R90 => "r90",
            D4::R180 => "r180",
            D4::R270 => "r270",
            D4::FlipH => "flipH",
            D4::FlipV => "flipV",
            D4::Transpose => "transpose",
            D4::AntiTranspose => "anti-transpose",
        })
    }
}

impl FromStr for D4 {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        D4::ALL
            .iter()
            .copied()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| format!("unknown D4 element `{s}`"))
    }
}

/// Mean over each 4x4 block of a binary mask tile.
pub fn mask_downscale4(mask: &[u8], h: usize, w: usize) -> Result<Vec<f64>> {
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) || mask.len() != h * w {
        return Err(Error::invalid("mask_downscale4", format!("{h}x{w} tile is not divisible by 4")));
    }
    let (oh, ow) = (h / 4, w / 4);
    let mut out = vec![0.0; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / 4) * ow + x / 4] += mask[y * w + x] as f64;
        }
    }
    out.iter_mut().for_each(|v| *v /= 16.0);
    Ok(out)
}

/// One training unit: a `(d, h, w)` crop, its aligned mask, the 4x
/// downscaled soft target and how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentSample {
    pub fragment: usize,
    pub origin: [usize; 3],
    pub size: [usize; 3],
    pub volume: Vec<f64>,
    pub mask: Vec<u8>,
    pub target: Vec<f64>,
    pub transform: D4,
    pub dropped_slices: Vec<usize>,
}

impl FragmentSample {
    pub fn provenance(&self) -> String {
        format!(
            "fragment {} origin {:?} transform {} dropped slices {:?}",
            self.fragment, self.origin, self.transform, self.dropped_slices
        )
    }
}

/// Crops `size` from `cell`: uniformly random origin, or the centred one
/// when `random_crop` is off.
pub fn sample_subvolume<R: Rng + ?Sized>(
    cell: &LatticeCell,
    volume: &FragmentVolume,
    mask: &InkMask,
    size: [usize; 3],
    random_crop: bool,
    rng: &mut R,
) -> Result<FragmentSample> {
    if (0..3).any(|a| size[a] > cell.size[a]) {
        return Err(Error::invalid("sample", format!("subvolume {size:?} larger than cell {:?}", cell.size)));
    }
    if (mask.height, mask.width) != (volume.height, volume.width) {
        return Err(Error::invalid("sample", "mask and volume sizes differ"));
    }
    let mut origin = [0; 3];
    for a in 0..3 {
        let slack = cell.size[a] - size[a];
        origin[a] = cell.origin[a] + if random_crop { rng.gen_range(0..=slack) } else { slack / 2 };
    }
    let vol = volume.crop(origin, size)?;
    let (h, w) = (size[1], size[2]);
    let mut m = Vec::with_capacity(h * w);
    for y in origin[1]..origin[1] + h {
        m.extend_from_slice(&mask.data[y * mask.width + origin[2]..y * mask.width + origin[2] + w]);
    }
    let target = mask_downscale4(&m, h, w)?;
    Ok(FragmentSample {
        fragment: cell.fragment,
        origin,
        size,
        volume: vol,
        mask: m,
        target,
        transform: D4::Identity,
        dropped_slices: Vec::new(),
    })
}

/// Applies `g` to every slice, the mask and the target.
pub fn d4_transform(sample: &FragmentSample, g: D4) -> Result<FragmentSample> {
    let [d, h, w] = sample.size;
    let volume = g.apply(&sample.volume, h, w)?;
    let mask = g.apply(&sample.mask, h, w)?;
    let target = g.apply(&sample.target, h / 4, w / 4)?;
    let (nh, nw) = if g.swaps_axes() { (w, h) } else { (h, w) };
    Ok(FragmentSample {
        size: [d, nh, nw],
        volume,
        mask,
        target,
        transform: sample.transform.then(g),
        ..sample.clone()
    })
}

/// Channel Dropout on the depth slices of a sample (slices play the role of
/// input channels): zeroes the drawn slices, no rescaling.
pub fn drop_slices<R: Rng + ?Sized>(sample: &mut FragmentSample, rate: f64, max_fraction: f64, rng: &mut R) {
    let [d, h, w] = sample.size;
    let dropped = draw_dropped_channels(d, rate, max_fraction, rng);
    for &z in &dropped {
        sample.volume[z * h * w..(z + 1) * h * w].fill(0.0);
    }
    sample.dropped_slices = dropped;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lattice_examples() {
        assert_eq!(build_lattice([32, 512, 512], [32, 512, 512], 64, 0).unwrap().len(), 1);
        let cells = build_lattice([32, 576, 576], [32, 512, 512], 64, 0).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[3].origin, [0, 64, 64]);
        assert!(build_lattice([24, 512, 512], [32, 512, 512], 64, 0).is_err());
        // A non-multiple extent gets a border-flush final cell.
        let cells = build_lattice([65, 600, 512], [32, 512, 512], 64, 2).unwrap();
        let ys: Vec<usize> = cells.iter().filter(|c| c.origin[0] == 0).map(|c| c.origin[1]).collect();
        assert_eq!(ys, vec![0, 64, 88]);
        assert_eq!(cells.iter().filter(|c| c.origin[1] == 0).count(), 2);
        assert!(cells.iter().all(|c| c.fragment == 2 && c.origin[1] + 512 <= 600));
    }

    fn ramp_volume(d: usize, h: usize, w: usize) -> (FragmentVolume, InkMask) {
        let vox = (0..d * h * w).map(|i| i as f64).collect();
        let mask = (0..h * w).map(|i| ((i / w + i % w) % 2) as u8).collect();
        (FragmentVolume::new(d, h, w, vox).unwrap(), InkMask::new(h, w, mask).unwrap())
    }

    #[test]
    fn crop_without_slack_sits_at_cell_origin() {
        let (v, m) = ramp_volume(4, 16, 16);
        let cell = LatticeCell {
            fragment: 0,
            origin: [0, 4, 8],
            size: [2, 8, 8],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_subvolume(&cell, &v, &m, [2, 8, 8], true, &mut rng).unwrap();
        assert_eq!(s.origin, [0, 4, 8]);
        assert_eq!(s.volume[0], (4 * 16 + 8) as f64);
        let centered = LatticeCell { size: [4, 12, 8], ..cell };
        let s = sample_subvolume(&centered, &v, &m, [2, 8, 8], false, &mut rng).unwrap();
        assert_eq!(s.origin, [1, 6, 8]);
    }

    #[test]
    fn crop_origins_are_uniform() {
        let (v, m) = ramp_volume(23, 27, 27);
        let cell = LatticeCell {
            fragment: 0,
            origin: [0, 0, 0],
            size: [23, 27, 27],
        };
        // 16 possible origins per axis.
        let size = [8, 12, 12];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [[0usize; 16]; 3];
        let n = 10_000;
        for _ in 0..n {
            let s = sample_subvolume(&cell, &v, &m, size, true, &mut rng).unwrap();
            for a in 0..3 {
                counts[a][s.origin[a]] += 1;
            }
        }
        // Chi-square with 15 degrees of freedom; 30.58 is the p = 0.01 point.
        for axis in counts {
            let e = n as f64 / 16.0;
            let chi2: f64 = axis.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
            assert!(chi2 < 30.58, "{chi2}");
        }
    }

    #[test]
    fn d4_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plane: Vec<u8> = (0..36).map(|_| rng.gen_range(0..2)).collect();
        let id = D4::Identity.apply(&plane, 6, 6).unwrap();
        assert_eq!(id, plane);
        let mut r = plane.clone();
        for _ in 0..4 {
            r = D4::R90.apply(&r, 6, 6).unwrap();
        }
        assert_eq!(r, plane);
        let f = D4::FlipH.apply(&D4::FlipH.apply(&plane, 6, 6).unwrap(), 6, 6).unwrap();
        assert_eq!(f, plane);
        for a in D4::ALL {
            assert_eq!(a.then(a.inverse()), D4::Identity);
            for b in D4::ALL {
                let direct = b.apply(&a.apply(&plane, 6, 6).unwrap(), 6, 6).unwrap();
                assert_eq!(a.then(b).apply(&plane, 6, 6).unwrap(), direct);
            }
        }
        assert!(D4::ALL.contains(&D4::FlipH.then(D4::R90)));
    }

    #[test]
    fn d4_images_of_a_generic_patch_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plane: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let images: Vec<Vec<f64>> = D4::ALL.iter().map(|g| g.apply(&plane, 8, 8).unwrap()).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(images[i], images[j]);
            }
        }
        assert!(D4::R90.apply(&plane, 4, 16).is_err());
        assert!(D4::FlipV.apply(&plane, 4, 16).is_ok());
    }

    #[test]
    fn d4_sample_keeps_alignment() {
        let (v, m) = ramp_volume(3, 16, 16);
        let cell = LatticeCell {
            fragment: 0,
            origin: [0, 0, 0],
            size: [3, 16, 16],
        };
        let s = sample_subvolume(&cell, &v, &m, [3, 16, 16], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for g in D4::ALL {
            let t = d4_transform(&s, g).unwrap();
            assert_eq!(t.target, mask_downscale4(&t.mask, 16, 16).unwrap());
            assert_eq!(t.volume[16 * 16..32 * 16].to_vec(), g.apply(&s.volume[256..512], 16, 16).unwrap()[..256]);
            assert_eq!(t.transform, g);
        }
    }

    #[test]
    fn downscale_examples() {
        assert_eq!(mask_downscale4(&[1; 64], 8, 8).unwrap(), vec![1.0; 4]);
        let mut one = vec![0u8; 64];
        one[9] = 1;
        assert_eq!(mask_downscale4(&one, 8, 8).unwrap(), vec![1.0 / 16.0, 0.0, 0.0, 0.0]);
        let checker: Vec<u8> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as u8).collect();
        assert_eq!(mask_downscale4(&checker, 8, 8).unwrap(), vec![0.5; 4]);
        assert!(mask_downscale4(&[0; 36], 6, 6).is_err());
    }

    #[test]
    fn uniform_blocks_upsample_back_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Blocky mask with some mixed blocks.
        let mut m = vec![0u8; 32 * 32];
        for by in 0..8 {
            for bx in 0..8 {
                let kind = rng.gen_range(0..3);
                for y in 0..4 {
                    for x in 0..4 {
                        m[(by * 4 + y) * 32 + bx * 4 + x] = match kind {
                            0 => 0,
                            1 => 1,
                            _ => rng.gen_range(0..2),
                        };
                    }
                }
            }
        }
        let t = mask_downscale4(&m, 32, 32).unwrap();
        for by in 0..8 {
            for bx in 0..8 {
                let block: Vec<u8> = (0..16).map(|k| m[(by * 4 + k / 4) * 32 + bx * 4 + k % 4]).collect();
                if block.iter().all(|&v| v == block[0]) {
                    assert_eq!(t[by * 8 + bx], block[0] as f64);
                }
            }
        }
    }

    #[test]
    fn slice_dropout_zeroes_whole_slices() {
        let (v, m) = ramp_volume(16, 8, 8);
        let cell = LatticeCell {
            fragment: 0,
            origin: [0, 0, 0],
            size: [16, 8, 8],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = sample_subvolume(&cell, &v, &m, [16, 8, 8], false, &mut rng).unwrap();
        drop_slices(&mut s, 0.99, 0.5, &mut rng);
        assert!(!s.dropped_slices.is_empty() && s.dropped_slices.len() <= 8);
        for z in 0..16 {
            let zeroed = s.volume[z * 64..(z + 1) * 64].iter().all(|&x| x == 0.0);
            assert_eq!(zeroed, s.dropped_slices.contains(&z) || z == 0 && s.volume[1] == 0.0);
        }
    }

    proptest! {
        #[test]
        fn d4_inverse_and_composition_on_stacked_planes(
            h in 1usize..7,
            w in 1usize..7,
            planes in 1usize..3,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..planes * h * w).map(|_| rng.gen_range(0..2)).collect();
            let fits = |g: D4| h == w || !g.swaps_axes();
            for a in D4::ALL {
                if !fits(a) {
                    prop_assert!(a.apply(&data, h, w).is_err());
                    continue;
                }
                let moved = a.apply(&data, h, w).unwrap();
                prop_assert_eq!(&a.inverse().apply(&moved, h, w).unwrap(), &data);
                for b in D4::ALL.into_iter().filter(|&b| fits(b)) {
                    let twice = b.apply(&moved, h, w).unwrap();
                    prop_assert_eq!(&a.then(b).apply(&data, h, w).unwrap(), &twice);
                }
            }
        }
    }
}
