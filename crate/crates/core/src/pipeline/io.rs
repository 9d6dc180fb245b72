//! Slice-stack volumes and 2D maps stored as binary PGM files.
//!
//! A volume directory holds `slice_0000.pgm`, `slice_0001.pgm`, ... (P5,
//! maxval 65535, big-endian samples) and a `volume.meta` sidecar with
//! `slices`, `height`, `width` and `voxel_size_um`. Masks and predicted maps
//! are single P5 files with maxval 255.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv;

/// Intensities in `[0, 1]`, indexed `(z * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f64>,
    pub voxel_size_um: f64,
}

impl FragmentVolume {
    pub fn new(depth: usize, height: usize, width: usize, voxels: Vec<f64>) -> Result<FragmentVolume> {
        if voxels.len() != depth * height * width || depth * height * width == 0 {
            return Err(Error::invalid("volume", format!("{} voxels for {depth}x{height}x{width}", voxels.len())));
        }
        Ok(FragmentVolume {
            depth,
            height,
            width,
            voxels,
            voxel_size_um: 1.0,
        })
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Copies the box starting at `(z, y, x)` with extent `(d, h, w)`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Vec<f64>> {
        let dims = [self.depth, self.height, self.width];
        for a in 0..3 {
            if origin[a] + size[a] > dims[a] {
                return Err(Error::invalid("crop", format!("box {origin:?}+{size:?} exceeds volume {dims:?}")));
            }
        }
        let [d, h, w] = size;
        let mut out = Vec::with_capacity(d * h * w);
        for z in origin[0]..origin[0] + d {
            for y in origin[1]..origin[1] + h {
                let row = (z * self.height + y) * self.width + origin[2];
                out.extend_from_slice(&self.voxels[row..row + w]);
            }
        }
        Ok(out)
    }

    /// Slices `start..start + count`.
    pub fn depth_window(&self, start: usize, count: usize) -> Result<FragmentVolume> {
        if count == 0 || start + count > self.depth {
            return Err(Error::invalid(
                "depth window",
                format!("slices {start}..{} outside volume of depth {}", start + count, self.depth),
            ));
        }
        let n = self.height * self.width;
        Ok(FragmentVolume {
            depth: count,
            voxels: self.voxels[start * n..(start + count) * n].to_vec(),
            ..self.clone()
        })
    }
}

/// Binary ground-truth map with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InkMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl InkMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<InkMask> {
        if data.len() != height * width {
            return Err(Error::invalid("mask", format!("{} pixels for {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask", "values must be 0 or 1"));
        }
        Ok(InkMask { height, width, data })
    }

    pub fn prevalence(&self) -> f64 {
        self.data.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.data.len().max(1) as f64
    }
}

/// Raw PGM contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn encode_pgm(width: usize, height: usize, maxval: u16, samples: &[u16]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval > 255 {
        for s in samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(samples.iter().map(|&s| s as u8));
    }
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed PGM header"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid PGM dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bps;
    if bytes.len() < pos + need {
        return Err(bad("truncated PGM data"));
    }
    let raw = &bytes[pos..pos + need];
    let samples: Vec<u16> = if bps == 2 {
        raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raw.iter().map(|&b| b as u16).collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_pgm(&bytes, path)
}

pub fn write_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    fs::write(path, encode_pgm(pgm.width, pgm.height, pgm.maxval, &pgm.samples))?;
    Ok(())
}

fn slice_name(z: usize) -> String {
    format!("slice_{z:04}.pgm")
}

fn slice_index(name: &str) -> Option<usize> {
    name.strip_prefix("slice_")?.strip_suffix(".pgm")?.parse().ok()
}

pub const META_FILE: &str = "volume.meta";

pub fn load_volume(dir: &Path) -> Result<FragmentVolume> {
    let entries = fs::read_dir(dir).map_err(|e| Error::format(dir, e.to_string()))?;
    let mut slices: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if let Some(idx) = path.file_name().and_then(|n| n.to_str()).and_then(slice_index) {
            slices.push((idx, path));
        }
    }
    slices.sort();
    if slices.is_empty() {
        return Err(Error::format(dir, "no slice_NNNN.pgm files"));
    }
    for (expected, (idx, _)) in slices.iter().enumerate() {
        if *idx != expected {
            return Err(Error::format(dir.join(slice_name(expected)), "missing slice"));
        }
    }
    let mut voxels = Vec::new();
    let (mut height, mut width) = (0, 0);
    for (z, (_, path)) in slices.iter().enumerate() {
        let pgm = read_pgm(path)?;
        if z == 0 {
            (height, width) = (pgm.height, pgm.width);
            voxels.reserve(slices.len() * height * width);
        } else if (pgm.height, pgm.width) != (height, width) {
            return Err(Error::format(
                path,
                format!("slice is {}x{}, expected {height}x{width}", pgm.height, pgm.width),
            ));
        }
        let scale = 1.0 / pgm.maxval as f64;
        voxels.extend(pgm.samples.iter().map(|&s| s as f64 * scale));
    }
    let mut vol = FragmentVolume::new(slices.len(), height, width, voxels)?;
    let meta_path = dir.join(META_FILE);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path)?;
        let entries = kv::parse(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        for e in entries {
            let mismatch = |what: &str, v: usize, actual: usize| {
                Error::format(&meta_path, format!("{what} = {v} but the slices give {actual}"))
            };
            let as_usize = |e: &kv::Entry| e.usize().map_err(|err| Error::format(&meta_path, err.to_string()));
            match e.key.as_str() {
                "slices" if as_usize(&e)? != vol.depth => return Err(mismatch("slices", as_usize(&e)?, vol.depth)),
                "height" if as_usize(&e)? != height => return Err(mismatch("height", as_usize(&e)?, height)),
                "width" if as_usize(&e)? != width => return Err(mismatch("width", as_usize(&e)?, width)),
                "voxel_size_um" => {
                    vol.voxel_size_um = e.f64().map_err(|err| Error::format(&meta_path, err.to_string()))?
                }
                _ => {}
            }
        }
    }
    Ok(vol)
}

pub fn save_volume(dir: &Path, vol: &FragmentVolume) -> Result<()> {
    fs::create_dir_all(dir)?;
    for z in 0..vol.depth {
        let samples: Vec<u16> = vol
            .slice(z)
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        write_pgm(
            &dir.join(slice_name(z)),
            &Pgm {
                width: vol.width,
                height: vol.height,
                maxval: 65535,
                samples,
            },
        )?;
    }
    let meta = format!(
        "slices = {}\nheight = {}\nwidth = {}\nvoxel_size_um = {:?}\n",
        vol.depth, vol.height, vol.width, vol.voxel_size_um
    );
    fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

/// Writes values in `[0, 1]` as 8-bit grayscale.
pub fn save_map(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let samples = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
    write_pgm(
        path,
        &Pgm {
            width,
            height,
            maxval: 255,
            samples,
        },
    )
}

/// Reads a grayscale map as values in `[0, 1]`; returns `(height, width, values)`.
pub fn load_map(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let pgm = read_pgm(path)?;
    let scale = 1.0 / pgm.maxval as f64;
    Ok((pgm.height, pgm.width, pgm.samples.iter().map(|&s| s as f64 * scale).collect()))
}

pub fn save_mask(path: &Path, mask: &InkMask) -> Result<()> {
    let values: Vec<f64> = mask.data.iter().map(|&v| v as f64).collect();
    save_map(path, mask.height, mask.width, &values)
}

/// Loads a binary mask; pixels at or above half the maxval count as ink.
pub fn load_mask(path: &Path) -> Result<InkMask> {
    let pgm = read_pgm(path)?;
    let data = pgm.samples.iter().map(|&s| u8::from(2 * s as u32 >= pgm.maxval as u32)).collect();
    InkMask::new(pgm.height, pgm.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_sixteen_bit_slices() {
        let dir = tempfile::tempdir().unwrap();
        for (z, v) in [0u16, 32768, 65535].iter().enumerate() {
            write_pgm(
                &dir.path().join(slice_name(z)),
                &Pgm {
                    width: 4,
                    height: 4,
                    maxval: 65535,
                    samples: vec![*v; 16],
                },
            )
            .unwrap();
        }
        let vol = load_volume(dir.path()).unwrap();
        assert_eq!(vol.depth, 3);
        assert_eq!(vol.slice(0), &[0.0; 16]);
        assert!(vol.slice(1).iter().all(|&v| v == 32768.0 / 65535.0));
        assert!((vol.slice(1)[0] - 0.500_007_6).abs() < 1e-7);
        assert_eq!(vol.slice(2), &[1.0; 16]);
    }

    #[test]
    fn dimension_mismatch_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        for (z, w) in [4, 5].iter().enumerate() {
            write_pgm(
                &dir.path().join(slice_name(z)),
                &Pgm {
                    width: *w,
                    height: 4,
                    maxval: 65535,
                    samples: vec![0; 4 * w],
                },
            )
            .unwrap();
        }
        let err = load_volume(dir.path()).unwrap_err().to_string();
        assert!(err.contains("slice_0001.pgm"), "{err}");
    }

    #[test]
    fn missing_slice_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let pgm = Pgm {
            width: 2,
            height: 2,
            maxval: 65535,
            samples: vec![1; 4],
        };
        write_pgm(&dir.path().join(slice_name(0)), &pgm).unwrap();
        write_pgm(&dir.path().join(slice_name(2)), &pgm).unwrap();
        let err = load_volume(dir.path()).unwrap_err().to_string();
        assert!(err.contains("slice_0001.pgm"), "{err}");
        assert!(decode_pgm(b"P2\n2 2\n255\n", Path::new("x")).is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x01", Path::new("x")).is_err());
    }

    #[test]
    fn volume_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let voxels: Vec<f64> = (0..2 * 3 * 5).map(|i| (i * 2185) as f64 / 65535.0).collect();
        let vol = FragmentVolume::new(2, 3, 5, voxels).unwrap();
        save_volume(dir.path(), &vol).unwrap();
        assert_eq!(load_volume(dir.path()).unwrap(), vol);

        let mask = InkMask::new(2, 3, vec![0, 1, 1, 0, 0, 1]).unwrap();
        let p = dir.path().join("mask.pgm");
        save_mask(&p, &mask).unwrap();
        assert_eq!(load_mask(&p).unwrap(), mask);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let pgm = decode_pgm(bytes, Path::new("x")).unwrap();
        assert_eq!(pgm.samples, vec![0, 255]);
    }
}
