//! Binarization, F-beta, pseudo-F-measure and PSNR, plus tiled inference
//! and the depth-activation sweep.

pub mod skeleton;
pub mod stitch;
pub mod sweep;

pub use skeleton::skeletonize;
pub use stitch::{tile_predict, InkMap, InkModel, NetworkModel, StitchPlan};
pub use sweep::depth_activation_sweep;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;

/// `1` where `m >= threshold`.
pub fn binarize(m: &[f64], threshold: f64) -> Vec<u8> {
    m.iter().map(|&v| (v >= threshold) as u8).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![b],
            found: vec![a],
        });
    }
    Ok(())
}

impl ConfusionCounts {
    pub fn from_maps(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
        same_len("confusion", pred.len(), gt.len())?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(1 + b^2) p r / (b^2 p + r)` from precision and recall; 0 when either
/// is 0.
pub fn f_beta_pr(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    if p <= 0.0 || r <= 0.0 {
        return 0.0;
    }
    (1.0 + b2) * p * r / (b2 * p + r)
}

/// 0 when there are no true positives.
pub fn f_beta(c: &ConfusionCounts, beta: f64) -> f64 {
    if c.tp == 0 {
        return 0.0;
    }
    f_beta_pr(c.precision(), c.recall(), beta)
}

/// Peak-1 PSNR in dB; `f64::INFINITY` for identical maps.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    same_len("psnr", pred.len(), gt.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("psnr", "empty maps"));
    }
    let mse = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub fn psnr_binary(pred: &[u8], gt: &[u8]) -> Result<f64> {
    let f = |m: &[u8]| m.iter().map(|&v| (v != 0) as u8 as f64).collect::<Vec<_>>();
    psnr(&f(pred), &f(gt))
}

/// Harmonic mean of standard precision and skeleton recall (the fraction of
/// `skeletonize(gt)` covered by `pred`).
pub fn pseudo_fmeasure(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<f64> {
    same_len("pfm", pred.len(), gt.len())?;
    same_len("pfm", pred.len(), h * w)?;
    let c = ConfusionCounts::from_maps(pred, gt)?;
    let skel = skeletonize(gt, h, w);
    let sc = ConfusionCounts::from_maps(pred, &skel)?;
    Ok(f_beta_pr(c.precision(), sc.recall(), 1.0))
}

/// Renders PSNR for reports: `inf` for the identical-map sentinel.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub f_beta: f64,
    pub pfm: f64,
    pub psnr: f64,
}

/// F-beta (beta 0.5), pFM and binary PSNR of a binarized prediction.
pub fn evaluate(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<Metrics> {
    let c = ConfusionCounts::from_maps(pred, gt)?;
    Ok(Metrics {
        f_beta: f_beta(&c, DEFAULT_BETA),
        pfm: pseudo_fmeasure(pred, gt, h, w)?,
        psnr: psnr_binary(pred, gt)?,
    })
}

pub const REPORT_HEADER: &str = "fragment,f_beta,pfm,psnr,threshold";

pub fn report_row(fragment: &str, m: &Metrics, threshold: f64) -> String {
    format!("{fragment},{:.6},{:.6},{},{threshold}", m.f_beta, m.pfm, format_psnr(m.psnr))
}

/// Smallest score `t` such that marking `score >= t` selects about
/// `fraction` of the pixels (ties included).
pub fn quantile_threshold(scores: &[f64], fraction: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * s.len() as f64).round() as usize).clamp(1, s.len());
    s[k - 1]
}

/// Mean intensity over `slices` per pixel, thresholded so the predicted
/// ink fraction matches `prevalence`. A texture-blind reference classifier.
pub fn mean_intensity_baseline(
    volume: &crate::pipeline::io::FragmentVolume,
    slices: std::ops::Range<usize>,
    prevalence: f64,
) -> Result<Vec<u8>> {
    if slices.is_empty() || slices.end > volume.depth {
        return Err(Error::invalid("baseline", format!("slices {slices:?} outside volume")));
    }
    let n = volume.height * volume.width;
    let mut mean = vec![0.0; n];
    for z in slices.clone() {
        for (m, v) in mean.iter_mut().zip(volume.slice(z)) {
            *m += v;
        }
    }
    let k = slices.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let t = quantile_threshold(&mean, prevalence);
    Ok(binarize(&mean, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::sampling::D4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_convention() {
        assert_eq!(binarize(&[0.5; 4], 0.5), vec![1; 4]);
        assert_eq!(binarize(&[0.49; 4], 0.5), vec![0; 4]);
        let m = [0.1, 0.7, 0.5, 0.2];
        let once: Vec<f64> = binarize(&m, 0.5).iter().map(|&v| v as f64).collect();
        assert_eq!(binarize(&once, 0.5), binarize(&m, 0.5));
    }

    #[test]
    fn f_beta_examples() {
        // p = 0.8, r = 0.5 as exact rationals: 4 tp, 1 fp, 4 fn.
        let c = ConfusionCounts { tp: 4, fp: 1, fn_: 4, tn: 0 };
        assert!((f_beta(&c, 0.5) - 5.0 / 7.0).abs() < 1e-15);
        assert!((f_beta(&c, 0.5) - 0.714286).abs() < 1e-6);
        for beta in [0.5, 1.0, 3.0] {
            assert!((f_beta_pr(0.6, 0.6, beta) - 0.6).abs() < 1e-15);
        }
        assert_eq!(f_beta(&ConfusionCounts { tp: 0, fp: 3, fn_: 2, tn: 1 }, 0.5), 0.0);
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0u8; 100];
        assert_eq!(psnr_binary(&a, &a).unwrap(), f64::INFINITY);
        let mut b = a.clone();
        b[17] = 1;
        assert!((psnr_binary(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr_binary(&a, &[1; 100]).unwrap(), 0.0);
        assert_eq!(format_psnr(f64::INFINITY), "inf");
    }

    #[test]
    fn pfm_examples() {
        // A 3-wide horizontal bar; its skeleton is the middle row.
        let mut gt = vec![0u8; 100];
        for y in 3..6 {
            for x in 1..9 {
                gt[y * 10 + x] = 1;
            }
        }
        assert_eq!(pseudo_fmeasure(&gt, &gt, 10, 10).unwrap(), 1.0);
        let skel = skeletonize(&gt, 10, 10);
        let mut pred = skel.clone();
        for x in 1..9 {
            pred[3 * 10 + x] = 1;
        }
        assert!(skel.iter().zip(&pred).all(|(s, p)| s <= p));
        assert!(pred.iter().filter(|&&v| v == 1).count() < gt.iter().filter(|&&v| v == 1).count());
        assert_eq!(pseudo_fmeasure(&pred, &gt, 10, 10).unwrap(), 1.0);
        assert_eq!(pseudo_fmeasure(&[0; 100], &gt, 10, 10).unwrap(), 0.0);
    }

    // Independent pixel-counting oracles.
    fn count(pred: &[u8], gt: &[u8], pv: u8, gv: u8) -> f64 {
        pred.iter().zip(gt).filter(|(p, g)| **p == pv && **g == gv).count() as f64
    }

    fn f_beta_oracle(pred: &[u8], gt: &[u8], beta: f64) -> f64 {
        let tp = count(pred, gt, 1, 1);
        if tp == 0.0 {
            return 0.0;
        }
        let b2 = beta * beta;
        let fp = count(pred, gt, 1, 0);
        let fn_ = count(pred, gt, 0, 1);
        // The same quantity written on counts: (1+b^2) tp / ((1+b^2) tp + b^2 fn + fp).
        (1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * fn_ + fp)
    }

    fn psnr_oracle(pred: &[u8], gt: &[u8]) -> f64 {
        let diff = count(pred, gt, 1, 0) + count(pred, gt, 0, 1);
        if diff == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (pred.len() as f64 / diff).log10()
        }
    }

    fn pfm_oracle(pred: &[u8], gt: &[u8]) -> f64 {
        let skel = skeletonize(gt, 32, 32);
        let tp = count(pred, gt, 1, 1);
        let pp = tp + count(pred, gt, 1, 0);
        let covered = count(pred, &skel, 1, 1);
        let sk = skel.iter().filter(|&&v| v == 1).count() as f64;
        if tp == 0.0 || covered == 0.0 {
            return 0.0;
        }
        let (p, r) = (tp / pp, covered / sk);
        2.0 * p * r / (p + r)
    }

    fn random_pair(seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dens: f64 = rng.gen_range(0.05..0.7);
        let gt: Vec<u8> = (0..1024).map(|_| rng.gen_bool(dens) as u8).collect();
        let flip: f64 = rng.gen_range(0.0..0.5);
        let pred = gt.iter().map(|&g| if rng.gen_bool(flip) { 1 - g } else { g }).collect();
        (pred, gt)
    }

    fn close(a: f64, b: f64) -> bool {
        a == b || (a - b).abs() <= 1e-12 * a.abs().max(1.0)
    }

    #[test]
    fn metrics_match_counting_oracles() {
        for seed in 0..100 {
            let (pred, gt) = random_pair(seed);
            let m = evaluate(&pred, &gt, 32, 32).unwrap();
            assert!(close(m.f_beta, f_beta_oracle(&pred, &gt, 0.5)), "seed {seed}");
            assert!(close(m.psnr, psnr_oracle(&pred, &gt)), "seed {seed}");
            assert!(close(m.pfm, pfm_oracle(&pred, &gt)), "seed {seed}");
        }
    }

    #[test]
    fn quantile_threshold_hits_the_fraction() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let t = quantile_threshold(&scores, 0.2);
        assert_eq!(binarize(&scores, t).iter().filter(|&&v| v == 1).count(), 20);
    }

    proptest! {
        #[test]
        fn f_beta_monotone_in_tp(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let a = f_beta(&ConfusionCounts { tp, fp, fn_, tn: 0 }, 0.5);
            let b = f_beta(&ConfusionCounts { tp: tp + 1, fp, fn_, tn: 0 }, 0.5);
            prop_assert!(b >= a);
        }

        #[test]
        fn metrics_are_d4_invariant(seed in any::<u64>(), gi in 0usize..8) {
            let (pred, gt) = random_pair(seed);
            let g = D4::ALL[gi];
            let a = evaluate(&pred, &gt, 32, 32).unwrap();
            let b = evaluate(&g.apply(&pred, 32, 32).unwrap(), &g.apply(&gt, 32, 32).unwrap(), 32, 32).unwrap();
            prop_assert!(close(a.f_beta, b.f_beta) && close(a.psnr, b.psnr));
            // Zhang-Suen thinning commutes with the transpose but not with
            // rotations, so the skeleton can shift by a pixel under those.
            if matches!(g, D4::Identity | D4::Transpose) {
                prop_assert_eq!(a.pfm, b.pfm);
            } else {
                prop_assert!((a.pfm - b.pfm).abs() < 0.02);
            }
        }
    }
}
