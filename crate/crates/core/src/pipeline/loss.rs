//! Dice and weighted binary cross-entropy on predicted ink probabilities.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;
const P_CLAMP: f64 = 1e-12;

fn check_pair(op: &'static str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: p.shape().to_vec(),
            found: g.shape().to_vec(),
        });
    }
    Ok(())
}

/// `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`, reduced over
/// every element. Gradients flow into `p` only.
pub fn dice_loss(p: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    check_pair("dice", p, g)?;
    let (pd, gd) = (p.data(), g.data());
    let num = 2.0 * pd.iter().zip(gd).map(|(a, b)| a * b).sum::<f64>() + eps;
    let den = pd.iter().map(|a| a * a).sum::<f64>() + gd.iter().map(|b| b * b).sum::<f64>() + eps;
    let gv = gd.to_vec();
    let pv = pd.to_vec();
    Tensor::from_op(
        "dice",
        vec![],
        vec![1.0 - num / den],
        vec![p.clone()],
        Box::new(move |up, _| {
            let s = up[0] / (den * den);
            vec![Some(
                pv.iter()
                    .zip(&gv)
                    .map(|(p, g)| -s * (2.0 * g * den - 2.0 * p * num))
                    .collect(),
            )]
        }),
    )
}

/// Mean of `-(w g log p + (1 - g) log(1 - p))` with `p` clamped to
/// `[1e-12, 1 - 1e-12]`. With `verbatim` the weight also multiplies the
/// background term, which only rescales plain BCE.
pub fn wbce_loss(p: &Tensor, g: &Tensor, w: f64, verbatim: bool) -> Result<Tensor> {
    check_pair("wbce", p, g)?;
    let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP)?;
    let g = g.detach();
    let ink = g.mul(&pc.log()?)?.scale(w)?;
    let bg = g.one_minus()?.mul(&pc.one_minus()?.log()?)?;
    let bg = if verbatim { bg.scale(w)? } else { bg };
    ink.add(&bg)?.mean_all()?.neg()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    DiceWbce,
    Dice,
    Wbce,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::DiceWbce => "dice+wbce",
            LossMode::Dice => "dice",
            LossMode::Wbce => "wbce",
        })
    }
}

impl FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dice+wbce" | "wbce+dice" | "both" => Ok(LossMode::DiceWbce),
            "dice" => Ok(LossMode::Dice),
            "wbce" => Ok(LossMode::Wbce),
            _ => Err(format!("unknown loss mode `{s}` (dice+wbce, dice, wbce)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    pub ink_weight: f64,
    pub eps: f64,
    pub wbce_verbatim: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::DiceWbce,
            ink_weight: 1.0,
            eps: DICE_EPS,
            wbce_verbatim: false,
        }
    }
}

pub fn total_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    match cfg.mode {
        LossMode::Dice => dice_loss(p, g, cfg.eps),
        LossMode::Wbce => wbce_loss(p, g, cfg.ink_weight, cfg.wbce_verbatim),
        LossMode::DiceWbce => dice_loss(p, g, cfg.eps)?.add(&wbce_loss(p, g, cfg.ink_weight, cfg.wbce_verbatim)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::sampling::D4;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    fn val(x: Result<Tensor>) -> f64 {
        x.unwrap().item().unwrap()
    }

    // Plain loops over the defining sums.
    fn dice_oracle(p: &[f64], g: &[f64], eps: f64) -> f64 {
        let mut pg = 0.0;
        let mut pp = 0.0;
        let mut gg = 0.0;
        for i in 0..p.len() {
            pg += p[i] * g[i];
            pp += p[i] * p[i];
            gg += g[i] * g[i];
        }
        1.0 - (2.0 * pg + eps) / (pp + gg + eps)
    }

    #[test]
    fn dice_examples() {
        let g = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        assert!(val(dice_loss(&t(&g), &t(&g), DICE_EPS)) < 1e-9);
        let inv: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
        assert!((val(dice_loss(&t(&inv), &t(&g), DICE_EPS)) - 1.0).abs() < 1e-6);
        let half = [0.5; 8];
        let l = val(dice_loss(&t(&half), &t(&g), DICE_EPS));
        assert!((l - (1.0 - (4.0 + DICE_EPS) / (6.0 + DICE_EPS))).abs() < 1e-15);
        assert!((l - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn wbce_examples() {
        let l = val(wbce_loss(&t(&[0.5; 6]), &t(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]), 1.0, false));
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let g = [1.0, 0.0, 1.0];
        assert!(val(wbce_loss(&t(&g), &t(&g), 3.0, false)) < 1e-11);
        let l = val(wbce_loss(&t(&[0.9, 0.2]), &t(&[1.0, 0.0]), 2.0, false));
        let oracle = -0.5 * (2.0 * 0.9f64.ln() + 0.8f64.ln());
        assert!((l - oracle).abs() < 1e-14);
        assert!((l - 0.21694).abs() < 1e-5);
        // The verbatim form is plain BCE times w.
        let plain = val(wbce_loss(&t(&[0.9, 0.2]), &t(&[1.0, 0.0]), 1.0, false));
        let verb = val(wbce_loss(&t(&[0.9, 0.2]), &t(&[1.0, 0.0]), 2.0, true));
        assert!((verb - 2.0 * plain).abs() < 1e-14);
    }

    #[test]
    fn total_modes() {
        let p = t(&[0.3, 0.8, 0.6, 0.1]);
        let g = t(&[0.0, 1.0, 1.0, 0.0]);
        let cfg = LossConfig {
            ink_weight: 2.0,
            ..LossConfig::default()
        };
        let both = val(total_loss(&p, &g, &cfg));
        let sum = val(dice_loss(&p, &g, DICE_EPS)) + val(wbce_loss(&p, &g, 2.0, false));
        assert!((both - sum).abs() < 1e-15);
        let wbce_only = LossConfig { mode: LossMode::Wbce, ..cfg };
        assert_eq!(val(total_loss(&p, &g, &wbce_only)), val(wbce_loss(&p, &g, 2.0, false)));
        let dice_only = LossConfig { mode: LossMode::Dice, ..cfg };
        assert_eq!(val(total_loss(&p, &g, &dice_only)), val(dice_loss(&p, &g, DICE_EPS)));
        let perfect = val(total_loss(&g, &g, &LossConfig::default()));
        assert!(perfect < 1e-9);
        assert!(matches!(total_loss(&p, &t(&[1.0]), &cfg), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = t(&[0.0, 1.0, 0.25, 1.0, 0.0]);
        let p = Tensor::leaf(&[5], vec![0.2, 0.7, 0.4, 0.55, 0.35]).unwrap();
        let err = grad_check(|x| dice_loss(x, &g, DICE_EPS), &p, 1e-6).unwrap();
        assert!(err < 1e-7, "{err}");
        let err = grad_check(|x| wbce_loss(x, &g, 3.0, false), &p, 1e-6).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    proptest! {
        #[test]
        fn dice_matches_oracle(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..64)) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let l = val(dice_loss(&t(&p), &t(&g), DICE_EPS));
            prop_assert!((l - dice_oracle(&p, &g, DICE_EPS)).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        }

        #[test]
        fn losses_fall_along_the_path_to_the_target(bits in prop::collection::vec(any::<bool>(), 2..40)) {
            let g: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
            prop_assume!(g.contains(&1.0));
            let cfg = LossConfig { ink_weight: 2.0, ..LossConfig::default() };
            let mut prev: Option<(f64, f64)> = None;
            for k in 0..=10 {
                let a = k as f64 / 10.0;
                let p: Vec<f64> = g.iter().map(|&v| (1.0 - a) * (1.0 - v) + a * v).collect();
                let d = val(dice_loss(&t(&p), &t(&g), cfg.eps));
                let w = val(wbce_loss(&t(&p), &t(&g), cfg.ink_weight, false));
                prop_assert!(w >= 0.0);
                if let Some((pd, pw)) = prev {
                    prop_assert!(d <= pd + 1e-12 && w <= pw + 1e-12);
                }
                prev = Some((d, w));
            }
        }

        #[test]
        fn total_loss_is_d4_invariant(seed in any::<u64>(), gi in 0usize..8) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..36).map(|_| rng.gen()).collect();
            let g: Vec<f64> = (0..36).map(|_| rng.gen_range(0..2) as f64).collect();
            let cfg = LossConfig::default();
            let base = val(total_loss(&t(&p), &t(&g), &cfg));
            let op = D4::ALL[gi];
            let moved = val(total_loss(&t(&op.apply(&p, 6, 6).unwrap()), &t(&op.apply(&g, 6, 6).unwrap()), &cfg));
            prop_assert!((base - moved).abs() < 1e-12);
        }
    }
}
