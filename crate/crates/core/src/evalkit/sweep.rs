//! Depth-activation sweep: slide the network's input window over every
//! depth of a volume region and record which absolute slices carry the
//! relevance at a chosen 3D layer.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::{Network, ProbeLayer};
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

/// Relevance per `(absolute z, window start)`; zero outside each window.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepMatrix {
    pub depth: usize,
    pub window: usize,
    /// Row-major, `depth` rows by `starts()` columns.
    pub values: Vec<f64>,
}

impl SweepMatrix {
    pub fn starts(&self) -> usize {
        self.depth - self.window + 1
    }

    pub fn get(&self, z: usize, start: usize) -> f64 {
        self.values[z * self.starts() + start]
    }

    /// Absolute z of the largest entry in column `start`.
    pub fn argmax_z(&self, start: usize) -> usize {
        (0..self.depth)
            .max_by(|&a, &b| self.get(a, start).total_cmp(&self.get(b, start)))
            .unwrap()
    }

    /// Header `z,0,1,...`, then one row per absolute slice.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("z");
        for c in 0..self.starts() {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for z in 0..self.depth {
            let _ = write!(s, "{z}");
            for c in 0..self.starts() {
                let _ = write!(s, ",{:.6e}", self.get(z, c));
            }
            s.push('\n');
        }
        s
    }
}

/// Per-slice relevance `mean(relu(d out / d a) * a)` of one window, mapped
/// from the layer's depth onto the `window` input slices.
fn window_relevance(net: &Network, store: &mut ParamStore, x: Vec<f64>, dims: [usize; 3], layer: ProbeLayer) -> Result<Vec<f64>> {
    let [d, h, w] = dims;
    let x = Tensor::leaf(&[1, d, h, w, 1], x)?;
    let mut ctx = Ctx::new(store, Mode::Eval, 0).with_grads(true);
    let acts = net.forward_full(&mut ctx, &x)?;
    let a = match layer {
        ProbeLayer::Input => x.clone(),
        ProbeLayer::Stem => acts.stem.clone(),
        ProbeLayer::Bottleneck => acts.bottleneck.clone(),
        ProbeLayer::Stage(i) => acts
            .stages
            .get(i)
            .cloned()
            .ok_or_else(|| Error::invalid("sweep", format!("no encoder stage {i}")))?,
    };
    a.retain_grad();
    acts.logits.sigmoid()?.sum_all()?.backward()?;
    let grad = a.grad().unwrap_or_else(|| vec![0.0; a.numel()]);
    let shape = a.shape().to_vec();
    if shape.len() != 5 {
        return Err(Error::invalid("sweep", format!("layer output {shape:?} is not a 3D feature map")));
    }
    let ld = shape[1];
    let per = shape[2] * shape[3] * shape[4];
    let rel: Vec<f64> = (0..ld)
        .map(|z| {
            let r = z * per..(z + 1) * per;
            a.data()[r.clone()].iter().zip(&grad[r]).map(|(a, g)| g.max(0.0) * a).sum::<f64>() / per as f64
        })
        .collect();
    Ok((0..d).map(|k| rel[k * ld / d]).collect())
}

/// Sweeps a `(D, H, W)` region with windows of the network's input depth.
pub fn depth_activation_sweep(
    net: &Network,
    store: &mut ParamStore,
    region: &[f64],
    dims: [usize; 3],
    layer: ProbeLayer,
) -> Result<SweepMatrix> {
    let [depth, h, w] = dims;
    let win = net.config.in_depth;
    if region.len() != depth * h * w || depth < win {
        return Err(Error::invalid("sweep", format!("region {dims:?} cannot hold a {win}-slice window")));
    }
    let starts = depth - win + 1;
    let mut values = vec![0.0; depth * starts];
    for s in 0..starts {
        let x = region[s * h * w..(s + win) * h * w].to_vec();
        let rel = window_relevance(net, store, x, [win, h, w], layer)?;
        for (k, r) in rel.into_iter().enumerate() {
            values[(s + k) * starts + s] = r;
        }
    }
    Ok(SweepMatrix {
        depth,
        window: win,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffc::randomize_params;
    use crate::ffc::zero_params;
    use crate::network::NetworkConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Network, ParamStore) {
        let net = Network::new(NetworkConfig::tiny()).unwrap();
        let mut store = net.init(3).unwrap();
        randomize_params(&mut store, "", 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        (net, store)
    }

    fn region(d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        (0..d * 16 * 16).map(|_| rng.gen()).collect()
    }

    #[test]
    fn shape_and_window_support() {
        let (net, mut store) = setup();
        let d = 9;
        let m = depth_activation_sweep(&net, &mut store, &region(d), [d, 16, 16], ProbeLayer::Input).unwrap();
        assert_eq!(m.starts(), 6);
        for s in 0..m.starts() {
            let nz: Vec<usize> = (0..d).filter(|&z| m.get(z, s) != 0.0).collect();
            assert!(nz.iter().all(|&z| (s..s + 4).contains(&z)));
            assert!(!nz.is_empty());
        }
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), d + 1);
        assert!(csv.starts_with("z,0,1,2,3,4,5\n"));
    }

    #[test]
    fn zero_head_gives_zero_matrix() {
        let (net, mut store) = setup();
        zero_params(&mut store, "head");
        let m = depth_activation_sweep(&net, &mut store, &region(6), [6, 16, 16], ProbeLayer::Stage(1)).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
        assert!(depth_activation_sweep(&net, &mut store, &region(6), [6, 16, 16], ProbeLayer::Stage(5)).is_err());
        assert!(depth_activation_sweep(&net, &mut store, &region(3), [3, 16, 16], ProbeLayer::Stem).is_err());
    }
}
