//! Named parameter storage and the thin layer wrappers (convolution, batch
//! norm) that look their weights up by name during a forward pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnops::{self, BatchNormConfig, RunningStats};
use crate::tensor::{numel, Tensor};

/// One trainable tensor with its AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn new(shape: &[usize], value: Vec<f64>) -> Param {
        let n = value.len();
        debug_assert_eq!(numel(shape), n);
        Param {
            shape: shape.to_vec(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming-uniform with the given fan-in.
    Kaiming(usize),
    Zeros,
    Ones,
}

/// 64-bit FNV-1a, used to give every parameter its own init stream.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Parameters and batch-norm buffers keyed by hierarchical names such as
/// `enc.stage1.block0.conv1.w`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub seed: u64,
    pub params: BTreeMap<String, Param>,
    pub buffers: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn new(seed: u64) -> ParamStore {
        ParamStore {
            seed,
            ..ParamStore::default()
        }
    }

    /// Creates `name` if absent. The initial value depends only on the store
    /// seed and the name, so two networks sharing a sub-tree get identical
    /// weights there regardless of what else they contain.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if let Some(p) = self.params.get(name) {
            if p.shape != shape {
                return Err(Error::invalid("param", format!("{name} redeclared with shape {shape:?}, has {:?}", p.shape)));
            }
            return Ok(());
        }
        let value = match init {
            Init::Kaiming(fan_in) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
                nnops::kaiming_uniform(shape, fan_in, &mut rng)
            }
            Init::Zeros => vec![0.0; numel(shape)],
            Init::Ones => vec![1.0; numel(shape)],
        };
        self.params.insert(name.to_string(), Param::new(shape, value));
        Ok(())
    }

    pub fn declare_stats(&mut self, name: &str, channels: usize) {
        self.buffers
            .entry(name.to_string())
            .or_insert_with(|| RunningStats::new(channels));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter {name}")))
    }

    /// Overwrites a parameter's value (keeping its shape).
    pub fn set(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        let p = self.get_mut(name)?;
        if value.len() != p.value.len() {
            return Err(Error::invalid("param", format!("{name}: {} values for shape {:?}", value.len(), p.shape)));
        }
        p.value = value;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Names under `prefix`, in sorted order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params.keys().filter(move |k| k.starts_with(prefix))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Switches that strip the nonlinear parts of a block so tests can check
/// the linear and spectral algebra directly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Hooks {
    pub bypass_bn: bool,
    pub no_relu: bool,
}

/// Per-forward state: parameter access, mode, randomness and the leaf
/// tensors handed out so their gradients can be collected afterwards.
pub struct Ctx<'a> {
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub hooks: Hooks,
    pub bn: BatchNormConfig,
    track_grads: bool,
    leaves: BTreeMap<String, Tensor>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode, rng_seed: u64) -> Ctx<'a> {
        Ctx {
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            hooks: Hooks::default(),
            bn: BatchNormConfig::default(),
            track_grads: mode == Mode::Train,
            leaves: BTreeMap::new(),
        }
    }

    /// Forces parameters to be graph leaves even in eval mode (needed when
    /// gradients with respect to activations are wanted).
    pub fn with_grads(mut self, on: bool) -> Ctx<'a> {
        self.track_grads = on;
        self
    }

    pub fn with_hooks(mut self, hooks: Hooks) -> Ctx<'a> {
        self.hooks = hooks;
        self
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&mut self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.leaves.get(name) {
            return Ok(t.clone());
        }
        let p = self.store.get(name)?;
        let t = if self.track_grads {
            Tensor::leaf(&p.shape, p.value.clone())?
        } else {
            Tensor::new(&p.shape, p.value.clone())?
        };
        self.leaves.insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of every parameter used in this forward pass (zeros for
    /// parameters the loss did not reach).
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.leaves
            .iter()
            .map(|(k, t)| (k.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        if self.hooks.no_relu {
            Ok(x.clone())
        } else {
            x.relu()
        }
    }
}

/// A convolution whose weights live in a [`ParamStore`]. `rank` 3 takes
/// `(N, D, H, W, C)` inputs, rank 2 takes `(N, H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub rank: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub bias: bool,
}

impl Conv {
    /// Stride-1 3D convolution with "same" padding.
    pub fn same3(name: impl Into<String>, in_c: usize, out_c: usize, k: usize) -> Conv {
        Conv {
            name: name.into(),
            rank: 3,
            in_c,
            out_c,
            kernel: [k; 3],
            stride: [1; 3],
            pad: [k / 2; 3],
            bias: false,
        }
    }

    /// Stride-1 2D convolution with "same" padding.
    pub fn same2(name: impl Into<String>, in_c: usize, out_c: usize, k: usize) -> Conv {
        Conv {
            name: name.into(),
            rank: 2,
            in_c,
            out_c,
            kernel: [1, k, k],
            stride: [1; 3],
            pad: [0, k / 2, k / 2],
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Conv {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        if self.rank == 3 {
            vec![self.out_c, self.in_c, self.kernel[0], self.kernel[1], self.kernel[2]]
        } else {
            vec![self.out_c, self.in_c, self.kernel[1], self.kernel[2]]
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.kernel.iter().product::<usize>()
    }

    pub fn declare(&self, store: &mut ParamStore) -> Result<()> {
        if self.fan_in() == 0 || self.out_c == 0 {
            return Err(Error::invalid("conv", format!("{}: empty layer", self.name)));
        }
        store.declare(&self.weight_name(), &self.weight_shape(), Init::Kaiming(self.fan_in()))?;
        if self.bias {
            store.declare(&self.bias_name(), &[self.out_c], Init::Zeros)?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias { Some(ctx.param(&self.bias_name())?) } else { None };
        if self.rank == 3 {
            nnops::conv3d(x, &w, b.as_ref(), self.stride, self.pad)
        } else {
            nnops::conv2d(x, &w, b.as_ref(), [self.stride[1], self.stride[2]], [self.pad[1], self.pad[2]])
        }
    }
}

/// Batch norm whose affine parameters and running statistics live in a
/// [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> BatchNorm {
        BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn declare(&self, store: &mut ParamStore) -> Result<()> {
        store.declare(&format!("{}.gamma", self.name), &[self.channels], Init::Ones)?;
        store.declare(&format!("{}.beta", self.name), &[self.channels], Init::Zeros)?;
        store.declare_stats(&format!("{}.stats", self.name), self.channels);
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        if ctx.hooks.bypass_bn {
            return Ok(x.clone());
        }
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        let training = ctx.training();
        let cfg = ctx.bn;
        let stats = ctx
            .store
            .buffers
            .get_mut(&format!("{}.stats", self.name))
            .ok_or_else(|| Error::invalid("batch_norm", format!("no running stats for {}", self.name)))?;
        nnops::batch_norm(x, &gamma, &beta, stats, cfg, training)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(5);
        let mut b = ParamStore::new(5);
        a.declare("x.w", &[4, 3], Init::Kaiming(3)).unwrap();
        b.declare("other", &[2], Init::Kaiming(1)).unwrap();
        b.declare("x.w", &[4, 3], Init::Kaiming(3)).unwrap();
        assert_eq!(a.get("x.w").unwrap(), b.get("x.w").unwrap());
        let bound = nnops::kaiming_uniform_bound(3);
        assert!(a.get("x.w").unwrap().value.iter().all(|v| v.abs() <= bound));
        assert!(a.declare("x.w", &[3, 4], Init::Zeros).is_err());
    }

    #[test]
    fn ctx_collects_gradients() {
        let mut store = ParamStore::new(1);
        let conv = Conv::same3("c", 2, 3, 3).with_bias();
        conv.declare(&mut store).unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Train, 0);
        let x = Tensor::full(&[1, 2, 3, 3, 2], 0.5);
        conv.forward(&mut ctx, &x).unwrap().sum_all().unwrap().backward().unwrap();
        let grads = ctx.grads();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads["c.b"], vec![18.0; 3]);
    }

    #[test]
    fn eval_ctx_records_nothing() {
        let mut store = ParamStore::new(1);
        let bn = BatchNorm::new("bn", 2);
        bn.declare(&mut store).unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, 0);
        let y = bn.forward(&mut ctx, &Tensor::full(&[1, 1, 2], 1.0)).unwrap();
        assert!(!y.requires_grad());
        assert_eq!(store.buffers["bn.stats"], RunningStats::new(2));
    }
}
