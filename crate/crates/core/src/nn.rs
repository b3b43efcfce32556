//! Parameterized layers shared by the encoder and both task branches.

use rand::Rng;

use crate::error::Result;
use crate::ndgrad::{init, BatchStats, Float, Graph, NormMode, ParamId, ParamStore, Tensor, Var};

/// Momentum of running-statistic updates in training mode.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// One forward pass: the graph being recorded, the parameters it reads,
/// and the normalization statistics it produced.
pub struct Forward<'s, T: Float> {
    pub graph: Graph<T>,
    pub store: &'s ParamStore<T>,
    pub train: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

impl<'s, T: Float> Forward<'s, T> {
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    /// Ends the pass, releasing the store borrow: the graph plus the batch
    /// statistics waiting to be folded into the running averages.
    pub fn finish(self) -> (Graph<T>, PendingNormStats<T>) {
        (self.graph, PendingNormStats(self.bn_updates))
    }
}

/// Batch statistics produced by a training-mode pass.
pub struct PendingNormStats<T>(Vec<BnUpdate<T>>);

impl<T: Float> PendingNormStats<T> {
    /// `running ← (1 − m)·running + m·batch` with `m = BN_MOMENTUM`.
    pub fn commit(self, store: &mut ParamStore<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for u in self.0 {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialized convolution with `pad = k / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init::he_normal(out_ch, in_ch, kernel, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_ch])));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    /// Convolution with weights drawn from `N(0, std²)` instead of He scaling.
    #[allow(clippy::too_many_arguments)]
    pub fn with_std<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        std: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn([out_ch, in_ch, kernel, kernel], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_ch])));
        Self {
            weight,
            bias,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full([channels], T::one())),
        }
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        if f.train {
            let (y, stats) = f.graph.batch_norm(x, gamma, beta, NormMode::Train, BN_EPS)?;
            f.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats: stats.expect("train mode yields statistics"),
            });
            Ok(y)
        } else {
            let store = f.store;
            let mode = NormMode::Eval {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
            };
            Ok(f.graph.batch_norm(x, gamma, beta, mode, BN_EPS)?.0)
        }
    }
}

/// Bias-free convolution followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        self.bn.forward(f, y)
    }
}
