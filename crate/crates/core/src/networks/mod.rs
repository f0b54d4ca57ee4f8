//! The stain-style generator, the conditional discriminator and the tumor classifier.
//!
//! Every network keeps its trainable tensors in a [`ParamStore`]. A forward pass
//! binds the store to a [`Graph`] through a [`Ctx`], which also decides whether
//! normalization layers use batch or running statistics.

mod checkpoint;
mod classifier;
mod discriminator;
mod generator;

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchStats, Graph, Var};
use crate::tensor::{Float, Tensor};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Network, CHECKPOINT_VERSION};
pub use classifier::{build_classifier, extract_features, Classifier, ClassifierConfig};
pub use discriminator::{build_discriminator, Discriminator, DiscriminatorConfig};
pub use generator::{build_generator, forward_generator, Generator, GeneratorConfig};

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
/// Tiles per graph when running inference over many tiles.
pub(crate) const INFER_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable parameters plus non-trainable buffers (running normalization statistics).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(|p| p.value.all_finite())
    }

    /// Puts every parameter on `graph`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool, mode: Mode) -> Ctx<'g, T> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { graph.param(p.value.clone()) } else { graph.constant(p.value.clone()) })
            .collect();
        Ctx {
            graph,
            vars,
            mode,
            running: self.buffers.iter().map(|b| b.value.clone()).collect(),
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Folds batch statistics from a training-mode pass into the running buffers.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        for (idx, s) in stats {
            for (buf, batch) in [(*idx, &s.mean), (*idx + 1, &s.var)] {
                for (r, &b) in self.buffers[buf].value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    fn push_param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(NamedTensor { name, value });
        self.params.len() - 1
    }

    fn push_buffer(&mut self, name: String, value: Tensor<T>) -> usize {
        self.buffers.push(NamedTensor { name, value });
        self.buffers.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, recorded for running averages.
    Train,
    /// Running statistics; the pass is a pure function of its input.
    Eval,
}

/// A parameter store bound to one graph.
pub struct Ctx<'g, T: Float> {
    pub graph: &'g Graph<T>,
    vars: Vec<Var<'g, T>>,
    mode: Mode,
    running: Vec<Tensor<T>>,
    stats: RefCell<Vec<(usize, BatchStats<T>)>>,
}

impl<'g, T: Float> Ctx<'g, T> {
    /// Graph variables in parameter-store order.
    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch statistics recorded so far, keyed by the running-mean buffer index.
    pub fn take_batch_stats(&self) -> Vec<(usize, BatchStats<T>)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    fn var(&self, idx: usize) -> Var<'g, T> {
        self.vars[idx]
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// He normal, for layers followed by (leaky) rectifiers.
    He,
    /// `N(0, 0.02)`.
    Small,
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn apply<'g, T: Float>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.conv2d(ctx.var(self.w), self.stride, self.pad);
        match self.bias {
            Some(b) => y.add_channel(ctx.var(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
enum NormKind {
    Instance,
    /// Batch statistics in training, running buffers `(mean, mean + 1)` in evaluation.
    Batch { running: usize },
    /// Batch statistics in both modes.
    BatchOnly,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    kind: NormKind,
}

impl Norm {
    fn apply<'g, T: Float>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let eps = T::lit(NORM_EPS);
        let normed = match (&self.kind, ctx.mode) {
            (NormKind::Instance, _) => x.instance_norm(eps),
            (NormKind::BatchOnly, _) => x.batch_norm(eps).0,
            (NormKind::Batch { running }, Mode::Train) => {
                let (y, stats) = x.batch_norm(eps);
                ctx.stats.borrow_mut().push((*running, stats));
                y
            }
            (NormKind::Batch { running }, Mode::Eval) => {
                let mean = &ctx.running[*running];
                let var = &ctx.running[*running + 1];
                let shift = ctx.graph.constant(mean.map(|m| -m));
                let scale = ctx.graph.constant(var.map(|v| T::one() / (v + eps).sqrt()));
                x.add_channel(shift).mul_channel(scale)
            }
        };
        normed.mul_channel(ctx.var(self.gamma)).add_channel(ctx.var(self.beta))
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn apply<'g, T: Float>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.matmul(ctx.var(self.w)).add_channel(ctx.var(self.b))
    }
}

/// Registers layers and draws their initial values from one seeded stream.
struct Builder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Float> Builder<T> {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore { params: Vec::new(), buffers: Vec::new() }, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, init: Init) -> Conv {
        let std = match init {
            Init::He => (2.0 / (cin * k * k) as f64).sqrt(),
            Init::Small => 0.02,
        };
        let w = self.normal(&[cout, cin, k, k], std);
        let w = self.store.push_param(format!("{name}.weight"), w);
        let bias = bias.then(|| self.store.push_param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv { w, bias, stride, pad }
    }

    fn norm(&mut self, name: &str, c: usize, kind: fn(usize) -> NormKind) -> Norm {
        let gamma = self.store.push_param(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.store.push_param(format!("{name}.beta"), Tensor::zeros(&[c]));
        let running = self.store.buffers.len();
        let kind = kind(running);
        if let NormKind::Batch { .. } = kind {
            self.store.push_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]));
            self.store.push_buffer(format!("{name}.running_var"), Tensor::full(&[c], T::one()));
        }
        Norm { gamma, beta, kind }
    }

    fn instance_norm(&mut self, name: &str, c: usize) -> Norm {
        self.norm(name, c, |_| NormKind::Instance)
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> Norm {
        self.norm(name, c, |running| NormKind::Batch { running })
    }

    fn batch_only_norm(&mut self, name: &str, c: usize) -> Norm {
        self.norm(name, c, |_| NormKind::BatchOnly)
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, init: Init) -> Linear {
        let std = match init {
            Init::He => (1.0 / fin as f64).sqrt(),
            Init::Small => 0.02,
        };
        let w = self.normal(&[fin, fout], std);
        let w = self.store.push_param(format!("{name}.weight"), w);
        let b = self.store.push_param(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Linear { w, b }
    }
}

/// Runs `f` over `[N, ...]` chunks of `input` on fresh graphs and stacks the results.
pub(crate) fn run_chunked<T: Float>(
    input: &Tensor<T>,
    mut f: impl FnMut(&Tensor<T>) -> crate::Result<Tensor<T>>,
) -> crate::Result<Tensor<T>> {
    let n = input.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let count = INFER_CHUNK.min(n - start);
        parts.push(f(&input.slice_rows(start, count))?);
        start += count;
    }
    let inner = parts[0].shape()[1..].to_vec();
    let data: Vec<T> = parts.into_iter().flat_map(Tensor::into_data).collect();
    let mut shape = vec![n];
    shape.extend(inner);
    Ok(Tensor::new(shape, data))
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    /// Checks that every parameter got a nonzero gradient.
    pub fn assert_all_params_live<T: Float>(store: &ParamStore<T>, ctx: &Ctx<'_, T>, grads: &crate::autograd::Gradients<T>) {
        for (p, v) in store.params().iter().zip(ctx.vars()) {
            let g = grads.get(*v).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            let norm: f64 = g.data().iter().map(|x| x.to_f64().unwrap().powi(2)).sum();
            assert!(norm > 0.0, "{} has a zero gradient", p.name);
        }
    }

    pub fn random_tensor<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(rng.random_range(0.0..1.0))).collect())
    }
}
