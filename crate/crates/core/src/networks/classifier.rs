//! Residual tumor classifier whose pooled activations double as the feature extractor.

use serde::{Deserialize, Serialize};

use super::{run_chunked, Builder, Conv, Ctx, Init, Linear, Mode, Norm, ParamStore};
use crate::autograd::{Graph, Var};
use crate::data::{color_batch, ColorTile};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub d: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub base_width: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.blocks_per_stage == 0 || self.base_width == 0 {
            return Err(Error::InvalidConfig("classifier stages, blocks and width must be positive".into()));
        }
        // The stem and every stage after the first halve the resolution.
        if self.d == 0 || self.d % (1 << self.stages) != 0 {
            return Err(Error::InvalidConfig(format!(
                "tile side {} is not divisible by 2^{}",
                self.d, self.stages
            )));
        }
        Ok(())
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.base_width << (self.stages - 1)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    shortcut: Option<(Conv, Norm)>,
}

impl BasicBlock {
    fn new<T: Float>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                b.conv(&format!("{name}.short.conv"), cin, cout, 1, stride, 0, false, Init::He),
                b.batch_norm(&format!("{name}.short.norm"), cout),
            )
        });
        Self {
            conv1: b.conv(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false, Init::He),
            norm1: b.batch_norm(&format!("{name}.norm1"), cout),
            conv2: b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false, Init::He),
            norm2: b.batch_norm(&format!("{name}.norm2"), cout),
            shortcut,
        }
    }

    fn apply<'g, T: Float>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.norm1.apply(ctx, self.conv1.apply(ctx, x)).relu();
        let h = self.norm2.apply(ctx, self.conv2.apply(ctx, h));
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.apply(ctx, conv.apply(ctx, x)),
            None => x,
        };
        h.add(skip).relu()
    }
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    stem_norm: Norm,
    blocks: Vec<BasicBlock>,
    head: Linear,
}

/// Maps `[N, 3, d, d]` tiles to pooled features `[N, F]` and tumor probabilities `[N, 1]`.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    config: ClassifierConfig,
    store: ParamStore<T>,
    layout: Layout,
}

pub fn build_classifier<T: Float>(config: &ClassifierConfig, seed: u64) -> Result<Classifier<T>> {
    config.validate()?;
    let mut b = Builder::new(seed);
    let w0 = config.base_width;
    let stem = b.conv("stem.conv", 3, w0, 3, 2, 1, false, Init::He);
    let stem_norm = b.batch_norm("stem.norm", w0);
    let mut blocks = Vec::new();
    let mut cin = w0;
    for s in 0..config.stages {
        let cout = w0 << s;
        for k in 0..config.blocks_per_stage {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            blocks.push(BasicBlock::new(&mut b, &format!("stage{s}.block{k}"), cin, cout, stride));
            cin = cout;
        }
    }
    let head = b.linear("head", cin, 1, Init::He);
    Ok(Classifier { config: config.clone(), store: b.store, layout: Layout { stem, stem_norm, blocks, head } })
}

impl<T: Float> Classifier<T> {
    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub(crate) fn with_params(config: &ClassifierConfig, store: ParamStore<T>) -> Result<Self> {
        let mut c = build_classifier(config, 0)?;
        super::checkpoint::replace_store(&mut c.store, store)?;
        Ok(c)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.config.d;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != d || shape[3] != d {
            return Err(Error::ShapeMismatch(format!("classifier expects [N, 3, {d}, {d}], got {shape:?}")));
        }
        Ok(())
    }

    /// Pooled features of the last stage, differentiable in both parameters and input.
    pub fn features<'g>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(&x.shape())?;
        let l = &self.layout;
        let mut h = l.stem_norm.apply(ctx, l.stem.apply(ctx, x)).relu();
        for block in &l.blocks {
            h = block.apply(ctx, h);
        }
        Ok(h.global_avg_pool())
    }

    /// `(features [N, F], probability [N, 1])`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let f = self.features(ctx, x)?;
        Ok((f, self.layout.head.apply(ctx, f).sigmoid()))
    }

    /// Tumor probabilities of an `[N, 3, d, d]` batch in evaluation mode.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(batch.shape())?;
        let probs = run_chunked(batch, |chunk| {
            let graph = Graph::new();
            let ctx = self.store.bind(&graph, false, Mode::Eval);
            let (_, p) = self.forward(&ctx, graph.constant(chunk.clone()))?;
            Ok((*p.value()).clone())
        })?;
        Ok(probs.into_data())
    }

    /// Evaluation-mode features of an `[N, 3, d, d]` batch.
    pub fn feature_batch(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        run_chunked(batch, |chunk| {
            let graph = Graph::new();
            let ctx = self.store.bind(&graph, false, Mode::Eval);
            Ok((*self.features(&ctx, graph.constant(chunk.clone()))?.value()).clone())
        })
    }
}

/// Feature vectors `[N, F]` of `tiles`.
pub fn extract_features(c: &Classifier<f32>, tiles: &[ColorTile]) -> Result<Tensor<f32>> {
    if tiles.is_empty() {
        return Ok(Tensor::zeros(&[0, c.config.feature_dim()]));
    }
    c.feature_batch(&color_batch(tiles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::test_util::{assert_all_params_live, random_tensor};

    fn config(d: usize) -> ClassifierConfig {
        ClassifierConfig { d, stages: 3, blocks_per_stage: 1, base_width: 4 }
    }

    #[test]
    fn probabilities_and_feature_width() {
        let c = build_classifier::<f32>(&config(32), 1).unwrap();
        let x = random_tensor(&[3, 3, 32, 32], 2);
        let p = c.predict(&x).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(c.feature_batch(&x).unwrap().shape(), &[3, 16]);
    }

    #[test]
    fn identical_tiles_identical_outputs() {
        let c = build_classifier::<f32>(&config(16), 3).unwrap();
        let t = ColorTile::from_fn(16, |y, x| [y as f32 / 16.0, x as f32 / 16.0, 0.5]).unwrap();
        let f = extract_features(&c, &[t.clone(), t]).unwrap();
        assert_eq!(f.slice_rows(0, 1).data(), f.slice_rows(1, 1).data());
    }

    #[test]
    fn black_and_white_tiles_differ() {
        let c = build_classifier::<f32>(&config(16), 4).unwrap();
        let f = extract_features(&c, &[ColorTile::uniform(16, [0.0; 3]).unwrap(), ColorTile::uniform(16, [1.0; 3]).unwrap()])
            .unwrap();
        assert_ne!(f.slice_rows(0, 1).data(), f.slice_rows(1, 1).data());
    }

    #[test]
    fn rejects_indivisible_side() {
        assert!(build_classifier::<f32>(&config(12), 0).is_err());
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut c = build_classifier::<f64>(&config(16), 5).unwrap();
        // Non-trivial running statistics so evaluation mode is exercised.
        for (i, b) in c.params_mut().buffers.iter_mut().enumerate() {
            b.value = b.value.map(|v| v + 0.1 * (i % 3) as f64);
        }
        let x0 = random_tensor::<f64>(&[1, 3, 16, 16], 6);
        let coord = 5;
        let eval = |x: &Tensor<f64>| c.feature_batch(x).unwrap().data()[coord];
        let graph = Graph::new();
        let ctx = c.params().bind(&graph, false, Mode::Eval);
        let x = graph.param(x0.clone());
        let f = c.features(&ctx, x).unwrap();
        let pick = graph.constant(Tensor::new(vec![1, 16], (0..16).map(|j| if j == coord { 1.0 } else { 0.0 }).collect()));
        let grads = graph.backward(f.mul(pick).sum_rows());
        let analytic = grads.get(x).unwrap();
        let h = 1e-5;
        for j in (0..x0.len()).step_by(37) {
            let mut plus = x0.clone();
            plus.data_mut()[j] += h;
            let mut minus = x0.clone();
            minus.data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            assert!((a - numeric).abs() <= 1e-3 * numeric.abs().max(1e-3), "pixel {j}: {a} vs {numeric}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let c = build_classifier::<f64>(&ClassifierConfig { d: 16, stages: 2, blocks_per_stage: 2, base_width: 4 }, 6).unwrap();
        let graph = Graph::new();
        let ctx = c.params().bind(&graph, true, Mode::Train);
        let x = graph.constant(random_tensor(&[4, 3, 16, 16], 7));
        let (f, p) = c.forward(&ctx, x).unwrap();
        let wf = graph.constant(random_tensor(&[4, 8], 8));
        let y = f.mul(wf).mean_all().add(p.mean_all());
        assert_all_params_live(c.params(), &ctx, &graph.backward(y));
        assert_eq!(ctx.take_batch_stats().len(), c.params().buffers().len() / 2);
    }
}
