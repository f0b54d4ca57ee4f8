//! Conditional discriminator: strided convolutions over (gray, color, label plane).

use serde::{Deserialize, Serialize};

use super::{Builder, Conv, Ctx, Init, Linear, Mode, Norm, ParamStore};
use crate::autograd::{Graph, Var};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub d: usize,
    /// Number of stride-2 convolutions.
    pub depth: usize,
    pub base_width: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 {
            return Err(Error::InvalidConfig("discriminator depth and width must be positive".into()));
        }
        if self.d == 0 || self.d % (1 << self.depth) != 0 {
            return Err(Error::InvalidConfig(format!(
                "tile side {} is not divisible by 2^{}",
                self.d, self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    convs: Vec<Conv>,
    /// No normalization on the first layer.
    norms: Vec<Option<Norm>>,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    store: ParamStore<T>,
    layout: Layout,
}

pub fn build_discriminator<T: Float>(config: &DiscriminatorConfig, seed: u64) -> Result<Discriminator<T>> {
    config.validate()?;
    let mut b = Builder::new(seed);
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    let mut cin = 5;
    for i in 0..config.depth {
        let cout = config.base_width << i;
        convs.push(b.conv(&format!("conv{i}"), cin, cout, 4, 2, 1, i == 0, Init::Small));
        norms.push((i > 0).then(|| b.batch_only_norm(&format!("norm{i}"), cout)));
        cin = cout;
    }
    let side = config.d >> config.depth;
    let head = b.linear("head", cin * side * side, 1, Init::Small);
    Ok(Discriminator { config: config.clone(), store: b.store, layout: Layout { convs, norms, head } })
}

impl<T: Float> Discriminator<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub(crate) fn with_params(config: &DiscriminatorConfig, store: ParamStore<T>) -> Result<Self> {
        let mut d = build_discriminator(config, 0)?;
        super::checkpoint::replace_store(&mut d.store, store)?;
        Ok(d)
    }

    /// Probability `[N, 1]` that each `(gray, color)` pair is a real tile of class `labels[i]`.
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g, T>,
        gray: Var<'g, T>,
        color: Var<'g, T>,
        labels: &[Label],
    ) -> Result<Var<'g, T>> {
        let d = self.config.d;
        let (gs, cs) = (gray.shape(), color.shape());
        let n = labels.len();
        if gs != [n, 1, d, d] || cs != [n, 3, d, d] {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects [{n}, 1, {d}, {d}] and [{n}, 3, {d}, {d}], got {gs:?} and {cs:?}"
            )));
        }
        let plane: Vec<T> = labels.iter().flat_map(|l| std::iter::repeat_n(T::lit(l.as_f64()), d * d)).collect();
        let plane = ctx.graph.constant(Tensor::new(vec![n, 1, d, d], plane));
        let mut h = Var::concat_channels(&[gray, color, plane]);
        let leak = T::lit(LEAK);
        for (conv, norm) in self.layout.convs.iter().zip(&self.layout.norms) {
            h = conv.apply(ctx, h);
            if let Some(norm) = norm {
                h = norm.apply(ctx, h);
            }
            h = h.leaky_relu(leak);
        }
        let flat: usize = h.shape()[1..].iter().product();
        Ok(self.layout.head.apply(ctx, h.reshape(&[n, flat])).sigmoid())
    }

    /// Inference on one batch.
    pub fn score(&self, gray: &Tensor<T>, color: &Tensor<T>, labels: &[Label]) -> Result<Vec<T>> {
        let graph = Graph::new();
        let ctx = self.store.bind(&graph, false, Mode::Eval);
        let out = self.forward(&ctx, graph.constant(gray.clone()), graph.constant(color.clone()), labels)?;
        Ok(out.value().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::test_util::{assert_all_params_live, random_tensor};

    fn config() -> DiscriminatorConfig {
        DiscriminatorConfig { d: 16, depth: 3, base_width: 4 }
    }

    #[test]
    fn scores_are_probabilities() {
        let d = build_discriminator::<f32>(&config(), 1).unwrap();
        let s = d
            .score(&random_tensor(&[3, 1, 16, 16], 1), &random_tensor(&[3, 3, 16, 16], 2), &[Label::Normal, Label::Tumor, Label::Tumor])
            .unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn label_changes_output() {
        let d = build_discriminator::<f64>(&config(), 2).unwrap();
        let gray = random_tensor(&[1, 1, 16, 16], 3);
        let color = random_tensor(&[1, 3, 16, 16], 4);
        let a = d.score(&gray, &color, &[Label::Normal]).unwrap()[0];
        let b = d.score(&gray, &color, &[Label::Tumor]).unwrap()[0];
        assert_ne!(a, b);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = build_discriminator::<f32>(&config(), 7).unwrap();
        let b = build_discriminator::<f32>(&config(), 7).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(build_discriminator::<f32>(&DiscriminatorConfig { d: 20, depth: 3, base_width: 4 }, 0).is_err());
        let d = build_discriminator::<f32>(&config(), 1).unwrap();
        let res = d.score(&random_tensor(&[1, 1, 16, 16], 1), &random_tensor(&[1, 3, 8, 8], 2), &[Label::Tumor]);
        assert!(matches!(res, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let d = build_discriminator::<f64>(&config(), 3).unwrap();
        let graph = Graph::new();
        let ctx = d.params().bind(&graph, true, Mode::Train);
        let gray = graph.constant(random_tensor(&[2, 1, 16, 16], 5));
        let color = graph.constant(random_tensor(&[2, 3, 16, 16], 6));
        let w = graph.constant(Tensor::new(vec![2, 1], vec![1.0, -0.5]));
        let y = d.forward(&ctx, gray, color, &[Label::Normal, Label::Tumor]).unwrap().mul(w).mean_all();
        assert_all_params_live(d.params(), &ctx, &graph.backward(y));
    }
}
