//! Reconstruction, adversarial and feature-preserving losses.
//!
//! The graph versions in [`ops`] drive training. The functions at module level
//! evaluate the same graphs on plain values and validate their inputs.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Floor inside every logarithm.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_fp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_recon: 10.0, lambda_fp: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_recon", self.lambda_recon), ("lambda_fp", self.lambda_fp)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

pub mod ops {
    use super::LOG_EPS;
    use crate::autograd::Var;
    use crate::data::Label;
    use crate::tensor::{Float, Tensor};

    use super::LossWeights;

    fn log<'g, T: Float>(x: Var<'g, T>) -> Var<'g, T> {
        x.log_clamped(T::lit(LOG_EPS), T::one())
    }

    /// Batch mean of `||generated - original||_2 / sqrt(pixels)`.
    pub fn recon<'g, T: Float>(generated: Var<'g, T>, original: Var<'g, T>) -> Var<'g, T> {
        let shape = generated.shape();
        let pixels: usize = shape[2..].iter().product();
        let sq = generated.sub(original).square().sum_rows();
        sq.scale(T::one() / T::lit(pixels as f64)).sqrt().mean_all()
    }

    /// `-mean(log d_real) - mean(log(1 - d_fake))`.
    pub fn gan_d<'g, T: Float>(d_real: Var<'g, T>, d_fake: Var<'g, T>) -> Var<'g, T> {
        let real = log(d_real).mean_all();
        let fake = log(d_fake.affine(-T::one(), T::one())).mean_all();
        real.add(fake).scale(-T::one())
    }

    /// Non-saturating generator objective `-mean(log d_fake)`.
    pub fn gan_g<'g, T: Float>(d_fake: Var<'g, T>) -> Var<'g, T> {
        log(d_fake).mean_all().scale(-T::one())
    }

    /// Batch mean of `KL(softmax(f_original) || softmax(f_generated))`.
    pub fn feature_preserving<'g, T: Float>(f_original: Var<'g, T>, f_generated: Var<'g, T>) -> Var<'g, T> {
        let p = f_original.softmax_rows();
        let q = f_generated.softmax_rows();
        p.mul(log(p).sub(log(q))).sum_rows().mean_all()
    }

    pub fn total<'g, T: Float>(recon: Var<'g, T>, gan_g: Var<'g, T>, fp: Var<'g, T>, w: &LossWeights) -> Var<'g, T> {
        recon.scale(T::lit(w.lambda_recon)).add(gan_g).add(fp.scale(T::lit(w.lambda_fp)))
    }

    /// Binary cross-entropy of tumor probabilities `[N, 1]`.
    pub fn bce<'g, T: Float>(prob: Var<'g, T>, labels: &[Label]) -> Var<'g, T> {
        let n = labels.len();
        let y: Vec<T> = labels.iter().map(|l| T::lit(l.as_f64())).collect();
        let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
        let g = prob.graph();
        let y = g.constant(Tensor::new(vec![n, 1], y));
        let not_y = g.constant(Tensor::new(vec![n, 1], not_y));
        let pos = log(prob).mul(y);
        let neg = log(prob.affine(-T::one(), T::one())).mul(not_y);
        pos.add(neg).mean_all().scale(-T::one())
    }
}

fn check_probabilities<T: Float>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::ShapeMismatch(format!("{name} is empty")));
    }
    if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x >= T::zero() && **x <= T::one())) {
        return Err(Error::InvalidConfig(format!("{name} contains {bad}, outside [0, 1]")));
    }
    Ok(())
}

fn column<T: Float>(v: &[T]) -> Tensor<T> {
    Tensor::new(vec![v.len(), 1], v.to_vec())
}

pub fn recon_loss<T: Float>(generated: &Tensor<T>, original: &Tensor<T>) -> Result<T> {
    if generated.shape() != original.shape() || generated.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "recon loss needs equal NCHW shapes, got {:?} and {:?}",
            generated.shape(),
            original.shape()
        )));
    }
    let g = Graph::new();
    Ok(ops::recon(g.constant(generated.clone()), g.constant(original.clone())).item())
}

pub fn gan_loss_d<T: Float>(d_real: &[T], d_fake: &[T]) -> Result<T> {
    check_probabilities("d_real", d_real)?;
    check_probabilities("d_fake", d_fake)?;
    let g = Graph::new();
    Ok(ops::gan_d(g.constant(column(d_real)), g.constant(column(d_fake))).item())
}

pub fn gan_loss_g<T: Float>(d_fake: &[T]) -> Result<T> {
    check_probabilities("d_fake", d_fake)?;
    let g = Graph::new();
    Ok(ops::gan_g(g.constant(column(d_fake))).item())
}

/// Inputs are `[N, F]` feature batches.
pub fn feature_preserving_loss<T: Float>(f_original: &Tensor<T>, f_generated: &Tensor<T>) -> Result<T> {
    if f_original.shape() != f_generated.shape() || f_original.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "feature batches must be equal [N, F], got {:?} and {:?}",
            f_original.shape(),
            f_generated.shape()
        )));
    }
    if !f_original.all_finite() || !f_generated.all_finite() {
        return Err(Error::NonFinite("feature vector".into()));
    }
    let g = Graph::new();
    Ok(ops::feature_preserving(g.constant(f_original.clone()), g.constant(f_generated.clone())).item())
}

pub fn total_generator_loss(recon: f64, gan_g: f64, fp: f64, w: &LossWeights) -> f64 {
    w.lambda_recon * recon + gan_g + w.lambda_fp * fp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::networks::{build_classifier, build_discriminator, build_generator, ClassifierConfig, DiscriminatorConfig, GeneratorConfig, Mode};
    use crate::data::Label;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    #[test]
    fn recon_closed_forms() {
        let a = Tensor::new(vec![2, 3, 4, 4], (0..96).map(|i| (i % 7) as f64 / 10.0).collect());
        close(recon_loss(&a, &a).unwrap(), 0.0);
        close(recon_loss(&a.map(|v| v + 0.5), &a).unwrap(), 0.5 * 3f64.sqrt());
        let small = recon_loss(&Tensor::full(&[1, 3, 16, 16], 0.7), &Tensor::full(&[1, 3, 16, 16], 0.4)).unwrap();
        let large = recon_loss(&Tensor::full(&[1, 3, 32, 32], 0.7), &Tensor::full(&[1, 3, 32, 32], 0.4)).unwrap();
        close(small, large);
        assert!(recon_loss(&a, &Tensor::zeros(&[2, 3, 4, 2])).is_err());
    }

    #[test]
    fn gan_closed_forms() {
        close(gan_loss_d(&[0.5], &[0.5]).unwrap(), -2.0 * 0.5f64.ln());
        close(gan_loss_d(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 0.0);
        close(gan_loss_g(&[1.0]).unwrap(), 0.0);
        close(gan_loss_g(&[0.5, 0.5]).unwrap(), 2f64.ln());
        assert!(gan_loss_d(&[1.2], &[0.5]).is_err());
        assert!(gan_loss_g(&[f64::NAN]).is_err());
    }

    #[test]
    fn gan_d_swap_symmetry() {
        let real = [0.9, 0.3, 0.65];
        let fake = [0.2, 0.55, 0.01];
        let swapped_real: Vec<f64> = fake.iter().map(|v| 1.0 - v).collect();
        let swapped_fake: Vec<f64> = real.iter().map(|v| 1.0 - v).collect();
        close(gan_loss_d(&real, &fake).unwrap(), gan_loss_d(&swapped_real, &swapped_fake).unwrap());
    }

    #[test]
    fn gan_g_is_decreasing() {
        let values: Vec<f64> = (1..100).map(|i| gan_loss_g(&[i as f64 / 100.0]).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn feature_preserving_closed_forms() {
        let f = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]);
        close(feature_preserving_loss(&f, &f).unwrap(), 0.0);
        let p = Tensor::new(vec![1, 2], vec![0.5f64.ln(), 0.5f64.ln()]);
        let q = Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]);
        let hand = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        close(hand, 0.5108256237659907);
        close(feature_preserving_loss(&p, &q).unwrap(), hand);
        let reverse = feature_preserving_loss(&q, &p).unwrap();
        assert!((reverse - hand).abs() > 1e-3, "KL must not be symmetrized");
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights { lambda_recon: 1.0, lambda_fp: 1.0 };
        assert_eq!(total_generator_loss(2.0, 3.0, 4.0, &w), 9.0);
        let zero = LossWeights { lambda_recon: 0.0, lambda_fp: 0.0 };
        assert_eq!(total_generator_loss(2.0, 3.0, 4.0, &zero), 3.0);
        let w2 = LossWeights { lambda_recon: 2.0, ..w };
        assert_eq!(total_generator_loss(2.0, 3.0, 4.0, &w2) - total_generator_loss(2.0, 3.0, 4.0, &w), 2.0);
        let g = Graph::new();
        let s = |v: f64| g.constant(Tensor::scalar(v));
        close(ops::total(s(2.0), s(3.0), s(4.0), &w).item(), 9.0);
        assert!(LossWeights { lambda_recon: -1.0, lambda_fp: 0.0 }.validate().is_err());
    }

    #[test]
    fn bce_matches_hand_evaluation() {
        let g = Graph::new();
        let p = g.constant(Tensor::new(vec![2, 1], vec![0.8, 0.3]));
        let loss = ops::bce(p, &[Label::Tumor, Label::Normal]).item();
        close(loss, -(0.8f64.ln() + 0.7f64.ln()) / 2.0);
    }

    /// Relative error `||analytic - numeric|| / ||numeric||` per parameter tensor.
    #[test]
    fn generator_gradient_matches_finite_differences() {
        let gcfg = GeneratorConfig { d: 16, depth: 2, base_width: 4 };
        let mut gen = build_generator::<f64>(&gcfg, 1).unwrap();
        let disc = build_discriminator::<f64>(&DiscriminatorConfig { d: 16, depth: 2, base_width: 4 }, 2).unwrap();
        let cls = build_classifier::<f64>(&ClassifierConfig { d: 16, stages: 2, blocks_per_stage: 1, base_width: 4 }, 3).unwrap();
        let color = crate::networks::test_util::random_tensor::<f64>(&[2, 3, 16, 16], 4);
        let gray = crate::networks::test_util::random_tensor::<f64>(&[2, 1, 16, 16], 5);
        let labels = [Label::Normal, Label::Tumor];
        let w = LossWeights::default();

        let loss_of = |gen: &crate::networks::Generator<f64>, trainable: bool| {
            let graph = Graph::new();
            let gctx = gen.params().bind(&graph, trainable, Mode::Train);
            let dctx = disc.params().bind(&graph, false, Mode::Train);
            let cctx = cls.params().bind(&graph, false, Mode::Eval);
            let x = graph.constant(gray.clone());
            let real = graph.constant(color.clone());
            let fake = gen.forward(&gctx, x).unwrap();
            let d_fake = disc.forward(&dctx, x, fake, &labels).unwrap();
            let f_real = cls.features(&cctx, real).unwrap();
            let f_fake = cls.features(&cctx, fake).unwrap();
            let loss = ops::total(ops::recon(fake, real), ops::gan_g(d_fake), ops::feature_preserving(f_real, f_fake), &w);
            let value = loss.item();
            let grads = trainable.then(|| {
                let g = graph.backward(loss);
                gctx.vars().iter().map(|v| g.get_or_zeros(*v)).collect::<Vec<_>>()
            });
            (value, grads)
        };

        let analytic = loss_of(&gen, true).1.unwrap();
        // Small enough that no ReLU kink falls inside the stencil.
        let h = 1e-6;
        for (pi, grad) in analytic.iter().enumerate() {
            let len = grad.len();
            let mut numeric = vec![0.0; len];
            for j in 0..len {
                let orig = gen.params().params()[pi].value.data()[j];
                gen.params_mut().params_mut()[pi].value.data_mut()[j] = orig + h;
                let plus = loss_of(&gen, false).0;
                gen.params_mut().params_mut()[pi].value.data_mut()[j] = orig - h;
                let minus = loss_of(&gen, false).0;
                gen.params_mut().params_mut()[pi].value.data_mut()[j] = orig;
                numeric[j] = (plus - minus) / (2.0 * h);
            }
            let diff: f64 = grad.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
            let name = &gen.params().params()[pi].name;
            assert!(diff <= 1e-2 * norm.max(1e-8), "{name}: relative error {}", diff / norm);
        }
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let mut draw = || Tensor::new(vec![1, 6], (0..6).map(|_| rng.random_range(-5.0..5.0)).collect());
            let (p, q) = (draw(), draw());
            assert!(feature_preserving_loss(&p, &q).unwrap() >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn losses_are_finite_and_nonnegative(
            real in prop::collection::vec(0.0f64..=1.0, 1..8),
            fake in prop::collection::vec(0.0f64..=1.0, 1..8),
            f in prop::collection::vec(-20.0f64..20.0, 8),
            h in prop::collection::vec(-20.0f64..20.0, 8),
        ) {
            let d = gan_loss_d(&real, &fake).unwrap();
            let g = gan_loss_g(&fake).unwrap();
            let fp = feature_preserving_loss(&Tensor::new(vec![2, 4], f), &Tensor::new(vec![2, 4], h)).unwrap();
            for v in [d, g, fp] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }

        #[test]
        fn recon_triangle_inequality(
            a in prop::collection::vec(0.0f64..=1.0, 48),
            b in prop::collection::vec(0.0f64..=1.0, 48),
            c in prop::collection::vec(0.0f64..=1.0, 48),
        ) {
            let t = |v: Vec<f64>| Tensor::new(vec![1, 3, 4, 4], v);
            let (a, b, c) = (t(a), t(b), t(c));
            let ac = recon_loss(&a, &c).unwrap();
            let ab = recon_loss(&a, &b).unwrap();
            let bc = recon_loss(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
