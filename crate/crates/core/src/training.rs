//! Classifier training and adversarial stain-style-transfer training.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::colorops::to_gray;
use crate::data::{batch_to_tiles, color_batch, derive_seed, gray_batch, ColorTile, Dataset, GrayTile, Label};
use crate::error::{Error, Result};
use crate::evaluation::{roc_auc, score_tiles};
use crate::losses::{ops, LossWeights};
use crate::networks::{
    build_classifier, build_discriminator, build_generator, save_checkpoint, Classifier, ClassifierConfig, Ctx,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, INFER_CHUNK,
};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Below this the generated colors are considered collapsed.
pub const COLLAPSE_WARN_STD: f64 = 1e-3;

const INIT_STREAM: u64 = 101;
const SHUFFLE_STREAM: u64 = 102;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub generator_depth: usize,
    pub generator_width: usize,
    pub discriminator_depth: usize,
    pub discriminator_width: usize,
    pub classifier_stages: usize,
    pub classifier_blocks: usize,
    pub classifier_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            generator_depth: 3,
            generator_width: 8,
            discriminator_depth: 3,
            discriminator_width: 16,
            classifier_stages: 3,
            classifier_blocks: 2,
            classifier_width: 16,
        }
    }
}

impl Architecture {
    pub fn generator(&self, d: usize) -> GeneratorConfig {
        GeneratorConfig { d, depth: self.generator_depth, base_width: self.generator_width }
    }

    pub fn discriminator(&self, d: usize) -> DiscriminatorConfig {
        DiscriminatorConfig { d, depth: self.discriminator_depth, base_width: self.discriminator_width }
    }

    pub fn classifier(&self, d: usize) -> ClassifierConfig {
        ClassifierConfig {
            d,
            stages: self.classifier_stages,
            blocks_per_stage: self.classifier_blocks,
            base_width: self.classifier_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub d_steps_per_g_step: usize,
    /// Caps the number of batches per epoch.
    pub max_steps_per_epoch: Option<usize>,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    /// Settings for generator and discriminator training.
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 2e-3,
            adam_betas: [0.5, 0.999],
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_dir: None,
            d_steps_per_g_step: 1,
            max_steps_per_epoch: None,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn classifier_default() -> Self {
        Self { epochs: 3, batch_size: 32, learning_rate: 1e-3, adam_betas: [0.9, 0.999], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas));
        }
        if self.d_steps_per_g_step == 0 {
            return bad("d_steps_per_g_step must be positive".into());
        }
        if self.max_steps_per_epoch == Some(0) {
            return bad("max_steps_per_epoch must be positive".into());
        }
        self.loss_weights.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `self` with the fields present in a JSON object replaced, recursively.
    pub fn overlay_json(&self, text: &str) -> Result<Self> {
        fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
            match (base, top) {
                (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
                    for (k, v) in t {
                        match b.get_mut(&k) {
                            Some(slot) => merge(slot, v),
                            None => {
                                b.insert(k, v);
                            }
                        }
                    }
                }
                (slot, v) => *slot = v,
            }
        }
        let top: serde_json::Value = serde_json::from_str(text)?;
        if !top.is_object() {
            return Err(Error::InvalidConfig("training config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, top);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn betas(&self) -> (f64, f64) {
        (self.adam_betas[0], self.adam_betas[1])
    }

    fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, SHUFFLE_STREAM, epoch as u64)));
        let mut out: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if let Some(max) = self.max_steps_per_epoch {
            out.truncate(max);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training losses over the epoch's batches; `val_`-prefixed entries are validation means.
    pub losses: BTreeMap<String, f64>,
    pub val_metric_name: String,
    pub val_metric: f64,
    /// Std across validation tiles of generated channel means, averaged over channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse_std: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }

    /// The history with wall-clock times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.records.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        h
    }
}

fn grads_of<T: crate::tensor::Float>(ctx: &Ctx<'_, T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
    ctx.vars().iter().map(|v| grads.get_or_zeros(*v)).collect()
}

fn check_finite(value: f32, what: &str, epoch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value as f64)
    } else {
        Err(Error::Diverged { epoch, message: format!("{what} is {value}") })
    }
}

fn same_side(train: &Dataset, val: &Dataset) -> Result<usize> {
    if train.d() != val.d() {
        return Err(Error::ShapeMismatch(format!("train tiles are {} wide, validation tiles {}", train.d(), val.d())));
    }
    Ok(train.d())
}

fn tiles_of(ds: &Dataset) -> Vec<ColorTile> {
    ds.tiles().iter().map(|t| t.tile.clone()).collect()
}

fn save_artifacts<F>(cfg: &TrainConfig, history: &TrainHistory, save: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save(dir)?;
        history.write_jsonl(&dir.join("history.jsonl"))?;
    }
    Ok(())
}

/// Trains a classifier with binary cross-entropy and keeps the parameters with the best validation AUC.
pub fn train_classifier(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(Classifier<f32>, TrainHistory)> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::NoTraining("epochs = 0".into()));
    }
    let d = same_side(train, val)?;
    let mut model = build_classifier::<f32>(&cfg.architecture.classifier(d), derive_seed(cfg.seed, INIT_STREAM, 0))?;
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.betas());
    let val_tiles = tiles_of(val);
    let val_labels = val.labels();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Classifier<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let batches = cfg.batches(train.len(), epoch);
        for idx in &batches {
            let x = color_batch(idx.iter().map(|&i| &train.tiles()[i].tile));
            let labels: Vec<Label> = idx.iter().map(|&i| train.tiles()[i].label).collect();
            let graph = Graph::new();
            let ctx = model.params().bind(&graph, true, Mode::Train);
            let (_, prob) = model.forward(&ctx, graph.constant(x))?;
            let loss = ops::bce(prob, &labels);
            loss_sum += check_finite(loss.item(), "classifier loss", epoch)?;
            let grads = grads_of(&ctx, &graph.backward(loss));
            let stats = ctx.take_batch_stats();
            adam.step(model.params_mut(), &grads);
            model.params_mut().update_running(&stats);
        }
        let auc = roc_auc(&score_tiles(&model, &val_tiles)?, &val_labels)?;
        log::info!("classifier epoch {epoch}: loss {:.4}, val AUC {auc:.4}", loss_sum / batches.len() as f64);
        history.records.push(EpochRecord {
            epoch,
            losses: BTreeMap::from([("bce".to_string(), loss_sum / batches.len() as f64)]),
            val_metric_name: "val_auc".into(),
            val_metric: auc,
            collapse_std: None,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| auc > *b) {
            best = Some((auc, model.clone()));
        }
    }
    let model = best.expect("at least one epoch").1;
    save_artifacts(cfg, &history, |dir| save_checkpoint(&model, &dir.join("classifier.ckpt")))?;
    Ok((model, history))
}

/// Generator output for luma images of `tiles`.
pub fn apply_sst_batch(g: &Generator<f32>, tiles: &[ColorTile]) -> Result<Vec<ColorTile>> {
    let d = g.config().d;
    if let Some(t) = tiles.iter().find(|t| t.d() != d) {
        return Err(Error::ShapeMismatch(format!("tile side {} does not match the generator's {d}", t.d())));
    }
    if tiles.is_empty() {
        return Ok(Vec::new());
    }
    let gray: Vec<GrayTile> = tiles.iter().map(to_gray).collect();
    batch_to_tiles(&g.generate(&gray_batch(&gray))?)
}

/// `zeta(G(tile))`.
pub fn apply_sst(g: &Generator<f32>, tile: &ColorTile) -> Result<ColorTile> {
    Ok(apply_sst_batch(g, std::slice::from_ref(tile))?.remove(0))
}

/// Mean over channels of the std across tiles of each tile's channel mean.
pub fn collapse_statistic(tiles: &[ColorTile]) -> f64 {
    if tiles.is_empty() {
        return 0.0;
    }
    let means: Vec<[f64; 3]> = tiles.iter().map(ColorTile::channel_means).collect();
    let n = means.len() as f64;
    (0..3)
        .map(|c| {
            let mu = means.iter().map(|m| m[c]).sum::<f64>() / n;
            (means.iter().map(|m| (m[c] - mu).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum::<f64>()
        / 3.0
}

struct SstBatch {
    gray: Tensor<f32>,
    color: Tensor<f32>,
    labels: Vec<Label>,
    features: Tensor<f32>,
}

fn sst_batch(ds: &Dataset, grays: &[GrayTile], features: &Tensor<f32>, idx: &[usize]) -> SstBatch {
    let rows: Vec<Tensor<f32>> = idx.iter().map(|&i| features.slice_rows(i, 1)).collect();
    let f = rows.iter().flat_map(|r| r.data().to_vec()).collect();
    SstBatch {
        gray: gray_batch(idx.iter().map(|&i| &grays[i])),
        color: color_batch(idx.iter().map(|&i| &ds.tiles()[i].tile)),
        labels: idx.iter().map(|&i| ds.tiles()[i].label).collect(),
        features: Tensor::new(vec![idx.len(), features.shape()[1]], f),
    }
}

struct ValLosses {
    recon: f64,
    gan_g: f64,
    fp: f64,
    collapse: f64,
}

fn validate_sst(
    gen: &Generator<f32>,
    disc: &Discriminator<f32>,
    classifier: &Classifier<f32>,
    val: &Dataset,
    grays: &[GrayTile],
    features: &Tensor<f32>,
) -> Result<ValLosses> {
    let (mut recon, mut gan_g, mut fp) = (0.0, 0.0, 0.0);
    let mut generated = Vec::with_capacity(val.len());
    let idx: Vec<usize> = (0..val.len()).collect();
    for chunk in idx.chunks(INFER_CHUNK) {
        let b = sst_batch(val, grays, features, chunk);
        let fake = gen.generate(&b.gray)?;
        let graph = Graph::new();
        let fv = graph.constant(fake.clone());
        let w = chunk.len() as f64;
        recon += w * ops::recon(fv, graph.constant(b.color)).item() as f64;
        let scores = disc.score(&b.gray, &fake, &b.labels)?;
        gan_g += w * ops::gan_g(graph.constant(Tensor::new(vec![chunk.len(), 1], scores))).item() as f64;
        let f_fake = graph.constant(classifier.feature_batch(&fake)?);
        fp += w * ops::feature_preserving(graph.constant(b.features), f_fake).item() as f64;
        generated.extend(batch_to_tiles(&fake)?);
    }
    let n = val.len() as f64;
    Ok(ValLosses { recon: recon / n, gan_g: gan_g / n, fp: fp / n, collapse: collapse_statistic(&generated) })
}

/// Learns a generator that recolors luma images of `train` back into its stain style.
///
/// The classifier is only read. The returned generator has the lowest weighted
/// validation loss over all epochs.
pub fn train_sst(
    train: &Dataset,
    val: &Dataset,
    classifier: &Classifier<f32>,
    cfg: &TrainConfig,
) -> Result<(Generator<f32>, TrainHistory)> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::NoTraining("epochs = 0".into()));
    }
    let d = same_side(train, val)?;
    if classifier.config().d != d {
        return Err(Error::ShapeMismatch(format!(
            "classifier expects {}-pixel tiles, datasets have {d}",
            classifier.config().d
        )));
    }
    let w = cfg.loss_weights;
    let mut gen = build_generator::<f32>(&cfg.architecture.generator(d), derive_seed(cfg.seed, INIT_STREAM, 1))?;
    let mut disc = build_discriminator::<f32>(&cfg.architecture.discriminator(d), derive_seed(cfg.seed, INIT_STREAM, 2))?;
    let mut g_opt = Adam::new(gen.params(), cfg.learning_rate, cfg.betas());
    let mut d_opt = Adam::new(disc.params(), cfg.learning_rate, cfg.betas());

    let train_gray: Vec<GrayTile> = train.tiles().iter().map(|t| to_gray(&t.tile)).collect();
    let val_gray: Vec<GrayTile> = val.tiles().iter().map(|t| to_gray(&t.tile)).collect();
    // The classifier is frozen, so features of the real tiles never change.
    let train_features = classifier.feature_batch(&color_batch(train.tiles().iter().map(|t| &t.tile)))?;
    let val_features = classifier.feature_batch(&color_batch(val.tiles().iter().map(|t| &t.tile)))?;

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Generator<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut sums = BTreeMap::<String, f64>::new();
        let batches = cfg.batches(train.len(), epoch);
        for idx in &batches {
            let b = sst_batch(train, &train_gray, &train_features, idx);
            let graph = Graph::new();
            let gctx = gen.params().bind(&graph, true, Mode::Train);
            let x = graph.constant(b.gray.clone());
            let fake = gen.forward(&gctx, x)?;

            for _ in 0..cfg.d_steps_per_g_step {
                let dg = Graph::new();
                let dctx = disc.params().bind(&dg, true, Mode::Train);
                let dx = dg.constant(b.gray.clone());
                let real = disc.forward(&dctx, dx, dg.constant(b.color.clone()), &b.labels)?;
                let faked = disc.forward(&dctx, dx, dg.constant((*fake.value()).clone()), &b.labels)?;
                let d_loss = ops::gan_d(real, faked);
                *sums.entry("gan_d".into()).or_default() += check_finite(d_loss.item(), "discriminator loss", epoch)?;
                let grads = grads_of(&dctx, &dg.backward(d_loss));
                d_opt.step(disc.params_mut(), &grads);
            }

            let dctx = disc.params().bind(&graph, false, Mode::Train);
            let d_fake = disc.forward(&dctx, x, fake, &b.labels)?;
            let gan_g = ops::gan_g(d_fake);
            let recon = ops::recon(fake, graph.constant(b.color.clone()));
            let real_features = graph.constant(b.features.clone());
            let fp = if w.lambda_fp > 0.0 {
                let cctx = classifier.params().bind(&graph, false, Mode::Eval);
                ops::feature_preserving(real_features, classifier.features(&cctx, fake)?)
            } else {
                // Logged only; keep it out of the backward pass.
                let detached = graph.constant(classifier.feature_batch(&fake.value())?);
                ops::feature_preserving(real_features, detached)
            };
            let total = ops::total(recon, gan_g, fp, &w);
            let total_value = check_finite(total.item(), "generator loss", epoch)?;
            for (name, v) in [("recon", recon.item()), ("gan_g", gan_g.item()), ("fp", fp.item())] {
                *sums.entry(name.into()).or_default() += check_finite(v, name, epoch)?;
            }
            *sums.entry("total".into()).or_default() += total_value;
            let grads = grads_of(&gctx, &graph.backward(total));
            g_opt.step(gen.params_mut(), &grads);
        }
        sums.entry("gan_d".into()).and_modify(|v| *v /= cfg.d_steps_per_g_step as f64);
        let mut losses: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / batches.len() as f64)).collect();

        let v = validate_sst(&gen, &disc, classifier, val, &val_gray, &val_features)?;
        losses.extend([("val_recon".into(), v.recon), ("val_gan_g".into(), v.gan_g), ("val_fp".into(), v.fp)]);
        let val_total = w.lambda_recon * v.recon + v.gan_g + w.lambda_fp * v.fp;
        if !val_total.is_finite() {
            return Err(Error::Diverged { epoch, message: format!("validation loss is {val_total}") });
        }
        log::info!(
            "sst epoch {epoch}: recon {:.4} gan_g {:.4} gan_d {:.4} fp {:.4} | val total {val_total:.4} recon {:.4} | collapse std {:.5}",
            losses["recon"], losses["gan_g"], losses["gan_d"], losses["fp"], v.recon, v.collapse
        );
        if v.collapse < COLLAPSE_WARN_STD {
            log::warn!("epoch {epoch}: generated color diversity {:.2e} suggests mode collapse", v.collapse);
        }
        history.records.push(EpochRecord {
            epoch,
            losses,
            val_metric_name: "val_total_loss".into(),
            val_metric: val_total,
            collapse_std: Some(v.collapse),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| val_total < *b) {
            best = Some((val_total, gen.clone()));
        }
    }
    let gen = best.expect("at least one epoch").1;
    save_artifacts(cfg, &history, |dir| {
        save_checkpoint(&gen, &dir.join("generator.ckpt"))?;
        save_checkpoint(&disc, &dir.join("discriminator.ckpt"))
    })?;
    Ok((gen, history))
}
