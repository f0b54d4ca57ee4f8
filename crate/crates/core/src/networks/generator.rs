//! Encoder-decoder colorization network with residual blocks and additive long skips.
//! The output is a residual on the gray input in logit space, so an untrained
//! generator returns the gray tile and per-tile brightness survives instance norm.

use serde::{Deserialize, Serialize};

use super::{run_chunked, Builder, Conv, Ctx, Init, Mode, Norm, ParamStore};
use crate::autograd::{Graph, Var};
use crate::data::{gray_batch, ColorTile, GrayTile};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Gray values are clamped to `[GRAY_CLAMP, 1 - GRAY_CLAMP]` before taking the logit.
const GRAY_CLAMP: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d: usize,
    /// Number of down/upsampling stages.
    pub depth: usize,
    pub base_width: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 {
            return Err(Error::InvalidConfig("generator depth and width must be positive".into()));
        }
        if self.d == 0 || self.d % (1 << self.depth) != 0 {
            return Err(Error::InvalidConfig(format!(
                "tile side {} is not divisible by 2^{}",
                self.d, self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// `relu(x + norm(conv(relu(norm(conv(x))))))`.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

impl ResBlock {
    fn new<T: Float>(b: &mut Builder<T>, name: &str, c: usize) -> Self {
        Self {
            conv1: b.conv(&format!("{name}.conv1"), c, c, 3, 1, 1, false, Init::He),
            norm1: b.instance_norm(&format!("{name}.norm1"), c),
            conv2: b.conv(&format!("{name}.conv2"), c, c, 3, 1, 1, false, Init::He),
            norm2: b.instance_norm(&format!("{name}.norm2"), c),
        }
    }

    fn apply<'g, T: Float>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.norm1.apply(ctx, self.conv1.apply(ctx, x)).relu();
        let h = self.norm2.apply(ctx, self.conv2.apply(ctx, h));
        h.add(x).relu()
    }
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    norm: Norm,
}

impl ConvNorm {
    fn apply<'g, T: Float>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.norm.apply(ctx, self.conv.apply(ctx, x)).relu()
    }
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvNorm,
    enc: Vec<ResBlock>,
    down: Vec<ConvNorm>,
    bridge: ResBlock,
    /// Channel reduction at the coarse resolution, applied before upsampling.
    up: Vec<ConvNorm>,
    dec: Vec<ResBlock>,
    out: Conv,
}

/// Maps `[N, 1, d, d]` gray batches to `[N, 3, d, d]` color batches in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    store: ParamStore<T>,
    layout: Layout,
}

fn conv_norm<T: Float>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, stride: usize) -> ConvNorm {
    ConvNorm {
        conv: b.conv(&format!("{name}.conv"), cin, cout, 3, stride, 1, false, Init::He),
        norm: b.instance_norm(&format!("{name}.norm"), cout),
    }
}

pub fn build_generator<T: Float>(config: &GeneratorConfig, seed: u64) -> Result<Generator<T>> {
    config.validate()?;
    let mut b = Builder::new(seed);
    let stem = conv_norm(&mut b, "stem", 1, config.width(0), 1);
    let mut enc = Vec::new();
    let mut down = Vec::new();
    for level in 0..config.depth {
        enc.push(ResBlock::new(&mut b, &format!("enc{level}"), config.width(level)));
        down.push(conv_norm(&mut b, &format!("down{level}"), config.width(level), config.width(level + 1), 2));
    }
    let bridge = ResBlock::new(&mut b, "bridge", config.width(config.depth));
    let mut up = Vec::new();
    let mut dec = Vec::new();
    for level in (0..config.depth).rev() {
        up.push(conv_norm(&mut b, &format!("up{level}"), config.width(level + 1), config.width(level), 1));
        dec.push(ResBlock::new(&mut b, &format!("dec{level}"), config.width(level)));
    }
    let out = b.conv("out", config.width(0) + 1, 3, 1, 1, 0, true, Init::Small);
    Ok(Generator { config: config.clone(), store: b.store, layout: Layout { stem, enc, down, bridge, up, dec, out } })
}

impl<T: Float> Generator<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub(crate) fn with_params(config: &GeneratorConfig, store: ParamStore<T>) -> Result<Self> {
        let mut g = build_generator(config, 0)?;
        super::checkpoint::replace_store(&mut g.store, store)?;
        Ok(g)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.config.d;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != d || shape[3] != d {
            return Err(Error::ShapeMismatch(format!("generator expects [N, 1, {d}, {d}], got {shape:?}")));
        }
        Ok(())
    }

    /// Differentiable forward pass; `ctx` must be bound from this generator's store.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, T>, gray: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(&gray.shape())?;
        let l = &self.layout;
        let mut h = l.stem.apply(ctx, gray);
        let mut skips = Vec::with_capacity(self.config.depth);
        for (block, down) in l.enc.iter().zip(&l.down) {
            h = block.apply(ctx, h);
            skips.push(h);
            h = down.apply(ctx, h);
        }
        h = l.bridge.apply(ctx, h);
        for (up, block) in l.up.iter().zip(&l.dec) {
            let skip = skips.pop().expect("one skip per level");
            h = up.apply(ctx, h).upsample2x().add(skip);
            h = block.apply(ctx, h);
        }
        let base = gray.graph().constant(gray_logit(&gray.value()));
        let base = Var::concat_channels(&[base, base, base]);
        Ok(l.out.apply(ctx, Var::concat_channels(&[h, gray])).add(base).sigmoid())
    }

    /// Inference on an `[N, 1, d, d]` batch.
    pub fn generate(&self, gray: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(gray.shape())?;
        run_chunked(gray, |chunk| {
            let graph = Graph::new();
            let ctx = self.store.bind(&graph, false, Mode::Eval);
            let x = graph.constant(chunk.clone());
            Ok((*self.forward(&ctx, x)?.value()).clone())
        })
    }
}

/// Colorizes a batch of gray tiles.
pub fn forward_generator(g: &Generator<f32>, gray: &[GrayTile]) -> Result<Vec<ColorTile>> {
    if gray.is_empty() {
        return Ok(Vec::new());
    }
    let out = g.generate(&gray_batch(gray))?;
    crate::data::batch_to_tiles(&out)
}

fn gray_logit<T: Float>(gray: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (T::from(GRAY_CLAMP).unwrap(), T::from(1.0 - GRAY_CLAMP).unwrap());
    gray.map(|g| {
        let g = g.max(lo).min(hi);
        (g / (T::one() - g)).ln()
    })
}
