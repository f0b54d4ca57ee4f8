//! Synthetic H&E-like tiles.
//!
//! A tile is produced in two stages. [`synth_layout`] draws a stain-free tissue
//! layout (per-pixel hematoxylin and eosin concentrations) whose morphology
//! depends on the label: tumor tiles have more and larger nuclei. [`render_tile`]
//! turns a layout into RGB through the Beer-Lambert law of a [`StainStyleParams`].
//! Only the second stage knows about the institute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ColorTile, Dataset, Label, LabeledTile, Split, StainStyleParams};
use crate::error::{Error, Result};

/// Mixes a base seed with a stream id and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const NOISE_STREAM: u64 = 0x4e01_5e;

/// Per-pixel stain concentrations of one tile, in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationMap {
    pub d: usize,
    pub hematoxylin: Vec<f64>,
    pub eosin: Vec<f64>,
}

impl ConcentrationMap {
    pub fn zeros(d: usize) -> Self {
        Self { d, hematoxylin: vec![0.0; d * d], eosin: vec![0.0; d * d] }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            d: self.d,
            hematoxylin: self.hematoxylin.iter().map(|v| v * k).collect(),
            eosin: self.eosin.iter().map(|v| v * k).collect(),
        }
    }
}

struct Morphology {
    count: (usize, usize),
    radius: (f64, f64),
    intensity: (f64, f64),
    aspect: (f64, f64),
}

fn morphology(label: Label) -> Morphology {
    match label {
        Label::Normal => Morphology { count: (9, 15), radius: (2.6, 3.8), intensity: (0.8, 1.1), aspect: (0.7, 1.0) },
        Label::Tumor => Morphology { count: (12, 19), radius: (3.0, 4.4), intensity: (0.85, 1.2), aspect: (0.6, 1.0) },
    }
}

/// Normalized elliptical radius of `(x, y)` around a rotated ellipse.
fn ellipse_rho(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> f64 {
    let (dx, dy) = (x - cx, y - cy);
    let (s, c) = theta.sin_cos();
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    ((u / a).powi(2) + (v / b).powi(2)).sqrt()
}

/// Draws a stain-free tissue layout. Deterministic in `(label, d, seed)`.
pub fn synth_layout(label: Label, d: usize, seed: u64) -> Result<ConcentrationMap> {
    if d < 16 || !d.is_power_of_two() {
        return Err(Error::InvalidTile(format!("synthetic tiles need a power-of-two side >= 16, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label.as_u8() as u64, d as u64));
    let s = d as f64 / 64.0;
    let n = d * d;
    let coords = |i: usize| ((i % d) as f64 + 0.5, (i / d) as f64 + 0.5);

    // Stroma: smooth eosin field with a fibrous ripple.
    let base = rng.random_range(0.35..0.55);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..d as f64),
                rng.random_range(0.0..d as f64),
                rng.random_range(8.0..18.0) * s,
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let fiber_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let fiber_period = rng.random_range(6.0..12.0) * s;
    let fiber_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut field: Vec<f64> = (0..n)
        .map(|i| {
            let (x, y) = coords(i);
            bumps
                .iter()
                .map(|&(cx, cy, sigma, amp)| {
                    amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
                })
                .sum::<f64>()
        })
        .collect();
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    for (i, f) in field.iter_mut().enumerate() {
        let (x, y) = coords(i);
        let t = (x * fiber_angle.cos() + y * fiber_angle.sin()) / fiber_period;
        let ripple = 0.12 * (std::f64::consts::TAU * t + fiber_phase).sin();
        *f = (base * (1.0 + 0.4 * *f / peak + ripple)).max(0.05);
    }
    let mut eosin = field;

    // Nuclei: hematoxylin discs that displace the eosin underneath.
    let m = morphology(label);
    let scale2 = s * s;
    let lo = ((m.count.0 as f64) * scale2).round().max(1.0) as usize;
    let hi = ((m.count.1 as f64) * scale2).round().max(lo as f64) as usize;
    let count = rng.random_range(lo..=hi);
    let mut hema = vec![0.0f64; n];
    let mut mask = vec![0.0f64; n];
    for _ in 0..count {
        let cx = rng.random_range(0.0..d as f64);
        let cy = rng.random_range(0.0..d as f64);
        let a = rng.random_range(m.radius.0..m.radius.1) * s;
        let b = a * rng.random_range(m.aspect.0..m.aspect.1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let intensity = rng.random_range(m.intensity.0..m.intensity.1);
        let reach = a.ceil() as isize + 1;
        for yy in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(d as isize) {
            for xx in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(d as isize) {
                let i = yy as usize * d + xx as usize;
                let (x, y) = coords(i);
                let rho = ellipse_rho(x, y, cx, cy, a, b, theta);
                let w = (3.0 * (1.0 - rho)).clamp(0.0, 1.0);
                if w > 0.0 {
                    hema[i] = hema[i].max(w * intensity);
                    mask[i] = mask[i].max(w);
                }
            }
        }
    }
    for (e, k) in eosin.iter_mut().zip(&mask) {
        *e *= 1.0 - k;
    }

    // Occasional lumen: a tissue-free hole.
    if rng.random_bool(0.35) {
        let cx = rng.random_range(0.0..d as f64);
        let cy = rng.random_range(0.0..d as f64);
        let a = rng.random_range(5.0..11.0) * s;
        let b = a * rng.random_range(0.6..1.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        for i in 0..n {
            let (x, y) = coords(i);
            let q = ((ellipse_rho(x, y, cx, cy, a, b, theta) - 0.8) / 0.2).clamp(0.0, 1.0);
            hema[i] *= q;
            eosin[i] *= q;
        }
    }

    let jitter_h = rng.random_range(0.9..1.1);
    let jitter_e = rng.random_range(0.9..1.1);
    hema.iter_mut().for_each(|v| *v *= jitter_h);
    eosin.iter_mut().for_each(|v| *v *= jitter_e);
    Ok(ConcentrationMap { d, hematoxylin: hema, eosin })
}

/// Beer-Lambert rendering: `background * exp(-S * (scale ⊙ c))`, plus Gaussian noise, clipped.
pub fn render_tile(style: &StainStyleParams, conc: &ConcentrationMap, noise_seed: u64) -> Result<ColorTile> {
    style.validate()?;
    let d = conc.d;
    if conc.hematoxylin.len() != d * d || conc.eosin.len() != d * d {
        return Err(Error::InvalidTile("concentration map does not match its side".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = (style.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, style.noise_sigma).expect("nonnegative sigma"));
    let [sh, se] = style.concentration_scale;
    let mut pixels = Vec::with_capacity(d * d * 3);
    for (&h, &e) in conc.hematoxylin.iter().zip(&conc.eosin) {
        for row in &style.stain_matrix {
            let od = row[0] * sh * h + row[1] * se * e;
            let mut v = style.background_intensity * (-od).exp();
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    ColorTile::new(d, pixels)
}

/// One synthetic tile; deterministic in `(style, label, d, seed)`.
pub fn synth_tile(style: &StainStyleParams, label: Label, d: usize, seed: u64) -> Result<LabeledTile> {
    style.validate()?;
    let layout = synth_layout(label, d, seed)?;
    let tile = render_tile(style, &layout, derive_seed(seed, NOISE_STREAM, label.as_u8() as u64))?;
    Ok(LabeledTile { tile, label, institute: "synthetic".into() })
}

fn synth_split(
    style: &StainStyleParams,
    institute: &str,
    split: Split,
    stream: u64,
    count: usize,
    d: usize,
    seed: u64,
) -> Result<Dataset> {
    let tiles = (0..count)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Normal } else { Label::Tumor };
            let mut t = synth_tile(style, label, d, derive_seed(seed, stream, i as u64))?;
            t.institute = institute.to_string();
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(tiles, split)
}

/// Balanced train/val sets in `style_a` (institute "A") and an independently drawn
/// test set in `style_b` (institute "B").
pub fn make_synthetic_benchmark(
    style_a: &StainStyleParams,
    style_b: &StainStyleParams,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    d: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    for (name, n) in [("n_train", n_train), ("n_val", n_val), ("n_test", n_test)] {
        if n == 0 || n % 2 != 0 {
            return Err(Error::InvalidConfig(format!("{name} = {n} must be positive and even")));
        }
    }
    let train = synth_split(style_a, "A", Split::Train, 1, n_train, d, seed)?;
    let val = synth_split(style_a, "A", Split::Val, 2, n_val, d, seed)?;
    let test = synth_split(style_b, "B", Split::Test, 3, n_test, d, seed)?;
    Ok((train, val, test))
}
