//! Macenko stain-vector estimation and normalization.
//!
//! Optical densities of tissue pixels lie (approximately) in the plane spanned by
//! the two stain vectors. The plane is found by PCA, and the stain vectors are the
//! robust extreme angles of the projected cloud.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{normalized, ColorTile};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacenkoParams {
    /// Pixels whose optical density norm is below this are background.
    pub beta: f64,
    /// Angle percentile (in percent) used for the robust extremes.
    pub alpha: f64,
    /// Added to intensities before the logarithm.
    pub eps: f64,
    /// Transmitted intensity of an empty slide.
    pub background: f64,
    /// Minimum fraction of tissue pixels.
    pub min_tissue_fraction: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self { beta: 0.15, alpha: 1.0, eps: 1e-6, background: 1.0, min_tissue_fraction: 0.01 }
    }
}

/// Two unit optical-density stain vectors (hematoxylin-like first) and the
/// 99th-percentile concentrations of the tile they were fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    /// 3x2 row-major.
    pub vectors: [[f64; 2]; 3],
    pub max_concentrations: [f64; 2],
}

impl StainMatrix {
    pub fn vector(&self, k: usize) -> [f64; 3] {
        [self.vectors[0][k], self.vectors[1][k], self.vectors[2][k]]
    }
}

fn optical_density(p: [f32; 3], params: &MacenkoParams) -> [f64; 3] {
    p.map(|v| -((v as f64 + params.eps) / params.background).ln())
}

fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Nonnegative least squares for `od ≈ a * h + b * e`.
fn nnls2(h: &[f64; 3], e: &[f64; 3], od: &[f64; 3]) -> [f64; 2] {
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (hh, ee, he) = (dot(h, h), dot(e, e), dot(h, e));
    let (ho, eo) = (dot(h, od), dot(e, od));
    let det = hh * ee - he * he;
    if det > 1e-12 {
        let a = (ee * ho - he * eo) / det;
        let b = (hh * eo - he * ho) / det;
        if a >= 0.0 && b >= 0.0 {
            return [a, b];
        }
    }
    let resid = |c: [f64; 2]| {
        (0..3).map(|i| (od[i] - c[0] * h[i] - c[1] * e[i]).powi(2)).sum::<f64>()
    };
    let only_h = [(ho / hh).max(0.0), 0.0];
    let only_e = [0.0, (eo / ee).max(0.0)];
    if resid(only_h) <= resid(only_e) {
        only_h
    } else {
        only_e
    }
}

fn estimate_from_od(od: &[[f64; 3]], total: usize, params: &MacenkoParams) -> Result<StainMatrix> {
    let tissue: Vec<[f64; 3]> = od
        .iter()
        .copied()
        .filter(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() >= params.beta)
        .collect();
    let needed = ((params.min_tissue_fraction * total as f64).ceil() as usize).max(3);
    if tissue.len() < needed {
        return Err(Error::InsufficientTissue(format!(
            "{} of {total} pixels have optical density >= {}",
            tissue.len(),
            params.beta
        )));
    }

    let n = tissue.len() as f64;
    let mean = tissue.iter().fold(Vector3::zeros(), |acc, v| acc + Vector3::from(*v)) / n;
    let mut cov = Matrix3::zeros();
    for v in &tissue {
        let c = Vector3::from(*v) - mean;
        cov += c * c.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let orient = |v: Vector3<f64>| if v.sum() < 0.0 { -v } else { v };
    let v1 = orient(eig.eigenvectors.column(order[0]).into_owned());
    let v2 = orient(eig.eigenvectors.column(order[1]).into_owned());

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|v| {
            let v = Vector3::from(*v);
            v.dot(&v2).atan2(v.dot(&v1))
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile(&angles, params.alpha);
    let hi = percentile(&angles, 100.0 - params.alpha);
    let to_vector = |theta: f64| -> [f64; 3] {
        let v = orient(v1 * theta.cos() + v2 * theta.sin());
        let clipped = [v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)];
        if clipped.iter().all(|&x| x == 0.0) {
            [1.0 / 3f64.sqrt(); 3]
        } else {
            normalized(clipped)
        }
    };
    let (a, b) = (to_vector(lo), to_vector(hi));
    // Hematoxylin absorbs red light more strongly than eosin does.
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };

    let mut conc_h = Vec::with_capacity(tissue.len());
    let mut conc_e = Vec::with_capacity(tissue.len());
    for v in &tissue {
        let [ch, ce] = nnls2(&h, &e, v);
        conc_h.push(ch);
        conc_e.push(ce);
    }
    conc_h.sort_by(f64::total_cmp);
    conc_e.sort_by(f64::total_cmp);
    let max_concentrations = [percentile(&conc_h, 99.0), percentile(&conc_e, 99.0)];

    Ok(StainMatrix { vectors: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]], max_concentrations })
}

pub fn estimate_stain_matrix(tile: &ColorTile) -> Result<StainMatrix> {
    estimate_stain_matrix_with(tile, &MacenkoParams::default())
}

pub fn estimate_stain_matrix_with(tile: &ColorTile, params: &MacenkoParams) -> Result<StainMatrix> {
    let od: Vec<[f64; 3]> = tile.rgb().map(|p| optical_density(p, params)).collect();
    estimate_from_od(&od, od.len(), params)
}

/// One stain matrix for the pixels of many tiles together.
pub fn estimate_stain_matrix_pooled(tiles: &[&ColorTile], params: &MacenkoParams) -> Result<StainMatrix> {
    // Every 4th pixel keeps pooled fits over thousands of tiles cheap.
    let od: Vec<[f64; 3]> = tiles
        .iter()
        .flat_map(|t| t.rgb().step_by(4).map(|p| optical_density(p, params)))
        .collect();
    let total = od.len();
    estimate_from_od(&od, total, params)
}

/// Re-renders `src` through `target`'s stain vectors after matching concentration ranges.
pub fn macenko_normalize(src: &ColorTile, target: &StainMatrix) -> Result<ColorTile> {
    macenko_normalize_with(src, target, &MacenkoParams::default())
}

pub fn macenko_normalize_with(src: &ColorTile, target: &StainMatrix, params: &MacenkoParams) -> Result<ColorTile> {
    let own = estimate_stain_matrix_with(src, params)?;
    let (h, e) = (own.vector(0), own.vector(1));
    let (th, te) = (target.vector(0), target.vector(1));
    let ratio: [f64; 2] = std::array::from_fn(|k| {
        if own.max_concentrations[k] > 1e-12 {
            target.max_concentrations[k] / own.max_concentrations[k]
        } else {
            1.0
        }
    });
    let mut pixels = Vec::with_capacity(src.pixels().len());
    for p in src.rgb() {
        let od = optical_density(p, params);
        let [ch, ce] = nnls2(&h, &e, &od);
        let (ch, ce) = (ch * ratio[0], ce * ratio[1]);
        for c in 0..3 {
            let out = params.background * (-(th[c] * ch + te[c] * ce)).exp();
            pixels.push(out as f32);
        }
    }
    ColorTile::new_clipped(src.d(), pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{angle_deg, render_tile, synth_layout, Label, StainStyleParams};

    fn clean_style(base: StainStyleParams) -> StainStyleParams {
        StainStyleParams { noise_sigma: 0.0, background_intensity: 1.0, ..base }
    }

    fn render(style: &StainStyleParams, label: Label, seed: u64, scale: f64) -> ColorTile {
        let layout = synth_layout(label, 64, seed).unwrap().scaled(scale);
        render_tile(style, &layout, 0).unwrap()
    }

    #[test]
    fn recovers_ground_truth_vectors() {
        for (style, seed) in [
            (clean_style(StainStyleParams::reference_a()), 1),
            (clean_style(StainStyleParams::reference_b()), 2),
        ] {
            for label in [Label::Normal, Label::Tumor] {
                let m = estimate_stain_matrix(&render(&style, label, seed, 1.0)).unwrap();
                for k in 0..2 {
                    let err = angle_deg(m.vector(k), style.vector(k));
                    assert!(err < 2.0, "stain {k} off by {err} degrees");
                }
            }
        }
    }

    #[test]
    fn single_stain_keeps_dominant_vector() {
        let style = clean_style(StainStyleParams::reference_a());
        let mut layout = synth_layout(Label::Tumor, 64, 4).unwrap();
        layout.eosin.iter_mut().for_each(|v| *v = 0.0);
        let tile = render_tile(&style, &layout, 0).unwrap();
        let m = estimate_stain_matrix(&tile).unwrap();
        let best = (0..2).map(|k| angle_deg(m.vector(k), style.vector(0))).fold(f64::MAX, f64::min);
        assert!(best < 2.0, "{best}");
    }

    #[test]
    fn blank_tile_has_insufficient_tissue() {
        let white = ColorTile::uniform(16, [1.0; 3]).unwrap();
        assert!(matches!(estimate_stain_matrix(&white), Err(Error::InsufficientTissue(_))));
        let target = StainMatrix { vectors: [[0.6, 0.1], [0.7, 0.9], [0.3, 0.1]], max_concentrations: [1.0, 1.0] };
        assert!(matches!(macenko_normalize(&white, &target), Err(Error::InsufficientTissue(_))));
    }

    #[test]
    fn scale_invariant_angles() {
        let style = clean_style(StainStyleParams::reference_a());
        let base = estimate_stain_matrix(&render(&style, Label::Normal, 11, 1.0)).unwrap();
        for k in [0.6, 1.5, 2.0] {
            let m = estimate_stain_matrix(&render(&style, Label::Normal, 11, k)).unwrap();
            for s in 0..2 {
                let diff = angle_deg(m.vector(s), base.vector(s));
                assert!(diff < 0.5, "scale {k} stain {s}: {diff}");
            }
        }
    }

    #[test]
    fn self_normalization_round_trip() {
        for (base, label, seed) in [
            (StainStyleParams::reference_a(), Label::Normal, 3),
            (StainStyleParams::reference_a(), Label::Tumor, 4),
            (StainStyleParams::reference_b(), Label::Tumor, 5),
        ] {
            let style = StainStyleParams { noise_sigma: 0.0, ..base };
            let layout = synth_layout(label, 64, seed).unwrap();
            let src = render_tile(&style, &layout, 0).unwrap();
            let out = macenko_normalize(&src, &estimate_stain_matrix(&src).unwrap()).unwrap();
            let mae = out.pixels().iter().zip(src.pixels()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                / src.pixels().len() as f64;
            assert!(mae < 0.02, "mae {mae}");
        }
    }

    #[test]
    fn cross_style_output_carries_target_vectors() {
        let a = clean_style(StainStyleParams::reference_a());
        let b = clean_style(StainStyleParams::reference_b());
        let target = estimate_stain_matrix(&render(&a, Label::Tumor, 21, 1.0)).unwrap();
        let out = macenko_normalize(&render(&b, Label::Tumor, 22, 1.0), &target).unwrap();
        let m = estimate_stain_matrix(&out).unwrap();
        for k in 0..2 {
            let err = angle_deg(m.vector(k), a.vector(k));
            assert!(err < 3.0, "stain {k}: {err}");
        }
    }

    #[test]
    fn nnls_handles_negative_solutions() {
        let h = [1.0, 0.0, 0.0];
        let e = [0.0, 1.0, 0.0];
        assert_eq!(nnls2(&h, &e, &[0.5, -0.2, 0.0]), [0.5, 0.0]);
        assert_eq!(nnls2(&h, &e, &[0.3, 0.4, 9.0]), [0.3, 0.4]);
    }
}
