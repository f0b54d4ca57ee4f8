use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum angle between the two stain vectors, in degrees.
pub const MIN_STAIN_ANGLE_DEG: f64 = 10.0;

/// Parameters of one synthetic "institute": how tissue concentrations become RGB.
///
/// `stain_matrix` is 3x2 row-major: row = RGB channel, column 0 = hematoxylin-like,
/// column 1 = eosin-like optical density vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainStyleParams {
    pub stain_matrix: [[f64; 2]; 3],
    pub concentration_scale: [f64; 2],
    pub background_intensity: f64,
    pub noise_sigma: f64,
}

pub(crate) fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

pub(crate) fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

impl StainStyleParams {
    /// Builds a style from two (not necessarily normalized) optical density vectors.
    pub fn from_vectors(
        hematoxylin: [f64; 3],
        eosin: [f64; 3],
        concentration_scale: [f64; 2],
        background_intensity: f64,
        noise_sigma: f64,
    ) -> Result<Self> {
        let (h, e) = (normalized(hematoxylin), normalized(eosin));
        let style = Self {
            stain_matrix: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
            concentration_scale,
            background_intensity,
            noise_sigma,
        };
        style.validate()?;
        Ok(style)
    }

    /// Column `k` of the stain matrix.
    pub fn vector(&self, k: usize) -> [f64; 3] {
        [self.stain_matrix[0][k], self.stain_matrix[1][k], self.stain_matrix[2][k]]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidStyle(m));
        for k in 0..2 {
            let v = self.vector(k);
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return bad(format!("stain vector {k} has negative or non-finite entries"));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return bad(format!("stain vector {k} has norm {norm}, expected 1"));
            }
        }
        let angle = angle_deg(self.vector(0), self.vector(1));
        if angle < MIN_STAIN_ANGLE_DEG {
            return bad(format!("stain vectors are {angle:.2} degrees apart, need >= {MIN_STAIN_ANGLE_DEG}"));
        }
        if self.concentration_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("concentration_scale entries must be positive".into());
        }
        if !(self.background_intensity > 0.8 && self.background_intensity <= 1.0) {
            return bad(format!("background_intensity {} outside (0.8, 1]", self.background_intensity));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be nonnegative", self.noise_sigma));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let style: Self = serde_json::from_str(text)?;
        style.validate()?;
        Ok(style)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Conventional H&E look: purple nuclei, pink stroma.
    pub fn reference_a() -> Self {
        Self::from_vectors([0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [1.0, 1.0], 0.94, 0.01)
            .expect("valid preset")
    }

    /// A second lab: redder-absorbing hematoxylin and a violet-shifted eosin, dosed so
    /// each stain darkens the luma about as much as in the first.
    pub fn reference_b() -> Self {
        Self::from_vectors([0.85, 0.40, 0.35], [0.10, 0.85, 0.52], [1.2, 1.05], 0.92, 0.01)
            .expect("valid preset")
    }

    /// Largest angle, in degrees, between corresponding stain vectors of two styles.
    pub fn max_vector_angle(&self, other: &Self) -> f64 {
        (0..2).map(|k| angle_deg(self.vector(k), other.vector(k))).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_far_apart() {
        let (a, b) = (StainStyleParams::reference_a(), StainStyleParams::reference_b());
        a.validate().unwrap();
        b.validate().unwrap();
        assert!(a.max_vector_angle(&b) >= 15.0, "{}", a.max_vector_angle(&b));
    }

    #[test]
    fn rejects_invalid_parameters() {
        let mut s = StainStyleParams::reference_a();
        s.stain_matrix[0][0] = -0.1;
        assert!(s.validate().is_err());

        let near = StainStyleParams::from_vectors([0.6, 0.7, 0.3], [0.62, 0.69, 0.31], [1.0, 1.0], 0.9, 0.0);
        assert!(near.is_err());

        let mut s = StainStyleParams::reference_a();
        s.background_intensity = 0.8;
        assert!(s.validate().is_err());
        s.background_intensity = 1.0;
        s.concentration_scale = [0.0, 1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn json_uses_row_major_matrix() {
        let text = r#"{"stain_matrix": [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
            "concentration_scale": [1.0, 2.0], "background_intensity": 0.9, "noise_sigma": 0.0}"#;
        let s = StainStyleParams::from_json(text).unwrap();
        assert_eq!(s.vector(0), [1.0, 0.0, 0.0]);
        assert_eq!(s.vector(1), [0.0, 1.0, 0.0]);
    }
}
