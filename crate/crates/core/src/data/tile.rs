use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn check_side(d: usize) -> Result<()> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::InvalidTile(format!("side {d} is not a positive power of two")));
    }
    Ok(())
}

fn check_range(values: &[f32]) -> Result<()> {
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidTile(format!("value {v} at index {i} outside [0, 1]")));
    }
    Ok(())
}

/// `d x d` RGB tile with values in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorTile {
    d: usize,
    pixels: Vec<f32>,
}

impl ColorTile {
    pub fn new(d: usize, pixels: Vec<f32>) -> Result<Self> {
        check_side(d)?;
        if pixels.len() != d * d * 3 {
            return Err(Error::InvalidTile(format!("expected {} values, got {}", d * d * 3, pixels.len())));
        }
        check_range(&pixels)?;
        Ok(Self { d, pixels })
    }

    /// Clamps every value into `[0, 1]` first. Non-finite values are still rejected.
    pub fn new_clipped(d: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTile("non-finite pixel".into()));
        }
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(d, pixels)
    }

    pub fn uniform(d: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(d, (0..d * d).flat_map(|_| rgb).collect())
    }

    pub fn from_fn(d: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(d * d * 3);
        for y in 0..d {
            for x in 0..d {
                pixels.extend(f(y, x));
            }
        }
        Self::new(d, pixels)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.d + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn rgb(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.pixels.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Values of one channel in raster order.
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        self.pixels.iter().skip(c).step_by(3).copied()
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.d * self.d) as f64;
        let mut m = [0.0; 3];
        for p in self.rgb() {
            for c in 0..3 {
                m[c] += p[c] as f64;
            }
        }
        m.map(|v| v / n)
    }

    /// `[3, d, d]` planar tensor.
    pub fn to_chw<T: Float>(&self) -> Tensor<T> {
        let hw = self.d * self.d;
        let mut data = vec![T::zero(); 3 * hw];
        for (i, p) in self.rgb().enumerate() {
            for c in 0..3 {
                data[c * hw + i] = T::from(p[c]).unwrap();
            }
        }
        Tensor::new(vec![3, self.d, self.d], data)
    }

    /// Inverse of [`ColorTile::to_chw`], clipping into `[0, 1]`.
    pub fn from_chw<T: Float>(d: usize, planar: &[T]) -> Result<Self> {
        let hw = d * d;
        if planar.len() != 3 * hw {
            return Err(Error::ShapeMismatch(format!("expected 3x{d}x{d} values, got {}", planar.len())));
        }
        let mut pixels = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                pixels.push(planar[c * hw + i].to_f32().unwrap_or(f32::NAN));
            }
        }
        Self::new_clipped(d, pixels)
    }
}

/// `d x d` single-channel tile with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayTile {
    d: usize,
    pixels: Vec<f32>,
}

impl GrayTile {
    pub fn new(d: usize, pixels: Vec<f32>) -> Result<Self> {
        check_side(d)?;
        if pixels.len() != d * d {
            return Err(Error::InvalidTile(format!("expected {} values, got {}", d * d, pixels.len())));
        }
        check_range(&pixels)?;
        Ok(Self { d, pixels })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// `[1, d, d]` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(vec![1, self.d, self.d], self.pixels.iter().map(|&v| T::from(v).unwrap()).collect())
    }
}

/// `[N, 3, d, d]` batch.
pub fn color_batch<'a, T: Float>(tiles: impl IntoIterator<Item = &'a ColorTile>) -> Tensor<T> {
    let items: Vec<Tensor<T>> = tiles.into_iter().map(|t| t.to_chw()).collect();
    Tensor::stack(&items)
}

/// `[N, 1, d, d]` batch.
pub fn gray_batch<'a, T: Float>(tiles: impl IntoIterator<Item = &'a GrayTile>) -> Tensor<T> {
    let items: Vec<Tensor<T>> = tiles.into_iter().map(|t| t.to_tensor()).collect();
    Tensor::stack(&items)
}

/// Splits an `[N, 3, d, d]` tensor back into tiles.
pub fn batch_to_tiles<T: Float>(batch: &Tensor<T>) -> Result<Vec<ColorTile>> {
    let (n, c, h, w) = batch.dims4();
    if c != 3 || h != w {
        return Err(Error::ShapeMismatch(format!("expected [N, 3, d, d], got {:?}", batch.shape())));
    }
    let per = 3 * h * w;
    (0..n).map(|i| ColorTile::from_chw(h, &batch.data()[i * per..(i + 1) * per])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sides_and_ranges() {
        assert!(ColorTile::new(6, vec![0.0; 108]).is_err());
        assert!(ColorTile::new(4, vec![0.0; 47]).is_err());
        assert!(ColorTile::new(2, vec![1.5; 12]).is_err());
        assert!(ColorTile::new(2, vec![f32::NAN; 12]).is_err());
        assert!(GrayTile::new(2, vec![-0.1; 4]).is_err());
        assert!(ColorTile::new_clipped(2, vec![f32::INFINITY; 12]).is_err());
    }

    #[test]
    fn planar_round_trip() {
        let t = ColorTile::from_fn(4, |y, x| [y as f32 / 4.0, x as f32 / 4.0, 0.5]).unwrap();
        let chw = t.to_chw::<f64>();
        assert_eq!(chw.shape(), &[3, 4, 4]);
        assert_eq!(chw.data()[16 + 4 + 3], 0.75); // G plane, y=1, x=3
        assert_eq!(ColorTile::from_chw(4, chw.data()).unwrap(), t);
    }
}
