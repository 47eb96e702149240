use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    UnitSum,
    UnitMax,
    Raw,
}

/// Tolerance for the unit-sum check.
pub const UNIT_SUM_TOL: f64 = 1e-6;

/// Nonnegative `height×width` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    norm: Normalization,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape("heatmap", format!("{} values for {width}x{height}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("heatmap value {v} is not a finite nonnegative number")));
        }
        Ok(Heatmap { width, height, data, norm: Normalization::Raw })
    }

    /// From an `H×W` tensor; negative values are rejected.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let &[h, w] = t.shape() else {
            return Err(Error::shape("heatmap", format!("expected H×W, got {:?}", t.shape())));
        };
        Self::new(w, h, t.to_f64_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.height, self.width], self.data.clone()).expect("consistent shape")
    }

    pub fn uniform(width: usize, height: usize) -> Result<Self> {
        let n = width * height;
        let mut m = Self::new(width, height, vec![1.0 / n.max(1) as f64; n])?;
        m.norm = Normalization::UnitSum;
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// `(x, y)` of the largest value; the first in row-major order wins ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn is_unit_sum(&self) -> bool {
        (self.sum() - 1.0).abs() <= UNIT_SUM_TOL
    }

    pub fn same_shape(&self, other: &Heatmap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Scales to unit sum. An all-zero map becomes uniform, with a warning.
    pub fn to_unit_sum(&self) -> Heatmap {
        let s = self.sum();
        if s <= 0.0 {
            log::warn!("all-zero {}x{} heatmap normalized to uniform", self.width, self.height);
            return Self::uniform(self.width, self.height).expect("valid extent");
        }
        Heatmap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v / s).collect(),
            norm: Normalization::UnitSum,
        }
    }

    /// Scales so the peak is 1; an all-zero map stays zero.
    pub fn to_unit_max(&self) -> Heatmap {
        let m = self.max();
        let data = if m > 0.0 { self.data.iter().map(|v| v / m).collect() } else { self.data.clone() };
        Heatmap { width: self.width, height: self.height, data, norm: Normalization::UnitMax }
    }

    /// Binary PGM (`P5`, maxval 255) of the unit-max scaled map.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        let m = self.to_unit_max();
        out.extend(m.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }
}

/// Isotropic Gaussian bump evaluated at every pixel center, unnormalized.
pub(crate) fn gaussian_grid(width: usize, height: usize, cx: f64, cy: f64, sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            out.push((-(dx * dx + dy * dy) * inv).exp());
        }
    }
    out
}

/// Unit-sum isotropic Gaussian centered on the image, `σ = sigma_frac·min(H, W)`.
pub fn center_bias_map(width: usize, height: usize, sigma_frac: f64) -> Result<Heatmap> {
    if width == 0 || height == 0 || sigma_frac <= 0.0 {
        return Err(Error::InvalidArgument("center bias needs a nonempty image and positive sigma".into()));
    }
    let sigma = sigma_frac * width.min(height) as f64;
    let grid = gaussian_grid(width, height, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, sigma);
    Ok(Heatmap::new(width, height, grid)?.to_unit_sum())
}
