//! Dense image tensors and distortion metrics.
//!
//! A [`Tensor`] is a flat `f64` buffer with an `(height, width, channels)`
//! shape, stored row-major with the channel index innermost. Tensors are
//! immutable values after construction and safe to share across threads.
//!
//! Files use the `TZR1` format: a JSON object
//! `{"shape":[h,w,c],"data":[...]}` with `data` in the same row-major
//! order. Values are serialized at full round-trip precision so that runs
//! are bit-reproducible across implementations.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image dimensions: height, width, channels. All dimensions are >= 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "all shape dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        Ok(Shape { height, width, channels })
    }

    /// Total number of scalar elements `h * w * c`.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index of `(row, col, channel)` in row-major, channel-innermost order.
    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A dense real-valued image tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len() == h * w * c`.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("tensor data", shape.len(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { data: vec![0.0; shape.len()], shape }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor { data: vec![value; shape.len()], shape }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.shape.index(row, col, channel)]
    }

    /// Element-wise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("tensor add", self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes to the TZR1 JSON format.
    pub fn to_tzr1(&self) -> String {
        let file = TzrFile {
            shape: [self.shape.height, self.shape.width, self.shape.channels],
            data: self.data.clone(),
        };
        serde_json::to_string(&file).expect("tensor serialization cannot fail")
    }

    pub fn from_tzr1(text: &str) -> Result<Self> {
        let file: TzrFile = serde_json::from_str(text)?;
        let shape = Shape::new(file.shape[0], file.shape[1], file.shape[2])?;
        Tensor::new(shape, file.data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tzr1())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tzr1(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct TzrFile {
    shape: [usize; 3],
    data: Vec<f64>,
}

/// L2 distortion summary of a perturbation delta = x - x0.
///
/// `l2_squared_per_pixel` is `||delta||_2^2 / d`, the normalized (per-pixel)
/// squared L2 distortion used for success thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub l2_total: f64,
    pub l2_squared_per_pixel: f64,
}

fn check_same_shape(context: &'static str, x: &Tensor, x0: &Tensor) -> Result<()> {
    if x.shape != x0.shape {
        return Err(Error::shape(context, x0.shape, x.shape));
    }
    Ok(())
}

/// Lp norm of `x - x0` for `p >= 1`; `p = 2` is the Euclidean norm.
pub fn lp_distortion(x: &Tensor, x0: &Tensor, p: f64) -> Result<f64> {
    check_same_shape("lp_distortion", x, x0)?;
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("p must be >= 1, got {p}")));
    }
    if p == 2.0 {
        // Dominant case in the attack loop; avoid powf.
        let sum: f64 = x
            .data
            .iter()
            .zip(&x0.data)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum();
        return Ok(sum.sqrt());
    }
    let sum: f64 = x
        .data
        .iter()
        .zip(&x0.data)
        .map(|(a, b)| (a - b).abs().powf(p))
        .sum();
    Ok(sum.powf(1.0 / p))
}

/// Per-pixel squared L2 distortion report for `x` against `x0`.
pub fn per_pixel_l2(x: &Tensor, x0: &Tensor) -> Result<DistortionReport> {
    let l2_total = lp_distortion(x, x0, 2.0)?;
    let d = x.len() as f64;
    Ok(DistortionReport {
        l2_total,
        l2_squared_per_pixel: l2_total * l2_total / d,
    })
}

/// Clamps every element into `[0, 1]`. Idempotent.
pub fn clip_unit_box(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor { shape: x.shape, data }
}
