//! Domain value types. All spatial data is channel-major `[C, H, W]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Real-valued `C×H×W` activation volume.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid(Tensor);

impl FeatureGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.numel() == 0 {
            return Err(Error::InvalidInput(format!(
                "feature grid must be a non-empty [C, H, W] volume, got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::InvalidInput("feature grid holds non-finite values".into()));
        }
        Ok(FeatureGrid(tensor))
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureGrid(Tensor::zeros(&[channels, height, width]))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// RGB image with values in `[0, 1]`, stored as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn from_chw(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != 3 {
            return Err(Error::InvalidInput(format!(
                "image must be [3, H, W], got {:?}",
                tensor.shape()
            )));
        }
        check_unit_range(&tensor, "image")?;
        Ok(Image(tensor))
    }

    /// From interleaved `H×W×3` pixels.
    pub fn from_hwc(height: usize, width: usize, pixels: &[f64]) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::shape(&[height, width, 3], &[pixels.len()]));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c];
            }
        }
        Image::from_chw(Tensor::from_vec(&[3, height, width], data)?)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::from_chw(Tensor::full(&[3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Value at channel `c`, row `y`, column `x`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }
}

/// Binary ground-truth shadow mask, stored as `[1, H, W]` of 0.0 / 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowMask(Tensor);

impl ShadowMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let t = Tensor::from_vec(&[1, height, width], values)?;
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("shadow mask must be strictly binary".into()));
        }
        Ok(ShadowMask(t))
    }

    pub fn from_bools(height: usize, width: usize, values: &[bool]) -> Result<Self> {
        ShadowMask::new(height, width, values.iter().map(|&b| f64::from(u8::from(b))).collect())
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn positives(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Per-pixel shadow probability, `[1, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowProbMap(Tensor);

impl ShadowProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ShadowProbMap::from_tensor(Tensor::from_vec(&[1, height, width], values)?)
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != 1 {
            return Err(Error::InvalidInput(format!(
                "probability map must be [1, H, W], got {:?}",
                tensor.shape()
            )));
        }
        check_unit_range(&tensor, "probability map")?;
        Ok(ShadowProbMap(tensor))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        ShadowProbMap::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Three-channel prediction in `[0, 1]` (background or reconstruction).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbPrediction(Tensor);

impl RgbPrediction {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != 3 {
            return Err(Error::InvalidInput(format!(
                "RGB prediction must be [3, H, W], got {:?}",
                tensor.shape()
            )));
        }
        check_unit_range(&tensor, "RGB prediction")?;
        Ok(RgbPrediction(tensor))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        RgbPrediction::from_tensor(Tensor::full(&[3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} values must lie in [0, 1]")))
    }
}
