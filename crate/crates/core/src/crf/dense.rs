use super::{bilateral_features, CrfParams, PairwiseFilter};
use crate::types::Image;

/// Exhaustive pairwise sums, quadratic in the pixel count.
pub struct DenseFilter {
    width: usize,
    height: usize,
    /// `exp(-d² / 2σ²)` for every axis offset `d`.
    axis: Vec<f64>,
    features: Vec<[f64; 5]>,
}

impl DenseFilter {
    pub fn new(image: &Image, params: &CrfParams) -> Self {
        let (height, width) = (image.height(), image.width());
        let span = height.max(width);
        let two_var = 2.0 * params.spatial_sigma * params.spatial_sigma;
        DenseFilter {
            width,
            height,
            axis: (0..span).map(|d| (-((d * d) as f64) / two_var).exp()).collect(),
            features: bilateral_features(image, params),
        }
    }
}

impl PairwiseFilter for DenseFilter {
    fn spatial(&self, values: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; h * w];
        for yi in 0..h {
            for xi in 0..w {
                let mut acc = 0.0;
                for yj in 0..h {
                    let ky = self.axis[yi.abs_diff(yj)];
                    let row = &values[yj * w..(yj + 1) * w];
                    for (xj, v) in row.iter().enumerate() {
                        acc += ky * self.axis[xi.abs_diff(xj)] * v;
                    }
                }
                out[yi * w + xi] = acc;
            }
        }
        out
    }

    fn bilateral(&self, values: &[f64]) -> Vec<f64> {
        let n = self.features.len();
        let mut out: Vec<f64> = values.to_vec();
        for i in 0..n {
            let fi = &self.features[i];
            for j in i + 1..n {
                let fj = &self.features[j];
                let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
                let k = (-0.5 * d2).exp();
                out[i] += k * values[j];
                out[j] += k * values[i];
            }
        }
        out
    }
}
