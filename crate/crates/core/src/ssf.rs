//! Style attributes of the disentangled components and the constraints
//! placed on them.
//!
//! A component's style is its channel Gram matrix pushed through two
//! affine maps. The shadow component's style is pulled towards the
//! recombined features' style (cosine consistency) while the background
//! style is pushed towards orthogonality (squared dot product).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::FeatureGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix(Tensor);

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.0.data()[x * self.size() + y]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.size()).map(|i| self.at(i, i)).sum()
    }

    /// Row-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Which pair the diversity term compares against the background style.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffPair {
    #[default]
    #[serde(rename = "re-bg")]
    RecombinedBackground,
    #[serde(rename = "sd-bg")]
    ShadowBackground,
}

/// Two dense layers `C² → C² → C²`, weights stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedWeights {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

impl StyleEmbedWeights {
    pub fn identity(dim: usize) -> Self {
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        StyleEmbedWeights {
            w1: eye.clone(),
            b1: vec![0.0; dim],
            w2: eye,
            b2: vec![0.0; dim],
        }
    }
}

/// Styles of the three components along one path.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTriple {
    pub shadow: StyleVector,
    pub background: StyleVector,
    pub recombined: StyleVector,
    /// Channel count `C` of the grids the Gram matrices came from.
    pub channels: usize,
}

pub(crate) fn gram_raw(features: &Tensor) -> Tensor {
    let (c, h, w) = features.dims3();
    let mut m = vec![0.0; c * c];
    crate::kernels::gemm(c, h * w, c, features.data(), false, features.data(), true, 0.0, &mut m);
    // gemm may round the two triangles differently
    for x in 0..c {
        for y in x + 1..c {
            m[y * c + x] = m[x * c + y];
        }
    }
    Tensor::from_vec(&[c, c], m).expect("gram shape")
}

pub fn gram(features: &FeatureGrid) -> GramMatrix {
    GramMatrix(gram_raw(features.tensor()))
}

fn affine(w: &Tensor, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.shape().len() != 2 || w.shape()[1] != x.len() || w.shape()[0] != b.len() {
        return Err(Error::InvalidInput(format!(
            "style layer {:?} with bias {} cannot map a vector of {}",
            w.shape(),
            b.len(),
            x.len()
        )));
    }
    Ok(w.data()
        .chunks(x.len())
        .zip(b)
        .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect())
}

/// `ρ = L2(L1(flatten(M)))`.
pub fn style_embed(m: &GramMatrix, weights: &StyleEmbedWeights) -> Result<StyleVector> {
    let dim = m.size() * m.size();
    if weights.w1.shape() != [dim, dim] || weights.w2.shape() != [dim, dim] {
        return Err(Error::InvalidInput(format!(
            "style weights must be {dim}x{dim} for a {0}x{0} Gram matrix",
            m.size()
        )));
    }
    let hidden = affine(&weights.w1, &weights.b1, &m.flatten())?;
    Ok(StyleVector(affine(&weights.w2, &weights.b2, &hidden)?))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 − cos(a, b)` with gradients. A zero vector yields zero loss and
/// zero gradient.
pub(crate) fn consistency_raw(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("style consistency on a zero style vector; loss set to 0");
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let ab = dot(a, b);
    let cos = ab / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(x / (na * nb) - cos * y / (nb * nb)))
        .collect();
    (1.0 - cos, ga, gb)
}

pub(crate) fn differentiate_raw(a: &[f64], b: &[f64], channels: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let c2 = (channels * channels) as f64;
    let ab = dot(a, b);
    let ga = b.iter().map(|y| 2.0 * ab * y / c2).collect();
    let gb = a.iter().map(|x| 2.0 * ab * x / c2).collect();
    (ab * ab / c2, ga, gb)
}

/// `1 − cos(ρ_sd, ρ_re)`, in `[0, 2]`.
pub fn consistency_loss(rho_sd: &StyleVector, rho_re: &StyleVector) -> Result<f64> {
    if rho_sd.len() != rho_re.len() {
        return Err(Error::shape(&[rho_sd.len()], &[rho_re.len()]));
    }
    Ok(consistency_raw(&rho_sd.0, &rho_re.0).0)
}

/// `(ρ_re · ρ_bg)² / C²`. Not scale invariant.
pub fn differentiate_loss(rho_re: &StyleVector, rho_bg: &StyleVector, channels: usize) -> Result<f64> {
    if rho_re.len() != rho_bg.len() {
        return Err(Error::shape(&[rho_re.len()], &[rho_bg.len()]));
    }
    if channels == 0 {
        return Err(Error::InvalidInput("channel count must be positive".into()));
    }
    Ok(differentiate_raw(&rho_re.0, &rho_bg.0, channels).0)
}

fn path_loss(t: &StyleTriple, pair: DiffPair) -> Result<f64> {
    let con = consistency_loss(&t.shadow, &t.recombined)?;
    let other = match pair {
        DiffPair::RecombinedBackground => &t.recombined,
        DiffPair::ShadowBackground => &t.shadow,
    };
    Ok(con + differentiate_loss(other, &t.background, t.channels)?)
}

/// Consistency plus diversity terms summed over the low and high paths.
pub fn style_loss_total(low: &StyleTriple, high: &StyleTriple, pair: DiffPair) -> Result<f64> {
    Ok(path_loss(low, pair)? + path_loss(high, pair)?)
}

/// Channel indices kept when `C²` would exceed `max_entries`: every
/// `k`-th channel with the smallest `k` that fits.
pub fn capped_channels(channels: usize, max_entries: Option<usize>) -> Vec<usize> {
    match max_entries {
        Some(cap) if channels * channels > cap => {
            let keep = ((cap as f64).sqrt().floor() as usize).max(1);
            let stride = channels.div_ceil(keep);
            (0..channels).step_by(stride).collect()
        }
        _ => (0..channels).collect(),
    }
}
