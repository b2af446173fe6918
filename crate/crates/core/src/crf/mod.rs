//! Two-label mean-field refinement of a shadow probability map over a fully
//! connected pairwise model with Gaussian spatial and bilateral kernels.

mod dense;
mod lattice;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{Image, ShadowProbMap};

pub use dense::DenseFilter;
pub use lattice::{LatticeFilter, Permutohedral};

const PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub iterations: usize,
    pub spatial_sigma: f64,
    pub spatial_weight: f64,
    pub bilateral_spatial_sigma: f64,
    /// On the 0-255 intensity scale.
    pub bilateral_color_sigma: f64,
    pub bilateral_weight: f64,
    /// Registered message-passing backend.
    pub filter: String,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            iterations: 5,
            spatial_sigma: 3.0,
            spatial_weight: 3.0,
            bilateral_spatial_sigma: 60.0,
            bilateral_color_sigma: 5.0,
            bilateral_weight: 10.0,
            filter: "lattice".into(),
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.spatial_sigma, self.bilateral_spatial_sigma, self.bilateral_color_sigma];
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("crf sigmas must be positive, got {sigmas:?}")));
        }
        if [self.spatial_weight, self.bilateral_weight].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("crf weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Unnormalized Gaussian sums `out_i = Σ_j k(i, j) v_j`, self term included.
pub trait PairwiseFilter: Send + Sync {
    fn spatial(&self, values: &[f64]) -> Vec<f64>;
    fn bilateral(&self, values: &[f64]) -> Vec<f64>;
}

pub type FilterBuilder = fn(&Image, &CrfParams) -> Box<dyn PairwiseFilter>;

pub struct FilterRegistry {
    builders: BTreeMap<&'static str, FilterBuilder>,
}

impl Default for FilterRegistry {
    fn default() -> Self {
        let mut r = FilterRegistry {
            builders: BTreeMap::new(),
        };
        r.register("dense", |img, p| Box::new(DenseFilter::new(img, p)));
        r.register("lattice", |img, p| Box::new(LatticeFilter::new(img, p)));
        r
    }
}

impl FilterRegistry {
    pub fn register(&mut self, name: &'static str, builder: FilterBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, name: &str, image: &Image, params: &CrfParams) -> Result<Box<dyn PairwiseFilter>> {
        let builder = self.builders.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: "crf filter",
            name: name.into(),
            available: self.names().join(", "),
        })?;
        Ok(builder(image, params))
    }
}

/// Bilateral feature vector of a pixel: position over `σ_xy`, colour over `σ_rgb`.
pub(crate) fn bilateral_features(image: &Image, params: &CrfParams) -> Vec<[f64; 5]> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut f = [0.0; 5];
            f[0] = x as f64 / params.bilateral_spatial_sigma;
            f[1] = y as f64 / params.bilateral_spatial_sigma;
            for c in 0..3 {
                f[2 + c] = image.at(c, y, x) * 255.0 / params.bilateral_color_sigma;
            }
            out.push(f);
        }
    }
    out
}

pub fn refine(image: &Image, prob: &ShadowProbMap, params: &CrfParams) -> Result<ShadowProbMap> {
    refine_with(&FilterRegistry::default(), image, prob, params)
}

pub fn refine_with(
    registry: &FilterRegistry,
    image: &Image,
    prob: &ShadowProbMap,
    params: &CrfParams,
) -> Result<ShadowProbMap> {
    let (h, w) = (image.height(), image.width());
    if (prob.height(), prob.width()) != (h, w) {
        return Err(Error::shape(&[1, h, w], &[1, prob.height(), prob.width()]));
    }
    params.validate()?;
    if params.iterations == 0 {
        return Ok(prob.clone());
    }
    let filter = registry.build(&params.filter, image, params)?;
    let q = mean_field(filter.as_ref(), prob.values(), params);
    ShadowProbMap::from_tensor(Tensor::from_vec(&[1, h, w], q)?)
}

/// Runs the configured number of updates and returns the shadow marginals.
pub fn mean_field(filter: &dyn PairwiseFilter, prob: &[f64], params: &CrfParams) -> Vec<f64> {
    let n = prob.len();
    let (ws, wb) = (params.spatial_weight, params.bilateral_weight);
    // Energy difference E(shadow) - E(background) from the unaries.
    let unary: Vec<f64> = prob
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            (1.0 - p).ln() - p.ln()
        })
        .collect();
    let mut q: Vec<f64> = unary.iter().map(|&u| logistic(-u)).collect();
    if ws == 0.0 && wb == 0.0 {
        return q;
    }
    let ones = vec![1.0; n];
    let norm_s = if ws > 0.0 { filter.spatial(&ones) } else { Vec::new() };
    let norm_b = if wb > 0.0 { filter.bilateral(&ones) } else { Vec::new() };
    for _ in 0..params.iterations {
        // Agreement with the shadow label under each normalized kernel.
        let mut agree = vec![0.0; n];
        if ws > 0.0 {
            for (a, (s, z)) in agree.iter_mut().zip(filter.spatial(&q).iter().zip(&norm_s)) {
                *a += ws * s / z;
            }
        }
        if wb > 0.0 {
            for (a, (s, z)) in agree.iter_mut().zip(filter.bilateral(&q).iter().zip(&norm_b)) {
                *a += wb * s / z;
            }
        }
        let total = ws + wb;
        for i in 0..n {
            // Potts: each label pays for the mass on the other one.
            let e_shadow = unary[i] + (total - agree[i]);
            let e_background = agree[i];
            q[i] = logistic(e_background - e_shadow);
        }
    }
    q
}

fn logistic(x: f64) -> f64 {
    crate::autograd::sigmoid(x)
}
