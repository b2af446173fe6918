//! Feature pyramid extraction and per-group merging.
//!
//! Backbones implement [`Encoder`] and are looked up by name through an
//! [`EncoderRegistry`], so a run configuration can pick one at runtime.

mod efficientnet;
mod toy;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::{FeatureGrid, Image};

pub use efficientnet::{load_safetensors, EfficientNetB3, B3_BLOCKS};
pub use toy::ToyEncoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Registered backbone name: `toy` or `full`.
    pub variant: String,
    /// Output channels of each toy block.
    pub channels: Vec<usize>,
    /// Cumulative stride of each toy block relative to the input.
    pub strides: Vec<usize>,
    /// Number of leading pyramid levels that form the low-level group.
    pub split_index: usize,
    /// Pretrained weights (safetensors) for the full backbone.
    pub pretrained: Option<PathBuf>,
    /// Let the full backbone start from random weights when no file is given.
    pub allow_random_init: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: "toy".into(),
            channels: vec![8, 16],
            strides: vec![2, 4],
            split_index: 1,
            pretrained: None,
            allow_random_init: false,
        }
    }
}

impl EncoderConfig {
    pub fn full() -> Self {
        EncoderConfig {
            variant: "full".into(),
            channels: Vec::new(),
            strides: Vec::new(),
            split_index: 6,
            pretrained: None,
            allow_random_init: false,
        }
    }
}

pub trait Encoder: Send + Sync {
    fn name(&self) -> &'static str;

    /// Input height and width must be multiples of this.
    fn total_stride(&self) -> usize;

    fn split_index(&self) -> usize;

    /// Channel count of every pyramid level.
    fn level_channels(&self) -> Vec<usize>;

    /// Maps a `[0, 1]` image to the backbone's expected input range.
    fn normalize(&self, image: &Image) -> Tensor;

    /// Appends the backbone to `graph`; returns one node per pyramid level.
    fn forward(&self, graph: &mut Graph, params: &ParamStore, input: Var) -> Result<Vec<Var>>;
}

pub type EncoderBuilder = fn(&EncoderConfig, &mut ParamStore, &mut ChaCha8Rng) -> Result<Box<dyn Encoder>>;

pub struct EncoderRegistry {
    builders: BTreeMap<&'static str, EncoderBuilder>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = EncoderRegistry {
            builders: BTreeMap::new(),
        };
        r.register("toy", toy::build);
        r.register("full", efficientnet::build);
        r.register("efficientnet-b3", efficientnet::build);
        r
    }
}

impl EncoderRegistry {
    pub fn register(&mut self, name: &'static str, builder: EncoderBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, config: &EncoderConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Box<dyn Encoder>> {
        let builder = self
            .builders
            .get(config.variant.as_str())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "encoder",
                name: config.variant.clone(),
                available: self.names().join(", "),
            })?;
        builder(config, params, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureGrid>,
    pub split_index: usize,
}

impl FeaturePyramid {
    pub fn low(&self) -> &[FeatureGrid] {
        &self.levels[..self.split_index]
    }

    pub fn high(&self) -> &[FeatureGrid] {
        &self.levels[self.split_index..]
    }
}

pub(crate) fn check_divisible(image: &Image, stride: usize) -> Result<()> {
    if image.height() % stride != 0 || image.width() % stride != 0 {
        return Err(Error::InvalidInput(format!(
            "image {}x{} is not divisible by the encoder stride {stride}",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Runs the backbone on one image and returns every pyramid level.
pub fn extract_pyramid(encoder: &dyn Encoder, params: &ParamStore, image: &Image) -> Result<FeaturePyramid> {
    check_divisible(image, encoder.total_stride())?;
    let mut g = Graph::new();
    let x = g.input(encoder.normalize(image));
    let levels = encoder.forward(&mut g, params, x)?;
    let levels = levels
        .into_iter()
        .map(|v| FeatureGrid::new(g.value(v).clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid {
        levels,
        split_index: encoder.split_index(),
    })
}

/// Upsamples every member to the largest member's size and concatenates
/// channels.
pub fn merge_group_vars(graph: &mut Graph, group: &[Var]) -> Result<Var> {
    let (mut h, mut w) = (0, 0);
    for &v in group {
        let (_, vh, vw) = graph.value(v).dims3();
        if vh * vw > h * w {
            (h, w) = (vh, vw);
        }
    }
    if group.is_empty() {
        return Err(Error::InvalidInput("cannot merge an empty feature group".into()));
    }
    let resized: Vec<Var> = group.iter().map(|&v| graph.resize(v, h, w)).collect();
    graph.concat(&resized)
}

pub fn merge_group(group: &[FeatureGrid]) -> Result<FeatureGrid> {
    let mut g = Graph::new();
    let vars: Vec<Var> = group.iter().map(|f| g.input(f.tensor().clone())).collect();
    let merged = merge_group_vars(&mut g, &vars)?;
    FeatureGrid::new(g.value(merged).clone())
}
