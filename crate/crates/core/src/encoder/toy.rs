use rand_chacha::ChaCha8Rng;

use super::{Encoder, EncoderConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::Image;

struct Block {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Stack of strided 3×3 convolutions with ReLU; every block output is a
/// pyramid level. Inputs stay in `[0, 1]`.
pub struct ToyEncoder {
    blocks: Vec<Block>,
    channels: Vec<usize>,
    total_stride: usize,
    split_index: usize,
}

pub(super) fn build(config: &EncoderConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Box<dyn Encoder>> {
    Ok(Box::new(ToyEncoder::new(config, params, rng)?))
}

impl ToyEncoder {
    pub fn new(config: &EncoderConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = config.channels.len();
        if n == 0 || n != config.strides.len() {
            return Err(Error::Config(format!(
                "toy encoder needs matching non-empty channels and strides, got {:?} / {:?}",
                config.channels, config.strides
            )));
        }
        if n < 2 || config.split_index == 0 || config.split_index >= n {
            return Err(Error::Config(format!(
                "split_index must lie in 1..{n} for {n} levels, got {}",
                config.split_index
            )));
        }
        let mut blocks = Vec::with_capacity(n);
        let (mut in_c, mut prev_stride) = (3, 1);
        for (i, (&out_c, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            if out_c == 0 || stride < prev_stride || stride % prev_stride != 0 {
                return Err(Error::Config(format!(
                    "toy block {i}: stride {stride} must be a multiple of {prev_stride}, channels > 0"
                )));
            }
            let fan_in = in_c * 9;
            let weight = params.add(
                format!("encoder.block{i}.weight"),
                fan_in_uniform(&[out_c, in_c, 3, 3], fan_in, rng),
            );
            let bias = params.add(format!("encoder.block{i}.bias"), fan_in_uniform(&[out_c], fan_in, rng));
            blocks.push(Block {
                weight,
                bias,
                stride: stride / prev_stride,
            });
            in_c = out_c;
            prev_stride = stride;
        }
        Ok(ToyEncoder {
            blocks,
            channels: config.channels.clone(),
            total_stride: prev_stride,
            split_index: config.split_index,
        })
    }
}

impl Encoder for ToyEncoder {
    fn name(&self) -> &'static str {
        "toy"
    }

    fn total_stride(&self) -> usize {
        self.total_stride
    }

    fn split_index(&self) -> usize {
        self.split_index
    }

    fn level_channels(&self) -> Vec<usize> {
        self.channels.clone()
    }

    fn normalize(&self, image: &Image) -> Tensor {
        image.tensor().clone()
    }

    fn forward(&self, g: &mut Graph, params: &ParamStore, input: Var) -> Result<Vec<Var>> {
        let mut x = input;
        let mut levels = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let w = g.param(params, b.weight);
            let bias = g.param(params, b.bias);
            let y = g.conv2d(x, w, Some(bias), b.stride, 1, 1)?;
            x = g.relu(y);
            levels.push(x);
        }
        Ok(levels)
    }
}
