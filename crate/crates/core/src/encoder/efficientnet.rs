//! EfficientNet-B3 feature extractor laid out like the torchvision release,
//! so converted ImageNet weights load by parameter name.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use super::{Encoder, EncoderConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::Image;

const BN_EPS: f64 = 1e-5;
const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];
const STEM_CHANNELS: usize = 40;

/// (expand ratio, kernel, stride, in channels, out channels, repeats)
const STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 40, 24, 2),
    (6, 3, 2, 24, 32, 3),
    (6, 5, 2, 32, 48, 3),
    (6, 3, 2, 48, 96, 5),
    (6, 5, 1, 96, 136, 5),
    (6, 5, 2, 136, 232, 6),
    (6, 3, 1, 232, 384, 2),
];

/// Number of MBConv blocks, i.e. pyramid levels.
pub const B3_BLOCKS: usize = 26;

struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    stride: usize,
    groups: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let fan_in = in_c / groups * kernel * kernel;
        ConvBn {
            weight: params.add(
                format!("{prefix}.0.weight"),
                fan_in_uniform(&[out_c, in_c / groups, kernel, kernel], fan_in, rng),
            ),
            gamma: params.add(format!("{prefix}.1.weight"), Tensor::full(&[out_c], 1.0)),
            beta: params.add(format!("{prefix}.1.bias"), Tensor::zeros(&[out_c])),
            mean: params.add_frozen(format!("{prefix}.1.running_mean"), Tensor::zeros(&[out_c])),
            var: params.add_frozen(format!("{prefix}.1.running_var"), Tensor::full(&[out_c], 1.0)),
            stride,
            groups,
        }
    }

    fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var, act: bool) -> Result<Var> {
        let w = g.param(params, self.weight);
        let k = params.get(self.weight).shape()[2];
        let y = g.conv2d(x, w, None, self.stride, k / 2, self.groups)?;
        let gamma = g.param(params, self.gamma);
        let beta = g.param(params, self.beta);
        let y = g.batch_norm(
            y,
            gamma,
            beta,
            params.get(self.mean).data(),
            params.get(self.var).data(),
            BN_EPS,
        )?;
        Ok(if act { g.swish(y) } else { y })
    }
}

struct SqueezeExcite {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: SqueezeExcite,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let mut h = match &self.expand {
            Some(e) => e.forward(g, params, x, true)?,
            None => x,
        };
        h = self.depthwise.forward(g, params, h, true)?;

        let pooled = g.global_avg_pool(h);
        let (w1, b1) = (g.param(params, self.se.fc1_w), g.param(params, self.se.fc1_b));
        let s = g.linear(pooled, w1, Some(b1))?;
        let s = g.swish(s);
        let (w2, b2) = (g.param(params, self.se.fc2_w), g.param(params, self.se.fc2_b));
        let s = g.linear(s, w2, Some(b2))?;
        let gates = g.sigmoid(s);
        h = g.channel_scale(h, gates)?;

        let out = self.project.forward(g, params, h, false)?;
        if self.residual {
            g.add(out, x)
        } else {
            Ok(out)
        }
    }
}

pub struct EfficientNetB3 {
    stem: ConvBn,
    blocks: Vec<MbConv>,
    split_index: usize,
}

pub(super) fn build(config: &EncoderConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Box<dyn Encoder>> {
    let net = EfficientNetB3::new(config.split_index, params, rng)?;
    match &config.pretrained {
        Some(path) => load_safetensors(path, "encoder.", params)?,
        None if config.allow_random_init => {
            log::warn!("full backbone starts from random weights");
        }
        None => {
            return Err(Error::Config(
                "the full backbone needs `pretrained` weights (or allow_random_init = true)".into(),
            ))
        }
    }
    Ok(Box::new(net))
}

impl EfficientNetB3 {
    pub fn new(split_index: usize, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if split_index == 0 || split_index >= B3_BLOCKS {
            return Err(Error::Config(format!(
                "split_index must lie in 1..{B3_BLOCKS}, got {split_index}"
            )));
        }
        let stem = ConvBn::new(params, rng, "encoder.features.0", 3, STEM_CHANNELS, 3, 2, 1);
        let mut blocks = Vec::with_capacity(B3_BLOCKS);
        for (s, &(expand, kernel, stride, in_c, out_c, repeats)) in STAGES.iter().enumerate() {
            for r in 0..repeats {
                let (cin, st) = if r == 0 { (in_c, stride) } else { (out_c, 1) };
                let prefix = format!("encoder.features.{}.{r}.block", s + 1);
                let hidden = cin * expand;
                let mut j = 0;
                let expand_layer = (expand != 1).then(|| {
                    let l = ConvBn::new(params, rng, &format!("{prefix}.{j}"), cin, hidden, 1, 1, 1);
                    j += 1;
                    l
                });
                let depthwise = ConvBn::new(params, rng, &format!("{prefix}.{j}"), hidden, hidden, kernel, st, hidden);
                j += 1;
                let squeeze = (cin / 4).max(1);
                let se_prefix = format!("{prefix}.{j}");
                let se = SqueezeExcite {
                    fc1_w: params.add(format!("{se_prefix}.fc1.weight"), fan_in_uniform(&[squeeze, hidden], hidden, rng)),
                    fc1_b: params.add(format!("{se_prefix}.fc1.bias"), fan_in_uniform(&[squeeze], hidden, rng)),
                    fc2_w: params.add(format!("{se_prefix}.fc2.weight"), fan_in_uniform(&[hidden, squeeze], squeeze, rng)),
                    fc2_b: params.add(format!("{se_prefix}.fc2.bias"), fan_in_uniform(&[hidden], squeeze, rng)),
                };
                j += 1;
                let project = ConvBn::new(params, rng, &format!("{prefix}.{j}"), hidden, out_c, 1, 1, 1);
                blocks.push(MbConv {
                    expand: expand_layer,
                    depthwise,
                    se,
                    project,
                    residual: st == 1 && cin == out_c,
                });
            }
        }
        debug_assert_eq!(blocks.len(), B3_BLOCKS);
        Ok(EfficientNetB3 {
            stem,
            blocks,
            split_index,
        })
    }
}

impl Encoder for EfficientNetB3 {
    fn name(&self) -> &'static str {
        "full"
    }

    fn total_stride(&self) -> usize {
        32
    }

    fn split_index(&self) -> usize {
        self.split_index
    }

    fn level_channels(&self) -> Vec<usize> {
        STAGES
            .iter()
            .flat_map(|&(_, _, _, _, out_c, repeats)| std::iter::repeat(out_c).take(repeats))
            .collect()
    }

    fn normalize(&self, image: &Image) -> Tensor {
        let mut t = image.tensor().clone();
        let plane = image.height() * image.width();
        for (c, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = (*v - MEAN[c]) / STD[c]);
        }
        t
    }

    fn forward(&self, g: &mut Graph, params: &ParamStore, input: Var) -> Result<Vec<Var>> {
        let mut x = self.stem.forward(g, params, input, true)?;
        let mut levels = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(g, params, x)?;
            levels.push(x);
        }
        Ok(levels)
    }
}

/// Loads every parameter whose name starts with `prefix` from a
/// safetensors file keyed by the name with the prefix removed. SE layers
/// stored as 1×1 convolutions are accepted for the dense weights.
pub fn load_safetensors(path: &Path, prefix: &str, params: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let file = SafeTensors::deserialize(&bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let ids: Vec<ParamId> = params.ids().filter(|&id| params.name(id).starts_with(prefix)).collect();
    let mut missing = Vec::new();
    for id in ids {
        let key = params.name(id)[prefix.len()..].to_string();
        let view = match file.tensor(&key) {
            Ok(v) => v,
            Err(_) => {
                missing.push(key);
                continue;
            }
        };
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            other => {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    reason: format!("{key}: unsupported dtype {other:?}"),
                })
            }
        };
        let shape = params.get(id).shape().to_vec();
        let tensor = Tensor::from_vec(&shape, values).map_err(|_| Error::Load {
            path: path.to_path_buf(),
            reason: format!("{key}: stored shape {:?} does not fit {shape:?}", view.shape()),
        })?;
        params.set(id, tensor)?;
    }
    if !missing.is_empty() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("missing {} tensors, first: {}", missing.len(), missing[0]),
        });
    }
    Ok(())
}
