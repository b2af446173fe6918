//! Feature separation and recombination, the parallel decoder and the
//! prediction heads.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::{FeatureGrid, RgbPrediction, ShadowProbMap};

/// Squeeze-excitation bottleneck reduction.
pub const SE_REDUCTION: usize = 16;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_c: usize, out_c: usize, kernel: usize) -> Self {
        let fan_in = in_c * kernel * kernel;
        Conv {
            weight: params.add(format!("{name}.weight"), fan_in_uniform(&[out_c, in_c, kernel, kernel], fan_in, rng)),
            bias: params.add(format!("{name}.bias"), fan_in_uniform(&[out_c], fan_in, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let k = params.get(self.weight).shape()[2];
        g.conv2d(x, w, Some(b), 1, k / 2, 1)
    }
}

/// `Conv(ReLU(Conv(x))) + x` with 3×3 kernels.
#[derive(Clone, Copy, Debug)]
pub struct ResidualBranch {
    first: Conv,
    second: Conv,
}

impl ResidualBranch {
    pub fn new(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        ResidualBranch {
            first: Conv::new(params, rng, &format!("{name}.conv1"), channels, channels, 3),
            second: Conv::new(params, rng, &format!("{name}.conv2"), channels, channels, 3),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, params, x)?;
        let h = g.relu(h);
        let h = self.second.forward(g, params, h)?;
        g.add(h, x)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.first.weight, self.first.bias, self.second.weight, self.second.bias]
    }
}

/// Graph nodes of the three components produced on one path.
#[derive(Clone, Copy, Debug)]
pub struct ComponentVars {
    pub shadow: Var,
    pub background: Var,
    pub recombined: Var,
}

/// Two independent residual branches, one per layer.
#[derive(Clone, Copy, Debug)]
pub struct Fsr {
    pub shadow: ResidualBranch,
    pub background: ResidualBranch,
}

impl Fsr {
    pub fn new(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        Fsr {
            shadow: ResidualBranch::new(params, rng, &format!("{name}.shadow"), channels),
            background: ResidualBranch::new(params, rng, &format!("{name}.background"), channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, merged: Var) -> Result<ComponentVars> {
        let shadow = self.shadow.forward(g, params, merged)?;
        let background = self.background.forward(g, params, merged)?;
        let recombined = g.add(shadow, background)?;
        Ok(ComponentVars {
            shadow,
            background,
            recombined,
        })
    }

    /// Shadow- and background-related components of a merged grid.
    pub fn separate(&self, params: &ParamStore, merged: &FeatureGrid) -> Result<(FeatureGrid, FeatureGrid)> {
        let mut g = Graph::new();
        let x = g.input(merged.tensor().clone());
        let sd = self.shadow.forward(&mut g, params, x)?;
        let bg = self.background.forward(&mut g, params, x)?;
        Ok((FeatureGrid::new(g.value(sd).clone())?, FeatureGrid::new(g.value(bg).clone())?))
    }
}

/// Elementwise sum of the two components.
pub fn recombine(shadow: &FeatureGrid, background: &FeatureGrid) -> Result<FeatureGrid> {
    let sum = shadow.tensor().zip_map(background.tensor(), |a, b| a + b)?;
    FeatureGrid::new(sum)
}

/// Squeeze-excitation gating: global pool → FC → ReLU → FC → sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl ChannelAttention {
    pub fn new(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let hidden = (channels / SE_REDUCTION).max(1);
        ChannelAttention {
            fc1_w: params.add(format!("{name}.fc1.weight"), fan_in_uniform(&[hidden, channels], channels, rng)),
            fc1_b: params.add(format!("{name}.fc1.bias"), fan_in_uniform(&[hidden], channels, rng)),
            fc2_w: params.add(format!("{name}.fc2.weight"), fan_in_uniform(&[channels, hidden], hidden, rng)),
            fc2_b: params.add(format!("{name}.fc2.bias"), fan_in_uniform(&[channels], hidden, rng)),
        }
    }

    pub fn gates(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x);
        let (w1, b1) = (g.param(params, self.fc1_w), g.param(params, self.fc1_b));
        let h = g.linear(pooled, w1, Some(b1))?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(params, self.fc2_w), g.param(params, self.fc2_b));
        let s = g.linear(h, w2, Some(b2))?;
        Ok(g.sigmoid(s))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let gates = self.gates(g, params, x)?;
        g.channel_scale(x, gates)
    }
}

/// Fuses one component kind from the low and high paths:
/// `Conv(CA(concat(low, up(high))))`.
#[derive(Clone, Copy, Debug)]
pub struct FuseBlock {
    pub attention: ChannelAttention,
    conv: Conv,
}

impl FuseBlock {
    pub fn new(
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        FuseBlock {
            attention: ChannelAttention::new(params, rng, &format!("{name}.ca"), in_channels),
            conv: Conv::new(params, rng, &format!("{name}.conv"), in_channels, out_channels, kernel),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, low: Var, high: Var) -> Result<Var> {
        let (_, h, w) = g.value(low).dims3();
        let up = g.resize(high, h, w);
        let cat = g.concat(&[low, up])?;
        let gated = self.attention.forward(g, params, cat)?;
        self.conv.forward(g, params, gated)
    }

    pub fn decode_fuse(&self, params: &ParamStore, low: &FeatureGrid, high: &FeatureGrid) -> Result<FeatureGrid> {
        let mut g = Graph::new();
        let l = g.input(low.tensor().clone());
        let h = g.input(high.tensor().clone());
        let out = self.forward(&mut g, params, l, h)?;
        FeatureGrid::new(g.value(out).clone())
    }

    pub fn conv_weight(&self) -> ParamId {
        self.conv.weight
    }

    pub fn conv_bias(&self) -> ParamId {
        self.conv.bias
    }
}

/// One 3×3 convolution, bilinear resize to the image size, sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    conv: Conv,
}

impl Head {
    pub fn new(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_channels: usize, out_channels: usize) -> Self {
        Head {
            conv: Conv::new(params, rng, name, in_channels, out_channels, 3),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, fused: Var, height: usize, width: usize) -> Result<Var> {
        let logits = self.conv.forward(g, params, fused)?;
        let logits = g.resize(logits, height, width);
        Ok(g.sigmoid(logits))
    }

    pub fn weight(&self) -> ParamId {
        self.conv.weight
    }

    pub fn bias(&self) -> ParamId {
        self.conv.bias
    }

    fn run(&self, params: &ParamStore, fused: &FeatureGrid, height: usize, width: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(fused.tensor().clone());
        let y = self.forward(&mut g, params, x, height, width)?;
        Ok(g.value(y).clone())
    }
}

/// The three prediction heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub shadow: Head,
    pub background: Head,
    pub recombined: Head,
}

impl Heads {
    pub fn new(params: &mut ParamStore, rng: &mut ChaCha8Rng, in_channels: usize) -> Self {
        Heads {
            shadow: Head::new(params, rng, "head.shadow", in_channels, 1),
            background: Head::new(params, rng, "head.background", in_channels, 3),
            recombined: Head::new(params, rng, "head.recombined", in_channels, 3),
        }
    }

    /// Shadow map, background image and reconstruction at `height × width`.
    pub fn predict_heads(
        &self,
        params: &ParamStore,
        fused_sd: &FeatureGrid,
        fused_bg: &FeatureGrid,
        fused_re: &FeatureGrid,
        (height, width): (usize, usize),
    ) -> Result<(ShadowProbMap, RgbPrediction, RgbPrediction)> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("output resolution must be positive".into()));
        }
        Ok((
            ShadowProbMap::from_tensor(self.shadow.run(params, fused_sd, height, width)?)?,
            RgbPrediction::from_tensor(self.background.run(params, fused_bg, height, width)?)?,
            RgbPrediction::from_tensor(self.recombined.run(params, fused_re, height, width)?)?,
        ))
    }
}
