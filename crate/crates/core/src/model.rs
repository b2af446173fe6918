//! The assembled network: encoder, per-path separation and style modules,
//! parallel decoder and heads, with the ablation switches.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{check_divisible, merge_group_vars, Encoder, EncoderConfig, EncoderRegistry};
use crate::error::{Error, Result};
use crate::fsr::{ComponentVars, Fsr, FuseBlock, Head};
use crate::losses::{shadow_free_target, LossWeights};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::ssf::{capped_channels, DiffPair};
use crate::types::{Image, ShadowMask, ShadowProbMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Merged features decoded straight to the shadow head.
    Baseline,
    /// Separation plus joint background / reconstruction supervision.
    Fsr,
    /// Separation without the joint terms.
    FsrStar,
    /// Everything, including the style constraints.
    #[default]
    FsrSsf,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Fsr, Ablation::FsrStar, Ablation::FsrSsf];

    pub fn has_fsr(self) -> bool {
        self != Ablation::Baseline
    }

    /// Background and reconstruction heads (and their losses) are present.
    pub fn has_joint(self) -> bool {
        matches!(self, Ablation::Fsr | Ablation::FsrSsf)
    }

    pub fn has_style(self) -> bool {
        self == Ablation::FsrSsf
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Fsr => "fsr",
            Ablation::FsrStar => "fsr_star",
            Ablation::FsrSsf => "fsr_ssf",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "ablation",
                name: s.into(),
                available: Ablation::ALL.map(|a| a.as_str()).join(", "),
            })
    }
}

/// Scaling applied to a Gram matrix before the style embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramScale {
    /// Raw channel inner products.
    None,
    /// Divided by the number of spatial positions.
    #[default]
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub ablation: Ablation,
    pub decoder_channels: usize,
    pub decoder_kernel: usize,
    pub diff_pair: DiffPair,
    /// Upper bound on `C²` for the style Gram matrices; wider paths keep
    /// every k-th channel. The toy paths stay below the default.
    pub gram_cap: Option<usize>,
    pub gram_scale: GramScale,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ablation: Ablation::FsrSsf,
            decoder_channels: 16,
            decoder_kernel: 3,
            diff_pair: DiffPair::RecombinedBackground,
            gram_cap: Some(1024),
            gram_scale: GramScale::Spatial,
            encoder: EncoderConfig::default(),
        }
    }
}

/// Two affine maps `C² → C² → C²` over the flattened Gram matrix.
#[derive(Clone, Debug)]
pub struct StyleEmbed {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Channels entering the Gram matrix.
    pub channels: Vec<usize>,
    pub scale: GramScale,
}

impl StyleEmbed {
    pub fn new(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: Vec<usize>, scale: GramScale) -> Self {
        let dim = channels.len() * channels.len();
        StyleEmbed {
            w1: params.add(format!("{name}.l1.weight"), fan_in_uniform(&[dim, dim], dim, rng)),
            b1: params.add(format!("{name}.l1.bias"), fan_in_uniform(&[dim], dim, rng)),
            w2: params.add(format!("{name}.l2.weight"), fan_in_uniform(&[dim, dim], dim, rng)),
            b2: params.add(format!("{name}.l2.bias"), fan_in_uniform(&[dim], dim, rng)),
            channels,
            scale,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, component: Var) -> Result<Var> {
        let x = g.select_channels(component, &self.channels)?;
        let mut m = g.gram(x);
        if self.scale == GramScale::Spatial {
            let (_, h, w) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
            m = g.scale(m, 1.0 / (h * w) as f64);
        }
        let dim = self.channels.len() * self.channels.len();
        let flat = g.reshape(m, &[dim])?;
        let (w1, b1) = (g.param(params, self.w1), g.param(params, self.b1));
        let h = g.linear(flat, w1, Some(b1))?;
        let (w2, b2) = (g.param(params, self.w2), g.param(params, self.b2));
        g.linear(h, w2, Some(b2))
    }
}

#[derive(Clone, Debug)]
struct PathModules {
    channels: usize,
    fsr: Option<Fsr>,
    style: Option<StyleEmbed>,
}

/// Calls into each head, for checking which heads inference touches.
#[derive(Debug, Default)]
pub struct HeadCounters {
    shadow: AtomicUsize,
    background: AtomicUsize,
    recombined: AtomicUsize,
}

impl HeadCounters {
    /// `(shadow, background, recombined)` evaluation counts.
    pub fn snapshot(&self) -> (usize, usize, usize) {
        (
            self.shadow.load(Ordering::Relaxed),
            self.background.load(Ordering::Relaxed),
            self.recombined.load(Ordering::Relaxed),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Shadow path only.
    Infer,
}

#[derive(Clone, Copy, Debug)]
pub struct PathStyles {
    pub shadow: Var,
    pub background: Var,
    pub recombined: Var,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct Outputs {
    pub p_sd: Var,
    pub p_bg: Option<Var>,
    pub p_re: Option<Var>,
    /// Low / high path components when separation is enabled.
    pub components: Option<[ComponentVars; 2]>,
    pub styles: Option<[PathStyles; 2]>,
}

/// Per-sample component losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sd: f64,
    pub re: f64,
    pub bg: f64,
    pub style: f64,
    pub con_low: f64,
    pub diff_low: f64,
    pub con_high: f64,
    pub diff_high: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += weight * other.total;
        self.sd += weight * other.sd;
        self.re += weight * other.re;
        self.bg += weight * other.bg;
        self.style += weight * other.style;
        self.con_low += weight * other.con_low;
        self.diff_low += weight * other.diff_low;
        self.con_high += weight * other.con_high;
        self.diff_high += weight * other.diff_high;
    }

    /// `L^con` summed over both paths.
    pub fn consistency(&self) -> f64 {
        self.con_low + self.con_high
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.sd, self.re, self.bg, self.style].iter().all(|v| v.is_finite())
    }
}

pub struct SddNet {
    config: ModelConfig,
    params: ParamStore,
    encoder: Box<dyn Encoder>,
    low: PathModules,
    high: PathModules,
    fuse_sd: FuseBlock,
    fuse_bg: Option<FuseBlock>,
    fuse_re: Option<FuseBlock>,
    head_sd: Head,
    head_bg: Option<Head>,
    head_re: Option<Head>,
    counters: HeadCounters,
}

impl SddNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(config, seed, &EncoderRegistry::default())
    }

    pub fn with_registry(config: &ModelConfig, seed: u64, registry: &EncoderRegistry) -> Result<Self> {
        if config.decoder_channels == 0 || config.decoder_kernel % 2 == 0 {
            return Err(Error::Config("decoder needs positive channels and an odd kernel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = registry.build(&config.encoder, &mut params, &mut rng)?;
        let level_channels = encoder.level_channels();
        let split = encoder.split_index();
        let low_c: usize = level_channels[..split].iter().sum();
        let high_c: usize = level_channels[split..].iter().sum();
        let ablation = config.ablation;

        let mut path = |name: &str, channels: usize, params: &mut ParamStore| PathModules {
            channels,
            fsr: ablation.has_fsr().then(|| Fsr::new(params, &mut rng, &format!("{name}.fsr"), channels)),
            style: ablation.has_style().then(|| {
                StyleEmbed::new(
                    params,
                    &mut rng,
                    &format!("{name}.ssf"),
                    capped_channels(channels, config.gram_cap),
                    config.gram_scale,
                )
            }),
        };
        let low = path("low", low_c, &mut params);
        let high = path("high", high_c, &mut params);

        let fused_in = low_c + high_c;
        let (dc, dk) = (config.decoder_channels, config.decoder_kernel);
        let fuse_sd = FuseBlock::new(&mut params, &mut rng, "decoder.shadow", fused_in, dc, dk);
        let joint = ablation.has_joint();
        let fuse_bg = joint.then(|| FuseBlock::new(&mut params, &mut rng, "decoder.background", fused_in, dc, dk));
        let fuse_re = joint.then(|| FuseBlock::new(&mut params, &mut rng, "decoder.recombined", fused_in, dc, dk));
        let head_sd = Head::new(&mut params, &mut rng, "head.shadow", dc, 1);
        let head_bg = joint.then(|| Head::new(&mut params, &mut rng, "head.background", dc, 3));
        let head_re = joint.then(|| Head::new(&mut params, &mut rng, "head.recombined", dc, 3));

        Ok(SddNet {
            config: config.clone(),
            params,
            encoder,
            low,
            high,
            fuse_sd,
            fuse_bg,
            fuse_re,
            head_sd,
            head_bg,
            head_re,
            counters: HeadCounters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn counters(&self) -> &HeadCounters {
        &self.counters
    }

    pub fn total_stride(&self) -> usize {
        self.encoder.total_stride()
    }

    /// Channel counts of the merged low and high grids.
    pub fn path_channels(&self) -> (usize, usize) {
        (self.low.channels, self.high.channels)
    }

    pub fn forward(&self, g: &mut Graph, image: &Image, mode: Mode) -> Result<Outputs> {
        check_divisible(image, self.encoder.total_stride())?;
        let params = &self.params;
        let x = g.input(self.encoder.normalize(image));
        let levels = self.encoder.forward(g, params, x)?;
        let split = self.encoder.split_index();
        let merged = [
            merge_group_vars(g, &levels[..split])?,
            merge_group_vars(g, &levels[split..])?,
        ];
        let (h, w) = (image.height(), image.width());
        let paths = [&self.low, &self.high];

        let train = mode == Mode::Train;
        let mut components = None;
        let mut styles = None;
        let shadow_in: [Var; 2] = if self.config.ablation.has_fsr() {
            if train {
                let mut comps = Vec::with_capacity(2);
                for (p, &m) in paths.iter().zip(&merged) {
                    comps.push(p.fsr.as_ref().expect("fsr present").forward(g, params, m)?);
                }
                let comps = [comps[0], comps[1]];
                if self.config.ablation.has_style() {
                    let mut st = Vec::with_capacity(2);
                    for (p, c) in paths.iter().zip(&comps) {
                        let embed = p.style.as_ref().expect("style present");
                        st.push(PathStyles {
                            shadow: embed.forward(g, params, c.shadow)?,
                            background: embed.forward(g, params, c.background)?,
                            recombined: embed.forward(g, params, c.recombined)?,
                            channels: embed.channels.len(),
                        });
                    }
                    styles = Some([st[0], st[1]]);
                }
                components = Some(comps);
                [comps[0].shadow, comps[1].shadow]
            } else {
                let mut sd = Vec::with_capacity(2);
                for (p, &m) in paths.iter().zip(&merged) {
                    sd.push(p.fsr.as_ref().expect("fsr present").shadow.forward(g, params, m)?);
                }
                [sd[0], sd[1]]
            }
        } else {
            merged
        };

        let f_sd = self.fuse_sd.forward(g, params, shadow_in[0], shadow_in[1])?;
        self.counters.shadow.fetch_add(1, Ordering::Relaxed);
        let p_sd = self.head_sd.forward(g, params, f_sd, h, w)?;

        let (mut p_bg, mut p_re) = (None, None);
        if train && self.config.ablation.has_joint() {
            let comps = components.expect("joint training needs separation");
            let fuse_bg = self.fuse_bg.as_ref().expect("background decoder");
            let fuse_re = self.fuse_re.as_ref().expect("reconstruction decoder");
            let f_bg = fuse_bg.forward(g, params, comps[0].background, comps[1].background)?;
            let f_re = fuse_re.forward(g, params, comps[0].recombined, comps[1].recombined)?;
            self.counters.background.fetch_add(1, Ordering::Relaxed);
            p_bg = Some(self.head_bg.as_ref().expect("background head").forward(g, params, f_bg, h, w)?);
            self.counters.recombined.fetch_add(1, Ordering::Relaxed);
            p_re = Some(self.head_re.as_ref().expect("reconstruction head").forward(g, params, f_re, h, w)?);
        }
        Ok(Outputs {
            p_sd,
            p_bg,
            p_re,
            components,
            styles,
        })
    }

    /// Builds the training objective for one sample on top of `out`.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &Outputs,
        image: &Image,
        gt: &ShadowMask,
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        if (gt.height(), gt.width()) != (image.height(), image.width()) {
            return Err(Error::shape(&[image.height(), image.width()], &[gt.height(), gt.width()]));
        }
        let mut b = LossBreakdown::default();
        let l_sd = g.bbce(out.p_sd, gt.values(), weights.epsilon, weights.bbce_reduction)?;
        b.sd = g.value(l_sd).item();
        let mut terms = vec![(l_sd, 1.0)];

        if let (Some(p_re), Some(p_bg)) = (out.p_re, out.p_bg) {
            let l_re = g.mae(p_re, image.tensor().data())?;
            let l_bg = g.background_loss(p_bg, out.p_sd, &shadow_free_target(image, gt))?;
            b.re = g.value(l_re).item();
            b.bg = g.value(l_bg).item();
            terms.push((l_re, weights.alpha));
            terms.push((l_bg, weights.alpha));
        }

        if let Some(styles) = &out.styles {
            let mut parts = Vec::with_capacity(4);
            let mut values = [0.0; 4];
            for (i, s) in styles.iter().enumerate() {
                let con = g.consistency_loss(s.shadow, s.recombined)?;
                let other = match self.config.diff_pair {
                    DiffPair::RecombinedBackground => s.recombined,
                    DiffPair::ShadowBackground => s.shadow,
                };
                let diff = g.differentiate_loss(other, s.background, s.channels)?;
                values[2 * i] = g.value(con).item();
                values[2 * i + 1] = g.value(diff).item();
                parts.push((con, 1.0));
                parts.push((diff, 1.0));
            }
            let l_style = g.weighted_sum(&parts);
            [b.con_low, b.diff_low, b.con_high, b.diff_high] = values;
            b.style = g.value(l_style).item();
            terms.push((l_style, weights.beta));
        }

        let total = g.weighted_sum(&terms);
        b.total = g.value(total).item();
        Ok((total, b))
    }

    /// Shadow probability map at the image's own resolution.
    pub fn predict(&self, image: &Image) -> Result<ShadowProbMap> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, Mode::Infer)?;
        ShadowProbMap::from_tensor(g.value(out.p_sd).clone())
    }
}
