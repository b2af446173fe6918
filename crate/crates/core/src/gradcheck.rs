//! Central finite differences against the analytic gradients of every loss
//! term and every parameterized module.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::encoder::{EncoderConfig, ToyEncoder, Encoder};
use crate::error::Result;
use crate::fsr::{ChannelAttention, Fsr, FuseBlock, Head, ResidualBranch};
use crate::losses::{BbceReduction, LossWeights};
use crate::model::{Ablation, GramScale, Mode, ModelConfig, SddNet, StyleEmbed};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::{Image, ShadowMask};

/// Gradients below this magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    pub step: f64,
    /// Coordinates probed per instance when a problem has more.
    pub max_coords: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            instances: 20,
            tolerance: 1e-4,
            step: 1e-5,
            max_coords: 24,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TermReport {
    pub term: String,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates dropped because a ReLU switched inside `±h`.
    pub kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&TermReport> {
        self.terms
            .iter()
            .filter(|t| !(t.max_rel_error < self.tolerance) || t.coordinates == 0)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.terms {
            let status = if t.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<22} {:>4} instances {:>5} coords {:>3} kinks  max rel err {:.3e}  {status}",
                t.term, t.instances, t.coordinates, t.kinks, t.max_rel_error
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Something with a parameter store whose scalar output can be rebuilt.
pub trait Objective {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn build(&self, g: &mut Graph) -> Result<Var>;

    fn value(&self) -> Result<f64> {
        let mut g = Graph::new();
        let v = self.build(&mut g)?;
        Ok(g.value(v).item())
    }
}

type BuildFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

struct Closure {
    store: ParamStore,
    f: BuildFn,
}

impl Objective for Closure {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn build(&self, g: &mut Graph) -> Result<Var> {
        (self.f)(g, &self.store)
    }
}

struct ModelObjective {
    model: SddNet,
    image: Image,
    mask: ShadowMask,
    weights: LossWeights,
}

impl Objective for ModelObjective {
    fn store(&self) -> &ParamStore {
        self.model.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn build(&self, g: &mut Graph) -> Result<Var> {
        let out = self.model.forward(g, &self.image, Mode::Train)?;
        Ok(self.model.loss(g, &out, &self.image, &self.mask, &self.weights)?.0)
    }
}

struct Probe {
    max_rel: f64,
    coords: usize,
    kinks: usize,
}

fn perturbed(obj: &mut dyn Objective, id: ParamId, k: usize, delta: f64) -> Result<f64> {
    let orig = obj.store().get(id).data()[k];
    obj.store_mut().get_mut(id).data_mut()[k] = orig + delta;
    let v = obj.value();
    obj.store_mut().get_mut(id).data_mut()[k] = orig;
    v
}

/// Compares analytic and numeric partials on up to `max_coords` trainable
/// coordinates, skipping points where the one-sided slopes disagree.
fn probe(obj: &mut dyn Objective, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Probe> {
    let mut g = Graph::new();
    let loss = obj.build(&mut g)?;
    let grads = g.backward(loss);
    let f0 = g.value(loss).item();
    let mut analytic: Vec<Option<Tensor>> = vec![None; obj.store().len()];
    for (id, t) in g.param_grads(&grads) {
        analytic[id.index()] = Some(t.clone());
    }

    let coords: Vec<(ParamId, usize)> = obj
        .store()
        .iter()
        .filter(|(id, _, _)| obj.store().is_trainable(*id))
        .flat_map(|(id, _, t)| (0..t.numel()).map(move |k| (id, k)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= opts.max_coords {
        (0..coords.len()).collect()
    } else {
        sample(rng, coords.len(), opts.max_coords).into_vec()
    };

    let h = opts.step;
    let mut out = Probe {
        max_rel: 0.0,
        coords: 0,
        kinks: 0,
    };
    for c in chosen {
        let (id, k) = coords[c];
        let plus = perturbed(obj, id, k, h)?;
        let minus = perturbed(obj, id, k, -h)?;
        let (right, left) = ((plus - f0) / h, (f0 - minus) / h);
        if (right - left).abs() > 1e-2 * right.abs().max(left.abs()) + 1e-4 {
            out.kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[k]);
        out.max_rel = out.max_rel.max(relative_error(a, numeric));
        out.coords += 1;
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// A binary map with both classes present.
fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
    v[0] = 1.0;
    v[n - 1] = 0.0;
    v
}

/// `Σ r ⊙ x` for a fixed random `r`, turning any output into a scalar.
fn project(g: &mut Graph, x: Var, r: &Tensor) -> Result<Var> {
    let n = r.numel();
    let flat = g.reshape(x, &[n])?;
    let w = g.input(r.clone().reshape(&[1, n])?);
    g.linear(flat, w, None)
}

fn closure(store: ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var> + 'static) -> Closure {
    Closure { store, f: Box::new(f) }
}

type Maker = fn(&mut ChaCha8Rng) -> Result<Box<dyn Objective>>;

fn bbce_term(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let p = s.add("pred", uniform(rng, &[2, 4, 4], 0.05, 0.95));
    let gt = binary(rng, 32);
    Ok(Box::new(closure(s, move |g, s| {
        let v = g.param(s, p);
        g.bbce(v, &gt, 1e-7, BbceReduction::Sum)
    })))
}

fn mae_term(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let p = s.add("pred", uniform(rng, &[2, 4, 4], 0.0, 1.0));
    let target = uniform(rng, &[2, 4, 4], 0.0, 1.0).into_data();
    Ok(Box::new(closure(s, move |g, s| {
        let v = g.param(s, p);
        g.mae(v, &target)
    })))
}

fn background_term(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let bg = s.add("p_bg", uniform(rng, &[3, 4, 4], 0.0, 1.0));
    let sd = s.add("p_sd", uniform(rng, &[1, 4, 4], 0.0, 1.0));
    let target = uniform(rng, &[3, 4, 4], 0.0, 1.0).into_data();
    Ok(Box::new(closure(s, move |g, s| {
        let (b, d) = (g.param(s, bg), g.param(s, sd));
        g.background_loss(b, d, &target)
    })))
}

fn consistency_term(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let a = s.add("rho_sd", uniform(rng, &[4], -1.0, 1.0));
    let b = s.add("rho_re", uniform(rng, &[4], -1.0, 1.0));
    Ok(Box::new(closure(s, move |g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        g.consistency_loss(x, y)
    })))
}

fn differentiate_term(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let a = s.add("rho_re", uniform(rng, &[4], -1.0, 1.0));
    let b = s.add("rho_bg", uniform(rng, &[4], -1.0, 1.0));
    Ok(Box::new(closure(s, move |g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        g.differentiate_loss(x, y, 2)
    })))
}

fn style_total_term(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let sd = s.add("f_sd", uniform(rng, &[2, 4, 4], -0.5, 0.5));
    let bg = s.add("f_bg", uniform(rng, &[2, 4, 4], -0.5, 0.5));
    let embed = StyleEmbed::new(&mut s, rng, "ssf", vec![0, 1], GramScale::Spatial);
    Ok(Box::new(closure(s, move |g, s| {
        let (a, b) = (g.param(s, sd), g.param(s, bg));
        let re = g.add(a, b)?;
        let (r_sd, r_bg, r_re) = (embed.forward(g, s, a)?, embed.forward(g, s, b)?, embed.forward(g, s, re)?);
        let con = g.consistency_loss(r_sd, r_re)?;
        let diff = g.differentiate_loss(r_re, r_bg, 2)?;
        Ok(g.weighted_sum(&[(con, 1.0), (diff, 1.0)]))
    })))
}

fn total_term(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let cfg = ModelConfig {
        ablation: Ablation::FsrSsf,
        decoder_channels: 2,
        encoder: EncoderConfig {
            channels: vec![2, 3],
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = SddNet::new(&cfg, rng.gen())?;
    let px: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = Image::from_hwc(8, 8, &px)?;
    let mask = ShadowMask::new(8, 8, binary(rng, 64))?;
    Ok(Box::new(ModelObjective {
        model,
        image,
        mask,
        weights: LossWeights::default(),
    }))
}

fn grid(s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
    s.add(name, uniform(rng, shape, -1.0, 1.0))
}

fn branch_module(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let x = grid(&mut s, rng, "x", &[2, 4, 4]);
    let m = ResidualBranch::new(&mut s, rng, "branch", 2);
    let r = uniform(rng, &[2, 4, 4], -1.0, 1.0);
    Ok(Box::new(closure(s, move |g, s| {
        let v = g.param(s, x);
        let y = m.forward(g, s, v)?;
        project(g, y, &r)
    })))
}

fn fsr_module(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let x = grid(&mut s, rng, "x", &[2, 4, 4]);
    let m = Fsr::new(&mut s, rng, "fsr", 2);
    let rs: Vec<Tensor> = (0..3).map(|_| uniform(rng, &[2, 4, 4], -1.0, 1.0)).collect();
    Ok(Box::new(closure(s, move |g, s| {
        let v = g.param(s, x);
        let c = m.forward(g, s, v)?;
        let parts = [project(g, c.shadow, &rs[0])?, project(g, c.background, &rs[1])?, project(g, c.recombined, &rs[2])?];
        Ok(g.weighted_sum(&parts.map(|p| (p, 1.0))))
    })))
}

fn attention_module(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let x = grid(&mut s, rng, "x", &[4, 3, 3]);
    let m = ChannelAttention::new(&mut s, rng, "attention", 4);
    let r = uniform(rng, &[4, 3, 3], -1.0, 1.0);
    Ok(Box::new(closure(s, move |g, s| {
        let v = g.param(s, x);
        let y = m.forward(g, s, v)?;
        project(g, y, &r)
    })))
}

fn fuse_module(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let low = grid(&mut s, rng, "low", &[2, 4, 4]);
    let high = grid(&mut s, rng, "high", &[2, 2, 2]);
    let m = FuseBlock::new(&mut s, rng, "fuse", 4, 2, 3);
    let r = uniform(rng, &[2, 4, 4], -1.0, 1.0);
    Ok(Box::new(closure(s, move |g, s| {
        let (a, b) = (g.param(s, low), g.param(s, high));
        let y = m.forward(g, s, a, b)?;
        project(g, y, &r)
    })))
}

fn head_module(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let x = grid(&mut s, rng, "x", &[2, 3, 3]);
    let m = Head::new(&mut s, rng, "head", 2, 3);
    let r = uniform(rng, &[3, 6, 6], -1.0, 1.0);
    Ok(Box::new(closure(s, move |g, s| {
        let v = g.param(s, x);
        let y = m.forward(g, s, v, 6, 6)?;
        project(g, y, &r)
    })))
}

fn style_module(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let x = grid(&mut s, rng, "x", &[3, 4, 4]);
    let m = StyleEmbed::new(&mut s, rng, "ssf", vec![0, 2], GramScale::None);
    let r = uniform(rng, &[4], -1.0, 1.0);
    Ok(Box::new(closure(s, move |g, s| {
        let v = g.param(s, x);
        let y = m.forward(g, s, v)?;
        project(g, y, &r)
    })))
}

fn encoder_module(rng: &mut ChaCha8Rng) -> Result<Box<dyn Objective>> {
    let mut s = ParamStore::new();
    let cfg = EncoderConfig {
        channels: vec![2, 3],
        ..EncoderConfig::default()
    };
    let enc = ToyEncoder::new(&cfg, &mut s, rng)?;
    let x = s.add_frozen("image", uniform(rng, &[3, 8, 8], 0.0, 1.0));
    let rs = [uniform(rng, &[2, 4, 4], -1.0, 1.0), uniform(rng, &[3, 2, 2], -1.0, 1.0)];
    Ok(Box::new(closure(s, move |g, s| {
        let v = g.param(s, x);
        let levels = enc.forward(g, s, v)?;
        let a = project(g, levels[0], &rs[0])?;
        let b = project(g, levels[1], &rs[1])?;
        Ok(g.weighted_sum(&[(a, 1.0), (b, 1.0)]))
    })))
}

pub const TERMS: [(&str, Maker); 14] = [
    ("bbce", bbce_term),
    ("mae", mae_term),
    ("background_loss", background_term),
    ("consistency_loss", consistency_term),
    ("differentiate_loss", differentiate_term),
    ("style_loss_total", style_total_term),
    ("total_loss", total_term),
    ("fsr.branch", branch_module),
    ("fsr.separate", fsr_module),
    ("decoder.attention", attention_module),
    ("decoder.fuse", fuse_module),
    ("head", head_module),
    ("ssf.embed", style_module),
    ("encoder.toy", encoder_module),
];

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut terms = Vec::with_capacity(TERMS.len());
    for (t, (name, make)) in TERMS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(t as u64 * 7919));
        let mut report = TermReport {
            term: name.to_string(),
            instances: 0,
            coordinates: 0,
            kinks: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..opts.instances {
            let mut obj = make(&mut rng)?;
            let p = probe(obj.as_mut(), opts, &mut rng)?;
            report.instances += 1;
            report.coordinates += p.coords;
            report.kinks += p.kinks;
            report.max_rel_error = report.max_rel_error.max(p.max_rel);
        }
        terms.push(report);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        terms,
    })
}
