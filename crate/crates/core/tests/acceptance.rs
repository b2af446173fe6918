//! Acceptance gate: one pass/fail line per criterion, non-zero exit on failure.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sddnet::autograd::{sigmoid, Graph};
use sddnet::checkpoint::Checkpoint;
use sddnet::config::RunConfig;
use sddnet::crf::{refine, CrfParams};
use sddnet::data::{
    batches, binarize_mask, load_and_preprocess, scan_dataset, synthetic_dataset, SamplePair,
};
use sddnet::encoder::{extract_pyramid, merge_group, EncoderConfig, EncoderRegistry};
use sddnet::fsr::{recombine, ChannelAttention, Fsr, FuseBlock, Head, Heads};
use sddnet::gradcheck::{self, GradcheckOptions};
use sddnet::losses::{self, BbceReduction, LossWeights};
use sddnet::metrics::{ber, confusion, region_error_rates, ConfusionCounts, MetricsReport};
use sddnet::model::{Ablation, Mode, ModelConfig};
use sddnet::params::{ParamId, ParamStore};
use sddnet::ssf::{
    consistency_loss, differentiate_loss, gram, style_embed, style_loss_total, DiffPair, StyleEmbedWeights,
    StyleTriple, StyleVector,
};
use sddnet::train::{count_against, evaluate, predict_file, train, EvalOptions, PredictOptions};
use sddnet::{FeatureGrid, Image, RgbPrediction, SddNet, ShadowMask, ShadowProbMap, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn all_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y, tol))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn rand_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureGrid {
    FeatureGrid::new(rand_tensor(rng, &[c, h, w], -1.0, 1.0)).unwrap()
}

fn constant_grid(c: usize, h: usize, w: usize, v: f64) -> FeatureGrid {
    FeatureGrid::new(Tensor::full(&[c, h, w], v)).unwrap()
}

/// "Same" padded stride-1 convolution by nested loops.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let (c, h, wd) = x.dims3();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; o * h * wd];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (y as isize + ky as isize - p, xx as isize + kx as isize - p);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                * x.data()[(ic * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(oc * h + y) * wd + xx] = acc;
            }
        }
    }
    Tensor::from_vec(&[o, h, wd], out).unwrap()
}

/// Half-pixel bilinear resize, no corner alignment.
fn bilinear_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = x.dims3();
    let src = |i: usize, n: usize, on: usize| {
        let s = ((i as f64 + 0.5) * n as f64 / on as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let (y0, y1, wy) = src(y, h, oh);
            for xx in 0..ow {
                let (x0, x1, wx) = src(xx, w, ow);
                let at = |yy: usize, xq: usize| x.data()[(ch * h + yy) * w + xq];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).unwrap()
}

fn matvec(w: &Tensor, x: &[f64], b: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o).map(|r| b[r] + (0..i).map(|k| w.data()[r * i + k] * x[k]).sum::<f64>()).collect()
}

fn set(params: &mut ParamStore, id: ParamId, f: impl Fn(&[usize]) -> Tensor) {
    let shape = params.get(id).shape().to_vec();
    params.set(id, f(&shape)).unwrap();
}

fn sv(v: &[f64]) -> StyleVector {
    StyleVector(v.to_vec())
}

fn mask(h: usize, w: usize, bits: &[u8]) -> ShadowMask {
    ShadowMask::new(h, w, bits.iter().map(|&b| f64::from(b)).collect()).unwrap()
}

fn prob(h: usize, w: usize, v: &[f64]) -> ShadowProbMap {
    ShadowProbMap::new(h, w, v.to_vec()).unwrap()
}

fn toy_encoder(params: &mut ParamStore) -> Box<dyn sddnet::encoder::Encoder> {
    EncoderRegistry::default()
        .build(&EncoderConfig::default(), params, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap()
}

fn encoder_examples() -> Outcome {
    let mut params = ParamStore::new();
    let enc = toy_encoder(&mut params);
    let img = Image::from_hwc(64, 64, &vec![0.3; 64 * 64 * 3]).map_err(err)?;
    let p = extract_pyramid(enc.as_ref(), &params, &img).map_err(err)?;
    let shapes: Vec<_> = p.levels.iter().map(|l| (l.channels(), l.height(), l.width())).collect();
    ensure!(shapes == [(8, 32, 32), (16, 16, 16)], "toy level shapes {shapes:?}");

    params.zero_all();
    let zero = Image::constant(64, 64, 0.0).map_err(err)?;
    let p = extract_pyramid(enc.as_ref(), &params, &zero).map_err(err)?;
    ensure!(p.levels.iter().all(|l| l.tensor().max_abs() == 0.0), "zero encoder output not zero");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = rand_grid(&mut rng, 8, 32, 32);
    ensure!(merge_group(std::slice::from_ref(&g)).map_err(err)? == g, "singleton merge changed the grid");
    let m = merge_group(&[constant_grid(8, 32, 32, 0.25), constant_grid(16, 16, 16, -1.5)]).map_err(err)?;
    ensure!((m.channels(), m.height(), m.width()) == (24, 32, 32), "merged shape");
    let t = m.tensor().data();
    ensure!(
        t[..8 * 1024].iter().all(|v| *v == 0.25) && t[8 * 1024..].iter().all(|v| *v == -1.5),
        "merged constants not preserved"
    );
    Ok("6 examples".into())
}

fn fsr_examples() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamStore::new();
    let fsr = Fsr::new(&mut params, &mut rng, "fsr", 2);
    let x = rand_grid(&mut rng, 2, 4, 4);

    let [w1, b1, w2, b2] = fsr.shadow.param_ids();
    let mut g = Graph::new();
    let xv = g.input(x.tensor().clone());
    let y = fsr.shadow.forward(&mut g, &params, xv).map_err(err)?;
    let first = conv_oracle(x.tensor(), params.get(w1), params.get(b1).data()).map(|v| v.max(0.0));
    let second = conv_oracle(&first, params.get(w2), params.get(b2).data());
    let expect: Vec<f64> = second.data().iter().zip(x.tensor().data()).map(|(a, b)| a + b).collect();
    ensure!(all_close(g.value(y).data(), &expect, 1e-6), "branch differs from nested-loop oracle");

    let mut zeroed = params.clone();
    zeroed.zero_all();
    let (sd, bg) = fsr.separate(&zeroed, &x).map_err(err)?;
    ensure!(sd == x && bg == x, "zero-weight branches are not the identity");
    let zero = constant_grid(2, 4, 4, 0.0);
    let (sd, bg) = fsr.separate(&zeroed, &zero).map_err(err)?;
    ensure!(sd == zero && bg == zero, "zero input did not stay zero");

    let other = rand_grid(&mut rng, 2, 4, 4);
    ensure!(recombine(&zero, &other).map_err(err)? == other, "0 + bg != bg");
    let neg = FeatureGrid::new(other.tensor().map(|v| -v)).map_err(err)?;
    ensure!(recombine(&neg, &other).map_err(err)?.tensor().max_abs() == 0.0, "-bg + bg != 0");
    let sum = recombine(&x, &other).map_err(err)?;
    let expect: Vec<f64> = x.tensor().data().iter().zip(other.tensor().data()).map(|(a, b)| a + b).collect();
    ensure!(sum.tensor().data() == expect.as_slice(), "elementwise sum mismatch");
    Ok("6 examples".into())
}

fn attention_oracle(params: &ParamStore, ca: &ChannelAttention, x: &Tensor) -> Vec<f64> {
    let (c, h, w) = x.dims3();
    let pooled: Vec<f64> = (0..c).map(|k| x.channel(k).iter().sum::<f64>() / (h * w) as f64).collect();
    let hidden: Vec<f64> = matvec(params.get(ca.fc1_w), &pooled, params.get(ca.fc1_b).data())
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    matvec(params.get(ca.fc2_w), &hidden, params.get(ca.fc2_b).data())
        .into_iter()
        .map(sigmoid)
        .collect()
}

fn decoder_examples() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamStore::new();
    let low = rand_grid(&mut rng, 3, 8, 8);
    let high = rand_grid(&mut rng, 2, 4, 4);

    // Identity gating, 1×1 conv copying the first two concatenated channels.
    let fuse = FuseBlock::new(&mut params, &mut rng, "id", 5, 2, 1);
    set(&mut params, fuse.attention.fc2_b, |s| Tensor::full(s, 100.0));
    set(&mut params, fuse.attention.fc2_w, Tensor::zeros);
    set(&mut params, fuse.conv_bias(), Tensor::zeros);
    set(&mut params, fuse.conv_weight(), |s| {
        let mut t = Tensor::zeros(s);
        t.data_mut()[0] = 1.0;
        t.data_mut()[5 + 1] = 1.0;
        t
    });
    let out = fuse.decode_fuse(&params, &low, &high).map_err(err)?;
    ensure!(out.tensor().data() == &low.tensor().data()[..2 * 64], "identity gating did not copy channels");

    let fuse = FuseBlock::new(&mut params, &mut rng, "rand", 5, 4, 3);
    let mut zeroed = params.clone();
    for id in [fuse.attention.fc1_b, fuse.attention.fc2_b, fuse.conv_bias()] {
        set(&mut zeroed, id, Tensor::zeros);
    }
    let z = fuse
        .decode_fuse(&zeroed, &constant_grid(3, 8, 8, 0.0), &constant_grid(2, 4, 4, 0.0))
        .map_err(err)?;
    ensure!(z.tensor().max_abs() == 0.0, "zero inputs gave non-zero fusion");

    let up = bilinear_oracle(high.tensor(), 8, 8);
    let mut cat = low.tensor().data().to_vec();
    cat.extend_from_slice(up.data());
    let cat = Tensor::from_vec(&[5, 8, 8], cat).unwrap();
    let gates = attention_oracle(&params, &fuse.attention, &cat);
    let gated: Vec<f64> = cat.data().iter().enumerate().map(|(i, v)| v * gates[i / 64]).collect();
    let expect = conv_oracle(
        &Tensor::from_vec(&[5, 8, 8], gated).unwrap(),
        params.get(fuse.conv_weight()),
        params.get(fuse.conv_bias()).data(),
    );
    let out = fuse.decode_fuse(&params, &low, &high).map_err(err)?;
    ensure!(all_close(out.tensor().data(), expect.data(), 1e-6), "composed fusion oracle mismatch");

    let heads = Heads::new(&mut params, &mut rng, 4);
    let fused = rand_grid(&mut rng, 4, 6, 6);
    let mut zero_heads = params.clone();
    for h in [heads.shadow, heads.background, heads.recombined] {
        set(&mut zero_heads, h.weight(), Tensor::zeros);
        set(&mut zero_heads, h.bias(), Tensor::zeros);
    }
    let (sd, bg, re) = heads.predict_heads(&zero_heads, &fused, &fused, &fused, (12, 12)).map_err(err)?;
    ensure!(
        [sd.values(), bg.tensor().data(), re.tensor().data()].iter().all(|v| v.iter().all(|p| *p == 0.5)),
        "zero heads are not 0.5"
    );
    let mut hot = zero_heads.clone();
    set(&mut hot, heads.shadow.bias(), |s| Tensor::full(s, 20.0));
    let (sd, _, _) = heads.predict_heads(&hot, &fused, &fused, &fused, (12, 12)).map_err(err)?;
    ensure!(sd.values().iter().all(|p| *p >= 0.9999), "bias +20 did not saturate");

    let head = Head::new(&mut params, &mut rng, "h", 4, 3);
    let mut g = Graph::new();
    let f = g.input(fused.tensor().clone());
    let y = head.forward(&mut g, &params, f, 6, 6).map_err(err)?;
    let expect = conv_oracle(fused.tensor(), params.get(head.weight()), params.get(head.bias()).data()).map(sigmoid);
    ensure!(all_close(g.value(y).data(), expect.data(), 1e-6), "head oracle mismatch");
    Ok("6 examples".into())
}

fn ssf_examples() -> Outcome {
    let m = gram(&constant_grid(1, 2, 2, 1.0));
    ensure!(m.tensor().data() == [4.0], "gram of ones");
    ensure!(gram(&constant_grid(3, 2, 2, 0.0)).tensor().max_abs() == 0.0, "gram of zeros");
    let f = [1.0, 2.0, -3.0, 4.0, 0.0, 5.0, 2.0, -1.0];
    let m = gram(&FeatureGrid::new(Tensor::from_vec(&[2, 2, 2], f.to_vec()).unwrap()).unwrap());
    for a in 0..2 {
        for b in 0..2 {
            let dot: f64 = (0..4).map(|k| f[a * 4 + k] * f[b * 4 + k]).sum();
            ensure!(m.at(a, b) == dot, "gram entry ({a},{b})");
        }
    }

    ensure!(style_embed(&m, &StyleEmbedWeights::identity(4)).map_err(err)?.0 == m.flatten(), "identity embed");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = StyleEmbedWeights {
        w1: rand_tensor(&mut rng, &[4, 4], -0.5, 0.5),
        b1: rand_tensor(&mut rng, &[4], -0.5, 0.5).into_data(),
        w2: rand_tensor(&mut rng, &[4, 4], -0.5, 0.5),
        b2: rand_tensor(&mut rng, &[4], -0.5, 0.5).into_data(),
    };
    let zero_m = gram(&constant_grid(2, 2, 2, 0.0));
    let expect = matvec(&weights.w2, &weights.b1, &weights.b2);
    ensure!(all_close(&style_embed(&zero_m, &weights).map_err(err)?.0, &expect, 1e-12), "affine of zero");
    let expect = matvec(&weights.w2, &matvec(&weights.w1, &m.flatten(), &weights.b1), &weights.b2);
    ensure!(all_close(&style_embed(&m, &weights).map_err(err)?.0, &expect, 1e-9), "two matvecs");

    let e1 = sv(&[1.0, 0.0, 0.0, 0.0]);
    let e2 = sv(&[0.0, 1.0, 0.0, 0.0]);
    ensure!(consistency_loss(&e1, &e1).map_err(err)? == 0.0, "con identical");
    ensure!(close(consistency_loss(&e1, &e2).map_err(err)?, 1.0, 1e-12), "con orthogonal");
    let c = consistency_loss(&sv(&[1.0, 1.0, 0.0, 0.0]), &e1).map_err(err)?;
    ensure!(close(c, 1.0 - 0.5f64.sqrt(), 1e-9), "con 45 degrees: {c}");
    ensure!(differentiate_loss(&e1, &e2, 2).map_err(err)? == 0.0, "diff orthogonal");
    ensure!(close(differentiate_loss(&e1, &e1, 2).map_err(err)?, 0.25, 1e-12), "diff identical");
    ensure!(differentiate_loss(&e1, &sv(&[0.0; 4]), 2).map_err(err)? == 0.0, "diff zero vector");

    let triple = |sd: &StyleVector, bg: &StyleVector, re: &StyleVector| StyleTriple {
        shadow: sd.clone(),
        background: bg.clone(),
        recombined: re.clone(),
        channels: 2,
    };
    let ok_path = triple(&e1, &e2, &e1);
    ensure!(style_loss_total(&ok_path, &ok_path, DiffPair::RecombinedBackground).map_err(err)? == 0.0, "zero total");
    let low = triple(&sv(&[1.0, 1.0, 0.0, 0.0]), &e1, &e1);
    let t = style_loss_total(&low, &ok_path, DiffPair::RecombinedBackground).map_err(err)?;
    ensure!(close(t, 0.54289, 1e-5), "low-only total {t}");
    let same = triple(&e1, &e1, &e1);
    ensure!(close(style_loss_total(&same, &same, DiffPair::RecombinedBackground).map_err(err)?, 0.5, 1e-12), "0.5");
    Ok("15 examples".into())
}

fn loss_examples() -> Outcome {
    let eps = 1e-7;
    let gt = mask(1, 2, &[1, 0]);
    let l = losses::bbce(&prob(1, 2, &[1.0 - eps, eps]), &gt, eps).map_err(err)?;
    ensure!(l.abs() < 1e-6, "perfect bbce {l}");
    let l = losses::bbce(&prob(1, 2, &[0.5, 0.5]), &gt, eps).map_err(err)?;
    ensure!(close(l, std::f64::consts::LN_2, 1e-9), "two-pixel bbce {l}");
    let l = losses::bbce(&prob(1, 2, &[0.3, 0.9]), &mask(1, 2, &[1, 1]), eps).map_err(err)?;
    ensure!(l == 0.0, "all-positive bbce {l}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = RgbPrediction::from_tensor(rand_tensor(&mut rng, &[3, 2, 2], 0.0, 1.0)).map_err(err)?;
    let img = Image::from_chw(a.tensor().clone()).map_err(err)?;
    ensure!(losses::mae(&a, &img).map_err(err)? == 0.0, "mae identical");
    let ones = Image::constant(2, 2, 1.0).map_err(err)?;
    ensure!(losses::mae(&RgbPrediction::constant(2, 2, 0.0).map_err(err)?, &ones).map_err(err)? == 1.0, "unit gap");
    let t = rand_tensor(&mut rng, &[3, 2, 2], 0.0, 1.0);
    let brute = a.tensor().data().iter().zip(t.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / 12.0;
    let l = losses::mae(&a, &Image::from_chw(t).map_err(err)?).map_err(err)?;
    ensure!(close(l, brute, 1e-9), "mae brute force");

    let image = Image::from_chw(rand_tensor(&mut rng, &[3, 2, 2], 0.0, 1.0)).map_err(err)?;
    let bg_is_image = RgbPrediction::from_tensor(image.tensor().clone()).map_err(err)?;
    let l = losses::background_loss(&bg_is_image, &ShadowProbMap::constant(2, 2, 0.0).map_err(err)?, &image, &mask(2, 2, &[0; 4]))
        .map_err(err)?;
    ensure!(l == 0.0, "shadow-free background {l}");
    let l = losses::background_loss(&a, &ShadowProbMap::constant(2, 2, 1.0).map_err(err)?, &image, &mask(2, 2, &[1; 4]))
        .map_err(err)?;
    ensure!(l == 0.0, "fully masked {l}");
    let l = losses::background_loss(
        &RgbPrediction::constant(2, 2, 0.5).map_err(err)?,
        &ShadowProbMap::constant(2, 2, 0.5).map_err(err)?,
        &ones,
        &mask(2, 2, &[1, 0, 0, 0]),
    )
    .map_err(err)?;
    ensure!(close(l, (0.25 + 3.0 * 0.75) / 4.0, 1e-12), "2x2 masked mae {l}");

    let w = LossWeights::default();
    ensure!(losses::total_loss(0.0, 0.0, 0.0, 0.0, &w) == 0.0, "zero total");
    ensure!(close(losses::total_loss(1.0, 0.5, 0.5, 1.0, &w), 1.3, 1e-12), "1.3");
    let no_style = LossWeights { beta: 0.0, ..w };
    ensure!(
        losses::total_loss(1.0, 0.5, 0.5, 7.0, &no_style) == losses::total_loss(1.0, 0.5, 0.5, 0.0, &w),
        "beta = 0 still sees the style term"
    );
    Ok("12 examples".into())
}

fn metric_examples() -> Outcome {
    let gt = mask(2, 2, &[1, 0, 1, 0]);
    let c = confusion(&prob(2, 2, &[1.0, 0.0, 1.0, 0.0]), &gt, 0.5).map_err(err)?;
    ensure!(c.fp == 0 && c.fn_ == 0, "perfect confusion");
    let c = confusion(&prob(2, 2, &[0.0, 1.0, 0.0, 1.0]), &gt, 0.5).map_err(err)?;
    ensure!(c.tp == 0 && c.tn == 0, "inverted confusion");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (p, m) = random_pair(&mut rng);
    ensure!(confusion(&p, &m, 0.5).map_err(err)? == brute_counts(&p, &m, 0.5), "random confusion");

    let cc = |tp, fn_, tn, fp| ConfusionCounts { tp, tn, fp, fn_ };
    ensure!(ber(&cc(50, 0, 50, 0)) == 0.0, "ber perfect");
    ensure!(ber(&cc(0, 50, 0, 50)) == 100.0, "ber failure");
    ensure!(close(ber(&cc(90, 10, 80, 20)), 15.0, 1e-9), "ber 15");
    let (s, n) = region_error_rates(&cc(90, 10, 80, 20));
    ensure!(close(s, 10.0, 1e-9) && close(n, 20.0, 1e-9), "region rates");
    ensure!(region_error_rates(&cc(5, 0, 5, 0)) == (0.0, 0.0), "perfect rates");
    let c = cc(13, 4, 22, 9);
    let (s, n) = region_error_rates(&c);
    ensure!(ber(&c) == 0.5 * (s + n), "ber is the mean");
    Ok("9 examples".into())
}

fn crf_examples() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = Image::from_chw(rand_tensor(&mut rng, &[3, 3, 3], 0.0, 1.0)).map_err(err)?;
    let p = ShadowProbMap::from_tensor(rand_tensor(&mut rng, &[1, 3, 3], 0.05, 0.95)).map_err(err)?;
    let zero_it = CrfParams {
        iterations: 0,
        ..CrfParams::default()
    };
    ensure!(refine(&img, &p, &zero_it).map_err(err)? == p, "zero iterations");
    let no_pair = CrfParams {
        spatial_weight: 0.0,
        bilateral_weight: 0.0,
        ..CrfParams::default()
    };
    ensure!(all_close(refine(&img, &p, &no_pair).map_err(err)?.values(), p.values(), 1e-6), "unary fixed point");

    let params = CrfParams {
        iterations: 1,
        filter: "dense".into(),
        ..CrfParams::default()
    };
    let out = refine(&img, &p, &params).map_err(err)?;
    let expect = dense_mean_field_oracle(&img, p.values(), &params);
    ensure!(all_close(out.values(), &expect, 1e-6), "one-step dense oracle");
    Ok("3 examples".into())
}

/// One exhaustive two-label mean-field step, both labels tracked explicitly.
fn dense_mean_field_oracle(img: &Image, p: &[f64], c: &CrfParams) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let feat = |i: usize| {
        let (y, x) = (i / w, i % w);
        (x as f64, y as f64, [0, 1, 2].map(|ch| img.at(ch, y, x) * 255.0))
    };
    let mut q = vec![[0.0; 2]; n];
    for i in 0..n {
        q[i] = [1.0 - p[i], p[i]];
    }
    (0..n)
        .map(|i| {
            let (xi, yi, ci) = feat(i);
            let mut msg = [0.0; 2];
            let (mut zs, mut zb) = (0.0, 0.0);
            let mut acc_s = [0.0; 2];
            let mut acc_b = [0.0; 2];
            for j in 0..n {
                let (xj, yj, cj) = feat(j);
                let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
                let c2: f64 = ci.iter().zip(cj).map(|(a, b)| (a - b).powi(2)).sum();
                let ks = (-d2 / (2.0 * c.spatial_sigma.powi(2))).exp();
                let kb = (-d2 / (2.0 * c.bilateral_spatial_sigma.powi(2)) - c2 / (2.0 * c.bilateral_color_sigma.powi(2))).exp();
                zs += ks;
                zb += kb;
                for l in 0..2 {
                    acc_s[l] += ks * q[j][l];
                    acc_b[l] += kb * q[j][l];
                }
            }
            for l in 0..2 {
                // Potts penalty: mass of the other label.
                let other = 1 - l;
                msg[l] = c.spatial_weight * acc_s[other] / zs + c.bilateral_weight * acc_b[other] / zb;
            }
            let e = [-(1.0 - p[i]).ln() + msg[0], -p[i].ln() + msg[1]];
            let z = (-e[0]).exp() + (-e[1]).exp();
            (-e[1]).exp() / z
        })
        .collect()
}

fn write_png_pair(root: &Path, split: &str, stem: &str, w: u32, h: u32, value: u8) {
    let (i, m) = (root.join(split).join("images"), root.join(split).join("masks"));
    std::fs::create_dir_all(&i).unwrap();
    std::fs::create_dir_all(&m).unwrap();
    RgbImage::from_pixel(w, h, image::Rgb([value, 60, 90])).save(i.join(format!("{stem}.png"))).unwrap();
    GrayImage::from_pixel(w, h, image::Luma([value])).save(m.join(format!("{stem}.png"))).unwrap();
}

fn data_examples() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    write_png_pair(root, "train", "a", 4, 4, 255);
    ensure!(scan_dataset(root, "train").map_err(err)?.len() == 1, "single pair");
    RgbImage::new(4, 4).save(root.join("train/images/b.png")).unwrap();
    let e = scan_dataset(root, "train").err().map(|e| e.to_string()).unwrap_or_default();
    ensure!(e.contains("b.png"), "orphan not named: {e}");
    for k in 0..638 {
        write_png_pair(root, "test", &format!("{k:04}"), 1, 1, 0);
    }
    let m = scan_dataset(root, "test").map_err(err)?;
    ensure!(m.len() == 638, "{} test pairs", m.len());

    write_png_pair(root, "big", "x", 640, 480, 200);
    let big = scan_dataset(root, "big").map_err(err)?;
    let s = load_and_preprocess(&big, 0, 512, 127.0 / 255.0).map_err(err)?;
    ensure!((s.image.height(), s.image.width(), s.mask.height()) == (512, 512, 512), "512 resize");
    let bin = GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
    for t in [0.001, 0.5, 0.999] {
        ensure!(binarize_mask(&bin, None, t).map_err(err)?.values() == [0.0, 1.0], "binary mask at {t}");
    }
    let mid = GrayImage::from_raw(1, 1, vec![128]).unwrap();
    ensure!(binarize_mask(&mid, None, 127.0 / 255.0).map_err(err)?.values() == [1.0], "128 -> 1");

    let b = batches(10, 4, 3, true);
    ensure!(b.iter().map(Vec::len).collect::<Vec<_>>() == [4, 4, 2], "batch sizes");
    ensure!(b == batches(10, 4, 3, true), "seeded order");
    ensure!(batches(10, 4, 3, false).concat() == (0..10).collect::<Vec<_>>(), "unshuffled order");
    Ok("9 examples".into())
}

fn trainer_examples() -> Outcome {
    let mut cfg = ModelConfig {
        decoder_channels: 4,
        ..ModelConfig::default()
    };
    let sample = &synthetic_dataset(1, 16, 9)[0];
    for (mode, joint) in [(Ablation::Baseline, false), (Ablation::FsrStar, false), (Ablation::Fsr, true)] {
        cfg.ablation = mode;
        let net = SddNet::new(&cfg, 0).map_err(err)?;
        let mut g = Graph::new();
        let out = net.forward(&mut g, &sample.image, Mode::Train).map_err(err)?;
        ensure!(out.p_bg.is_some() == joint && out.p_re.is_some() == joint, "{mode}: auxiliary heads");
        ensure!(out.components.is_some() == mode.has_fsr(), "{mode}: separation");
        let (_, l) = net.loss(&mut g, &out, &sample.image, &sample.mask, &LossWeights::default()).map_err(err)?;
        ensure!(joint || l.total == l.sd, "{mode}: objective is not L_sd alone");
    }

    let perfect = count_against(&ShadowProbMap::from_tensor(sample.mask.tensor().clone()).map_err(err)?, &sample.mask, 0.5);
    ensure!(ber(&perfect) == 0.0, "perfect predictor");
    let half = count_against(&ShadowProbMap::constant(16, 16, 0.5).map_err(err)?, &sample.mask, 0.5);
    let r = MetricsReport::pooled("s", half, 1, 0.5, false);
    ensure!((r.shadow_error, r.non_shadow_error, r.ber) == (0.0, 100.0, 50.0), "constant 0.5 trace");

    let dir = tempfile::tempdir().map_err(err)?;
    let mut net = SddNet::new(&cfg, 0).map_err(err)?;
    for name in ["head.shadow.weight", "head.shadow.bias"] {
        let id = net.params().find(name).ok_or("head parameter missing")?;
        set(net.params_mut(), id, Tensor::zeros);
    }
    let opts = PredictOptions {
        size: 32,
        threshold: 0.5,
        crf: None,
        overlay: false,
    };
    let inputs = dir.path().join("in");
    std::fs::create_dir_all(&inputs).unwrap();
    for (k, (w, h)) in [(30, 20), (64, 48), (7, 9)].iter().enumerate() {
        RgbImage::new(*w, *h).save(inputs.join(format!("img{k}.png"))).unwrap();
        let f = predict_file(&net, &inputs.join(format!("img{k}.png")), &dir.path().join("out"), &opts).map_err(err)?;
        let map = image::open(&f.map).map_err(err)?.to_luma8();
        ensure!(map.dimensions() == (*w, *h), "output resolution {:?}", map.dimensions());
        ensure!(map.pixels().all(|p| p[0] == 128), "black input on zero heads is not 128");
    }
    let written: Vec<_> = std::fs::read_dir(dir.path().join("out")).map_err(err)?.collect();
    ensure!(written.len() == 6, "expected map and binary per input, got {}", written.len());

    let mut g = Graph::new();
    let gt = [1.0, 0.0, 0.0, 1.0];
    let pv = g.variable(Tensor::from_vec(&[1, 2, 2], gt.to_vec()).unwrap());
    let l = g.bbce(pv, &gt, 1e-7, BbceReduction::Sum).map_err(err)?;
    ensure!(g.backward(l).get(pv).map_or(0.0, Tensor::max_abs) < 1e-6, "bbce optimum gradient");
    let rho = Tensor::from_vec(&[4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let sd = g.variable(rho.clone());
    let re = g.input(rho.clone());
    let con = g.consistency_loss(sd, re).map_err(err)?;
    let d = g.backward(con).get(sd).cloned().ok_or("no gradient")?;
    let along: f64 = d.data().iter().zip(rho.data()).map(|(a, b)| a * b).sum();
    ensure!(along.abs() < 1e-12, "cosine not stationary along its direction: {along}");
    Ok("12 examples".into())
}

fn criterion_1() -> Outcome {
    let groups: [(&str, fn() -> Outcome); 9] = [
        ("encoder", encoder_examples),
        ("fsr", fsr_examples),
        ("decoder", decoder_examples),
        ("ssf", ssf_examples),
        ("losses", loss_examples),
        ("metrics", metric_examples),
        ("crf", crf_examples),
        ("data", data_examples),
        ("trainer", trainer_examples),
    ];
    let mut notes = Vec::new();
    for (name, f) in groups {
        let note = f().map_err(|e| format!("{name}: {e}"))?;
        notes.push(format!("{name} {note}"));
    }
    Ok(notes.join(", "))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(&GradcheckOptions::default()).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = report
        .terms
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("no terms")?;
    ensure!(report.passed(), "failing terms:\n{report}");
    ensure!(report.terms.iter().all(|t| t.instances >= 20), "fewer than 20 instances");
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{} terms, worst {} at {:.2e}, {:.1}s",
        report.terms.len(),
        worst.term,
        worst.max_rel_error,
        elapsed.as_secs_f64()
    ))
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn min_eigenvalue(mut a: Vec<f64>, n: usize) -> f64 {
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).fold(f64::INFINITY, f64::min)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let cfg = ModelConfig {
        decoder_channels: 4,
        ..ModelConfig::default()
    };
    let net = SddNet::new(&cfg, 3).map_err(err)?;
    let mut checked = 0;
    for sample in synthetic_dataset(10, 32, 31) {
        let mut g = Graph::new();
        let out = net.forward(&mut g, &sample.image, Mode::Train).map_err(err)?;
        for c in out.components.ok_or("no components")? {
            let (sd, bg, re) = (g.value(c.shadow), g.value(c.background), g.value(c.recombined));
            for i in 0..re.numel() {
                ensure!(re.data()[i] == sd.data()[i] + bg.data()[i], "recombination not exact");
            }
            checked += re.numel();
        }
    }

    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..7), rng.gen_range(1..6), rng.gen_range(1..6));
        let scale = 10f64.powi(rng.gen_range(-2..3));
        let g = FeatureGrid::new(rand_tensor(&mut rng, &[c, h, w], -scale, scale)).map_err(err)?;
        let m = gram(&g);
        for a in 0..c {
            for b in 0..c {
                ensure!(m.at(a, b) == m.at(b, a), "gram not symmetric");
            }
        }
        let lo = min_eigenvalue(m.tensor().data().to_vec(), c);
        ensure!(lo >= -1e-8 * m.trace(), "eigenvalue {lo} below tolerance (trace {})", m.trace());
    }

    for _ in 0..1000 {
        let c = ConfusionCounts {
            tp: rng.gen_range(0..10_000),
            tn: rng.gen_range(0..10_000),
            fp: rng.gen_range(0..10_000),
            fn_: rng.gen_range(0..10_000),
        };
        let (s, n) = region_error_rates(&c);
        ensure!(ber(&c) == 0.5 * (s + n), "ber differs from mean of rates for {c:?}");
    }
    Ok(format!("{checked} recombined values, 100 grams, 1000 counts"))
}

fn random_pair(rng: &mut ChaCha8Rng) -> (ShadowProbMap, ShadowMask) {
    let p: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
    let density = rng.gen_range(0.0..1.0);
    let m: Vec<u8> = (0..256).map(|_| u8::from(rng.gen_bool(density))).collect();
    (prob(16, 16, &p), mask(16, 16, &m))
}

fn brute_counts(p: &ShadowProbMap, m: &ShadowMask, t: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for y in 0..16 {
        for x in 0..16 {
            let i = y * 16 + x;
            match (p.values()[i] >= t, m.values()[i] == 1.0) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    c
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for k in 0..1000 {
        let (p, m) = random_pair(&mut rng);
        let t = if k % 2 == 0 { 0.5 } else { rng.gen_range(0.05..0.95) };
        let got = confusion(&p, &m, t).map_err(err)?;
        let want = brute_counts(&p, &m, t);
        ensure!(got == want, "pair {k}: {got:?} vs {want:?}");
        let recall = |a: u64, b: u64| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
        let textbook = 100.0 * (1.0 - 0.5 * (recall(want.tp, want.fn_) + recall(want.tn, want.fp)));
        ensure!(ber(&got) == ber(&want), "pair {k}: ber differs");
        ensure!(close(ber(&got), textbook, 1e-9), "pair {k}: ber {} vs {textbook}", ber(&got));
    }
    Ok("1000 pairs".into())
}

fn overfit_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.ablation = Ablation::FsrSsf;
    c.train.learning_rate = 5e-3;
    c.train.decay_steps = Some(200);
    c.train.epochs = 10_000;
    c.train.max_steps = Some(500);
    c.train.checkpoint_every_epoch = false;
    c
}

fn training_ber(net: &SddNet, data: &[SamplePair]) -> Result<f64, String> {
    let opts = EvalOptions {
        threshold: 0.5,
        crf: None,
    };
    Ok(evaluate(net, &data.to_vec(), "train", &opts).map_err(err)?.ber)
}

fn criterion_5() -> Outcome {
    let data = synthetic_dataset(8, 64, 7);
    let cfg = overfit_config();
    let start = Instant::now();
    let out = train(&cfg, &data, None).map_err(err)?;
    let elapsed = start.elapsed();
    let b = training_ber(&out.model, &data)?;
    let (first, last) = (out.log.first().ok_or("empty log")?, out.log.last().ok_or("empty log")?);
    let (c0, c1) = (first.loss.consistency(), last.loss.consistency());
    ensure!(out.steps <= 500, "{} steps", out.steps);
    ensure!(b < 5.0, "training BER {b:.3} after {} steps", out.steps);
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    ensure!(c1 < c0, "L_con rose from {c0:.3e} to {c1:.3e}");
    Ok(format!(
        "BER {b:.3} after {} steps in {:.1}s, L_con {c0:.3e} -> {c1:.3e}",
        out.steps,
        elapsed.as_secs_f64()
    ))
}

fn criterion_6() -> Outcome {
    let data = synthetic_dataset(32, 64, 60);
    let mut cfg = overfit_config();
    cfg.train.max_steps = Some(300);
    cfg.seed = 6;
    let mut bers = Vec::new();
    for mode in [Ablation::Baseline, Ablation::Fsr, Ablation::FsrSsf] {
        cfg.model.ablation = mode;
        let out = train(&cfg, &data, None).map_err(err)?;
        bers.push(training_ber(&out.model, &data)?);
    }
    let [base, fsr, full] = [bers[0], bers[1], bers[2]];
    let line = format!("baseline {base:.3}, fsr {fsr:.3}, fsr_ssf {full:.3}");
    ensure!(full <= fsr + 1.0 && fsr <= base + 1.0, "ordering violated: {line}");
    Ok(line)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst: f64 = 0.0;
    for sample in synthetic_dataset(3, 64, 71) {
        let noisy: Vec<f64> = sample
            .mask
            .values()
            .iter()
            .map(|&m| (0.3 + 0.4 * m + rng.gen_range(-0.25..0.25)).clamp(0.01, 0.99))
            .collect();
        let p = prob(64, 64, &noisy);
        let zero_it = CrfParams {
            iterations: 0,
            ..CrfParams::default()
        };
        ensure!(refine(&sample.image, &p, &zero_it).map_err(err)? == p, "zero iterations changed the map");
        let no_pair = CrfParams {
            spatial_weight: 0.0,
            bilateral_weight: 0.0,
            ..CrfParams::default()
        };
        let fixed = refine(&sample.image, &p, &no_pair).map_err(err)?;
        ensure!(all_close(fixed.values(), p.values(), 1e-6), "unary-only refinement moved the map");

        let dense = refine(&sample.image, &p, &CrfParams { filter: "dense".into(), ..CrfParams::default() }).map_err(err)?;
        let fast = refine(&sample.image, &p, &CrfParams { filter: "lattice".into(), ..CrfParams::default() }).map_err(err)?;
        let gap = dense.values().iter().zip(fast.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    ensure!(worst < 5e-3, "dense and lattice differ by {worst:.3e}");
    Ok(format!("dense vs lattice max gap {worst:.2e} on 64x64"))
}

fn criterion_8() -> Outcome {
    let data = synthetic_dataset(6, 32, 80);
    let mut cfg = overfit_config();
    cfg.train.max_steps = Some(12);
    cfg.train.batch_size = 2;
    cfg.seed = 8;
    let a = train(&cfg, &data, None).map_err(err)?;
    let b = train(&cfg, &data, None).map_err(err)?;
    ensure!(a.log == b.log, "step logs differ between identical runs");

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("run.ckpt");
    a.checkpoint(&cfg).save(&path).map_err(err)?;
    let back = Checkpoint::load(&path).map_err(err)?.build_model().map_err(err)?;
    let mut worst: f64 = 0.0;
    for s in &data {
        let (x, y) = (a.model.predict(&s.image).map_err(err)?, back.predict(&s.image).map_err(err)?);
        for (p, q) in x.values().iter().zip(y.values()) {
            worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(f64::MIN_POSITIVE));
        }
    }
    ensure!(worst <= 1e-6, "round trip relative error {worst:.3e}");
    Ok(format!("{} identical steps, round-trip max rel error {worst:.1e}", a.log.len()))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "worked-example oracles", criterion_1),
        (2, "gradient suite", criterion_2),
        (3, "structural identities", criterion_3),
        (4, "metric oracle", criterion_4),
        (5, "overfit sanity", criterion_5),
        (6, "ablation direction", criterion_6),
        (7, "crf contract", criterion_7),
        (8, "determinism and checkpoints", criterion_8),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS {name} ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("criterion 9 SKIP full-dataset benchmark numbers need GPU-scale training and pretrained weights (see README)");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
