//! Training loop, evaluation and inference.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::crf::{refine, CrfParams};
use crate::data::{batches, image_to_rgb8, load_image, resize_image, resize_nearest, to_u8, SamplePair, SampleSource};
use crate::error::{Error, Result};
use crate::kernels::resize_bilinear;
use crate::losses::LossWeights;
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::model::{LossBreakdown, Mode, SddNet};
use crate::optim::{Adam, LrSchedule};
use crate::tensor::Tensor;
use crate::types::{Image, ShadowMask, ShadowProbMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Loss and per-parameter gradients (indexed by parameter) of one sample.
pub fn sample_gradients(model: &SddNet, sample: &SamplePair, weights: &LossWeights) -> Result<(Vec<Option<Tensor>>, LossBreakdown)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.image, Mode::Train)?;
    let (loss, breakdown) = model.loss(&mut g, &out, &sample.image, &sample.mask, weights)?;
    let grads = g.backward(loss);
    let mut per_param = vec![None; model.params().len()];
    for (id, t) in g.param_grads(&grads) {
        per_param[id.index()] = Some(t.clone());
    }
    Ok((per_param, breakdown))
}

/// Gradients and losses averaged over the batch, accumulated in batch order.
pub fn batch_gradients(model: &SddNet, batch: &[SamplePair], weights: &LossWeights) -> Result<(Vec<Option<Tensor>>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total: Vec<Option<Tensor>> = vec![None; model.params().len()];
    let mut breakdown = LossBreakdown::default();
    for sample in batch {
        let (grads, b) = sample_gradients(model, sample, weights)?;
        breakdown.accumulate(&b, scale);
        for (acc, g) in total.iter_mut().zip(grads) {
            let Some(mut g) = g else { continue };
            g.scale_assign(scale);
            match acc {
                Some(a) => a.add_assign(&g),
                None => *acc = Some(g),
            }
        }
    }
    Ok((total, breakdown))
}

pub struct TrainOutcome {
    pub model: SddNet,
    pub optimizer: Adam,
    pub log: Vec<StepLog>,
    pub epochs_completed: usize,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.optimizer), config, self.epochs_completed, self.steps)
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains from the config's seed. With `out_dir` set, the resolved config,
/// the step log (JSON lines) and per-epoch checkpoints are written there.
pub fn train(config: &RunConfig, data: &dyn SampleSource, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(config, data, out_dir, &mut |_| {})
}

pub fn train_with(
    config: &RunConfig,
    data: &dyn SampleSource,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
            Some(BufWriter::new(File::create(dir.join("steps.jsonl"))?))
        }
        None => None,
    };

    let mut model = SddNet::new(&config.model, config.seed)?;
    let mut optimizer = Adam::new(model.params(), config.train.adam);
    let t = &config.train;
    let schedule = LrSchedule {
        base: t.learning_rate,
        decay: t.lr_decay,
        decay_steps: t.decay_steps,
    };
    let limit = t.max_steps.unwrap_or(usize::MAX);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    let mut epochs_completed = 0;

    'epochs: for epoch in 0..t.epochs {
        let eseed = epoch_seed(config.seed, epoch);
        let mut flip_rng = ChaCha8Rng::seed_from_u64(eseed.rotate_left(17));
        for indices in batches(data.len(), t.batch_size, eseed, t.shuffle) {
            if step >= limit {
                break 'epochs;
            }
            let mut batch = Vec::with_capacity(indices.len());
            for &i in &indices {
                let s = data.get(i)?;
                let flip = config.data.hflip && flip_rng.gen_bool(0.5);
                batch.push(if flip { s.hflip() } else { s });
            }
            let lr = schedule.at(epoch, step);
            let (grads, loss) = batch_gradients(&model, &batch, &config.loss)?;
            if !loss.is_finite() {
                let ids: Vec<&str> = indices.iter().map(|&i| data.id(i)).collect();
                return Err(Error::NonFiniteLoss {
                    step,
                    batch: ids.join(", "),
                });
            }
            optimizer.step(model.params_mut(), &grads, lr)?;
            let entry = StepLog { epoch, step, lr, loss };
            info!(
                "epoch {epoch} step {step} lr {lr:.3e} L_sd {:.5} L_re {:.5} L_bg {:.5} L_style {:.5} L_con {:.5}",
                loss.sd,
                loss.re,
                loss.bg,
                loss.style,
                loss.consistency()
            );
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &entry).map_err(|e| Error::InvalidInput(e.to_string()))?;
                f.write_all(b"\n")?;
            }
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
        epochs_completed = epoch + 1;
        if let (Some(dir), true) = (out_dir, t.checkpoint_every_epoch) {
            let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
            Checkpoint::capture(&model, Some(&optimizer), config, epochs_completed, step).save(&path)?;
            checkpoints.push(path);
        }
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    let outcome = TrainOutcome {
        model,
        optimizer,
        log,
        epochs_completed,
        steps: step,
        checkpoints,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("final.ckpt");
        outcome.checkpoint(config).save(&path)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub threshold: f64,
    pub crf: Option<CrfParams>,
}

impl EvalOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        EvalOptions {
            threshold: config.eval.threshold,
            crf: config.eval.crf.then(|| config.crf.clone()),
        }
    }
}

/// Shadow map for `image`, refined when CRF options are given.
pub fn shadow_map(model: &SddNet, image: &Image, crf: Option<&CrfParams>) -> Result<ShadowProbMap> {
    let p = model.predict(image)?;
    match crf {
        Some(params) => refine(image, &p, params),
        None => Ok(p),
    }
}

/// Thresholds `pred` and brings it to the mask's resolution by nearest
/// neighbour before counting.
pub fn count_against(pred: &ShadowProbMap, mask: &ShadowMask, threshold: f64) -> ConfusionCounts {
    let bits: Vec<bool> = pred.values().iter().map(|&p| p >= threshold).collect();
    let bits = resize_nearest(&bits, (pred.height(), pred.width()), (mask.height(), mask.width()));
    let mut c = ConfusionCounts::default();
    for (&p, &t) in bits.iter().zip(mask.values()) {
        c.record(p, t > 0.5);
    }
    c
}

/// Pooled confusion over every sample; images that fail are skipped and listed.
pub fn evaluate(model: &SddNet, data: &dyn SampleSource, name: &str, opts: &EvalOptions) -> Result<MetricsReport> {
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::InvalidInput(format!("threshold {} outside (0, 1)", opts.threshold)));
    }
    let mut counts = ConfusionCounts::default();
    let mut skipped = Vec::new();
    let mut used = 0;
    for i in 0..data.len() {
        let outcome = data.get(i).and_then(|s| {
            let mask = data.eval_mask(i)?;
            let p = shadow_map(model, &s.image, opts.crf.as_ref())?;
            Ok(count_against(&p, &mask, opts.threshold))
        });
        match outcome {
            Ok(c) => {
                counts += c;
                used += 1;
            }
            Err(e) => {
                warn!("skipping {}: {e}", data.id(i));
                skipped.push(format!("{}: {e}", data.id(i)));
            }
        }
    }
    let mut report = MetricsReport::pooled(name, counts, used, opts.threshold, opts.crf.is_some());
    report.skipped = skipped;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct PredictOptions {
    /// Square working resolution the network sees.
    pub size: usize,
    pub threshold: f64,
    pub crf: Option<CrfParams>,
    pub overlay: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionFiles {
    pub map: PathBuf,
    pub binary: PathBuf,
    pub overlay: Option<PathBuf>,
}

/// Probability map resized back to `(h, w)`.
pub fn predict_image(model: &SddNet, image: &Image, opts: &PredictOptions) -> Result<ShadowProbMap> {
    let (h, w) = (image.height(), image.width());
    let work = resize_image(image, (opts.size, opts.size))?;
    let p = shadow_map(model, &work, opts.crf.as_ref())?;
    if (h, w) == (opts.size, opts.size) {
        return Ok(p);
    }
    let back = resize_bilinear(p.values(), (1, opts.size, opts.size), (h, w));
    ShadowProbMap::new(h, w, back.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

fn gray(h: usize, w: usize, f: impl Fn(usize) -> u8) -> GrayImage {
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([f(y as usize * w + x as usize)]))
}

/// Writes `<stem>.png` (probability), `<stem>_bin.png` and optionally
/// `<stem>_overlay.png` (input, map and tinted input side by side).
pub fn predict_file(model: &SddNet, input: &Path, out_dir: &Path, opts: &PredictOptions) -> Result<PredictionFiles> {
    let image = load_image(input, None)?;
    let p = predict_image(model, &image, opts)?;
    let (h, w) = (p.height(), p.width());
    std::fs::create_dir_all(out_dir)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("no file stem in {}", input.display())))?;
    let files = PredictionFiles {
        map: out_dir.join(format!("{stem}.png")),
        binary: out_dir.join(format!("{stem}_bin.png")),
        overlay: opts.overlay.then(|| out_dir.join(format!("{stem}_overlay.png"))),
    };
    let v = p.values();
    gray(h, w, |i| to_u8(v[i])).save(&files.map)?;
    gray(h, w, |i| if v[i] >= opts.threshold { 255 } else { 0 }).save(&files.binary)?;
    if let Some(path) = &files.overlay {
        let rgb = image_to_rgb8(&image);
        let mut canvas = image::RgbImage::new(3 * w as u32, h as u32);
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                let src = *rgb.get_pixel(x, y);
                let m = to_u8(v[y as usize * w + x as usize]);
                canvas.put_pixel(x, y, src);
                canvas.put_pixel(x + w as u32, y, image::Rgb([m, m, m]));
                let tinted = if v[y as usize * w + x as usize] >= opts.threshold {
                    image::Rgb([src[0] / 2 + 127, src[1] / 2, src[2] / 2])
                } else {
                    src
                };
                canvas.put_pixel(x + 2 * w as u32, y, tinted);
            }
        }
        canvas.save(path)?;
    }
    Ok(files)
}

pub fn load_model(checkpoint: &Path) -> Result<(SddNet, RunConfig)> {
    let ck = Checkpoint::load(checkpoint)?;
    Ok((ck.build_model()?, ck.config))
}
