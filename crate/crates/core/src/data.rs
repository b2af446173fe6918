//! Paired image/mask datasets, preprocessing, batching and a synthetic
//! shadow generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::resize_bilinear;
use crate::tensor::Tensor;
use crate::types::{Image, ShadowMask};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
pub const INDEX_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image: Image,
    pub mask: ShadowMask,
    pub id: String,
}

impl SamplePair {
    pub fn hflip(&self) -> SamplePair {
        let flip = |t: &Tensor| {
            let (c, h, w) = t.dims3();
            let mut out = Vec::with_capacity(t.numel());
            for ch in 0..c {
                for y in 0..h {
                    let row = &t.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                    out.extend(row.iter().rev());
                }
            }
            Tensor::from_vec(&[c, h, w], out).expect("same size")
        };
        let (h, w) = (self.mask.height(), self.mask.width());
        SamplePair {
            image: Image::from_chw(flip(self.image.tensor())).expect("flip keeps range"),
            mask: ShadowMask::new(h, w, flip(self.mask.tensor()).into_data()).expect("flip keeps binary"),
            id: self.id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// One `id<TAB>image<TAB>mask` line per pair, paths relative to the split.
    pub fn to_index(&self) -> String {
        let base = self.root.join(&self.split);
        let rel = |p: &Path| p.strip_prefix(&base).unwrap_or(p).display().to_string();
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.id, rel(&e.image), rel(&e.mask));
        }
        s
    }

    pub fn from_index(root: &Path, split: &str, text: &str) -> Result<Self> {
        let base = root.join(split);
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split('\t').collect();
            let [id, image, mask] = parts[..] else {
                return Err(Error::InvalidInput(format!("manifest line {} is malformed", n + 1)));
            };
            entries.push(ManifestEntry {
                id: id.into(),
                image: base.join(image),
                mask: base.join(mask),
            });
        }
        if entries.is_empty() {
            return Err(Error::EmptyDataset(base));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            split: split.into(),
            entries,
        })
    }

    pub fn write_index(&self) -> Result<PathBuf> {
        let path = self.root.join(&self.split).join(INDEX_FILE);
        std::fs::write(&path, self.to_index())?;
        Ok(path)
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for entry in read {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::InvalidInput(format!(
                "two files share the stem {stem}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Pairs `root/split/images/*` with `root/split/masks/*` by file stem.
pub fn scan_dataset(root: &Path, split: &str) -> Result<DatasetManifest> {
    let base = root.join(split);
    let images = stems(&base.join("images"))?;
    let masks = stems(&base.join("masks"))?;
    if let Some((_, p)) = images.iter().find(|(s, _)| !masks.contains_key(*s)) {
        return Err(Error::Unpaired(file_name(p)));
    }
    if let Some((_, p)) = masks.iter().find(|(s, _)| !images.contains_key(*s)) {
        return Err(Error::Unpaired(file_name(p)));
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(base));
    }
    let entries = images
        .into_iter()
        .map(|(id, image)| {
            let mask = masks[&id].clone();
            ManifestEntry { id, image, mask }
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: split.into(),
        entries,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads an RGB image into `[0, 1]`, optionally resized bilinearly.
pub fn load_image(path: &Path, size: Option<(usize, usize)>) -> Result<Image> {
    let rgb = open(path)?.to_rgb8();
    let img = rgb_to_image(&rgb)?;
    match size {
        Some(s) => resize_image(&img, s),
        None => Ok(img),
    }
}

pub fn rgb_to_image(rgb: &RgbImage) -> Result<Image> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let px: Vec<f64> = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Image::from_hwc(h, w, &px)
}

pub fn resize_image(img: &Image, (oh, ow): (usize, usize)) -> Result<Image> {
    if (img.height(), img.width()) == (oh, ow) {
        return Ok(img.clone());
    }
    let data = resize_bilinear(img.tensor().data(), (3, img.height(), img.width()), (oh, ow));
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Image::from_chw(Tensor::from_vec(&[3, oh, ow], data)?)
}

/// Nearest-neighbour resize of a row-major plane.
pub fn resize_nearest<T: Copy>(src: &[T], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<T> {
    let pick = |i: usize, n: usize, on: usize| (((2 * i + 1) * n) / (2 * on)).min(n - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pick(y, h, oh);
        for x in 0..ow {
            out.push(src[sy * w + pick(x, w, ow)]);
        }
    }
    out
}

/// Grey levels above `threshold · 255` become shadow.
pub fn binarize_mask(gray: &GrayImage, size: Option<(usize, usize)>, threshold: f64) -> Result<ShadowMask> {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let (oh, ow) = size.unwrap_or((h, w));
    let px = resize_nearest(gray.as_raw(), (h, w), (oh, ow));
    let bits: Vec<bool> = px.iter().map(|&v| f64::from(v) / 255.0 > threshold).collect();
    ShadowMask::from_bools(oh, ow, &bits)
}

pub fn load_mask(path: &Path, size: Option<(usize, usize)>, threshold: f64) -> Result<ShadowMask> {
    binarize_mask(&open(path)?.to_luma8(), size, threshold)
}

pub fn load_and_preprocess(manifest: &DatasetManifest, index: usize, size: usize, threshold: f64) -> Result<SamplePair> {
    let e = manifest
        .entries
        .get(index)
        .ok_or_else(|| Error::InvalidInput(format!("sample {index} outside manifest of {}", manifest.len())))?;
    Ok(SamplePair {
        image: load_image(&e.image, Some((size, size)))?,
        mask: load_mask(&e.mask, Some((size, size)), threshold)?,
        id: e.id.clone(),
    })
}

/// Sample indices grouped into batches; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Source of training or evaluation samples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn id(&self, index: usize) -> &str;
    fn get(&self, index: usize) -> Result<SamplePair>;

    /// Ground truth used for scoring; defaults to the preprocessed mask.
    fn eval_mask(&self, index: usize) -> Result<ShadowMask> {
        Ok(self.get(index)?.mask)
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [SamplePair] {
    fn len(&self) -> usize {
        <[SamplePair]>::len(self)
    }

    fn id(&self, index: usize) -> &str {
        &self[index].id
    }

    fn get(&self, index: usize) -> Result<SamplePair> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<SamplePair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn id(&self, index: usize) -> &str {
        &self[index].id
    }

    fn get(&self, index: usize) -> Result<SamplePair> {
        Ok(self[index].clone())
    }
}

/// Disk-backed dataset; every entry is decoded once up front to fail early.
pub struct DiskDataset {
    pub manifest: DatasetManifest,
    pub size: usize,
    pub threshold: f64,
}

impl DiskDataset {
    pub fn open(manifest: DatasetManifest, size: usize, threshold: f64) -> Result<Self> {
        let ds = DiskDataset {
            manifest,
            size,
            threshold,
        };
        for i in 0..ds.manifest.len() {
            ds.get(i)?;
        }
        Ok(ds)
    }
}

impl SampleSource for DiskDataset {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.manifest.entries[index].id
    }

    fn get(&self, index: usize) -> Result<SamplePair> {
        load_and_preprocess(&self.manifest, index, self.size, self.threshold)
    }

    /// The mask at its stored resolution.
    fn eval_mask(&self, index: usize) -> Result<ShadowMask> {
        load_mask(&self.manifest.entries[index].mask, None, self.threshold)
    }
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Light textured backgrounds with one to three dark polygons laid over
/// them by multiplicative darkening; the mask is the polygon union.
pub fn synthetic_pair(size: usize, rng: &mut impl Rng, id: String) -> SamplePair {
    let s = size as f64;
    let base: [f64; 3] = [rng.gen_range(0.6..0.95), rng.gen_range(0.6..0.95), rng.gen_range(0.6..0.95)];
    let tilt = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let freq = rng.gen_range(2.0..6.0);
    let polys: Vec<Vec<(f64, f64)>> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let (cx, cy) = (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s);
            let k = rng.gen_range(3..=7);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            angles
                .into_iter()
                .map(|a| {
                    let r = rng.gen_range(0.12..0.3) * s;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect()
        })
        .collect();
    let darkening = rng.gen_range(0.35..0.6);

    let mut px = Vec::with_capacity(size * size * 3);
    let mut bits = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s, y as f64 / s);
            let texture = 0.05 * (freq * std::f64::consts::TAU * (u + 0.5 * v)).sin() + rng.gen_range(-0.02..0.02);
            let shade = tilt.0 * (u - 0.5) + tilt.1 * (v - 0.5) + texture;
            let shadow = polys.iter().any(|p| inside(p, x as f64 + 0.5, y as f64 + 0.5));
            let factor = if shadow { darkening } else { 1.0 };
            for b in base {
                px.push(((b + shade) * factor).clamp(0.0, 1.0));
            }
            bits.push(shadow);
        }
    }
    SamplePair {
        image: Image::from_hwc(size, size, &px).expect("values clamped"),
        mask: ShadowMask::from_bools(size, size, &bits).expect("binary"),
        id,
    }
}

pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| synthetic_pair(size, &mut rng, format!("syn_{i:04}"))).collect()
}

pub fn image_to_rgb8(img: &Image) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(img.at(c, y as usize, x as usize))))
    })
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes samples in the canonical `split/{images,masks}` layout.
pub fn write_split(root: &Path, split: &str, samples: &[SamplePair]) -> Result<DatasetManifest> {
    let (img_dir, mask_dir) = (root.join(split).join("images"), root.join(split).join("masks"));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    for s in samples {
        image_to_rgb8(&s.image).save(img_dir.join(format!("{}.png", s.id)))?;
        let (h, w) = (s.mask.height(), s.mask.width());
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if s.mask.values()[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
        });
        mask.save(mask_dir.join(format!("{}.png", s.id)))?;
    }
    let manifest = scan_dataset(root, split)?;
    manifest.write_index()?;
    Ok(manifest)
}
