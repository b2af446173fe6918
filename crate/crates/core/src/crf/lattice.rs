use std::collections::HashMap;

use super::{bilateral_features, CrfParams, PairwiseFilter};
use crate::types::Image;

/// Gaussian filtering over `D`-dimensional features by splatting onto the
/// permutohedral lattice, blurring along each lattice axis and slicing back.
pub struct Permutohedral<const D: usize> {
    /// `D + 1` lattice vertices and barycentric weights per input point.
    offsets: Vec<usize>,
    weights: Vec<f64>,
    /// Neighbour pairs for every axis, `None` when the vertex is absent.
    blur: Vec<Vec<(Option<usize>, Option<usize>)>>,
    vertices: usize,
}

impl<const D: usize> Permutohedral<D> {
    pub fn new(features: &[[f64; D]]) -> Self {
        let d = D as i64;
        let n = features.len();
        let inv_std = (2.0f64 / 3.0).sqrt() * (D as f64 + 1.0);
        let scale: Vec<f64> = (0..D)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();

        let mut table: HashMap<[i64; D], usize> = HashMap::new();
        let mut keys: Vec<[i64; D]> = Vec::new();
        let mut offsets = Vec::with_capacity(n * (D + 1));
        let mut weights = Vec::with_capacity(n * (D + 1));
        let mut elevated = vec![0.0; D + 1];
        let mut rem0 = vec![0i64; D + 1];
        let mut rank = vec![0i64; D + 1];
        let mut bary = vec![0.0; D + 2];

        for f in features {
            let mut sm = 0.0;
            for i in (1..=D).rev() {
                let cf = f[i - 1] * scale[i - 1];
                elevated[i] = sm - i as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0i64;
            for i in 0..=D {
                let v = elevated[i] / (d + 1) as f64;
                let up = v.ceil() as i64 * (d + 1);
                let down = v.floor() as i64 * (d + 1);
                rem0[i] = if up as f64 - elevated[i] < elevated[i] - down as f64 { up } else { down };
                sum += rem0[i];
            }
            sum /= d + 1;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..D {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..=D {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..=D {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d + 1;
                    rem0[i] += d + 1;
                } else if rank[i] > d {
                    rank[i] -= d + 1;
                    rem0[i] -= d + 1;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..=D {
                let v = (elevated[i] - rem0[i] as f64) / (d + 1) as f64;
                let r = (d - rank[i]) as usize;
                bary[r] += v;
                bary[r + 1] -= v;
            }
            bary[0] += 1.0 + bary[D + 1];

            for remainder in 0..=d {
                let mut key = [0i64; D];
                for i in 0..D {
                    key[i] = rem0[i] + remainder - if rank[i] > d - remainder { d + 1 } else { 0 };
                }
                let idx = *table.entry(key).or_insert_with(|| {
                    keys.push(key);
                    keys.len() - 1
                });
                offsets.push(idx);
                weights.push(bary[remainder as usize]);
            }
        }

        let blur = (0..=D)
            .map(|axis| {
                keys.iter()
                    .map(|key| {
                        let mut n1 = [0i64; D];
                        let mut n2 = [0i64; D];
                        for k in 0..D {
                            n1[k] = key[k] - 1;
                            n2[k] = key[k] + 1;
                        }
                        if axis < D {
                            n1[axis] = key[axis] + d;
                            n2[axis] = key[axis] - d;
                        }
                        (table.get(&n1).copied(), table.get(&n2).copied())
                    })
                    .collect()
            })
            .collect();

        Permutohedral {
            offsets,
            weights,
            blur,
            vertices: keys.len(),
        }
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn filter(&self, values: &[f64]) -> Vec<f64> {
        let mut grid = vec![0.0; self.vertices];
        for (i, v) in values.iter().enumerate() {
            for k in 0..=D {
                let o = i * (D + 1) + k;
                grid[self.offsets[o]] += self.weights[o] * v;
            }
        }
        let mut next = vec![0.0; self.vertices];
        for axis in &self.blur {
            for (j, &(a, b)) in axis.iter().enumerate() {
                let na = a.map_or(0.0, |a| grid[a]);
                let nb = b.map_or(0.0, |b| grid[b]);
                next[j] = grid[j] + 0.5 * (na + nb);
            }
            std::mem::swap(&mut grid, &mut next);
        }
        let alpha = 1.0 / (1.0 + 0.5f64.powi(D as i32));
        (0..values.len())
            .map(|i| {
                (0..=D)
                    .map(|k| {
                        let o = i * (D + 1) + k;
                        self.weights[o] * grid[self.offsets[o]]
                    })
                    .sum::<f64>()
                    * alpha
            })
            .collect()
    }
}

/// Exact separable spatial Gaussian plus a lattice bilateral term.
pub struct LatticeFilter {
    width: usize,
    height: usize,
    taps: Vec<f64>,
    bilateral: Permutohedral<5>,
}

impl LatticeFilter {
    pub fn new(image: &Image, params: &CrfParams) -> Self {
        let radius = (5.0 * params.spatial_sigma).ceil() as usize;
        let two_var = 2.0 * params.spatial_sigma * params.spatial_sigma;
        LatticeFilter {
            width: image.width(),
            height: image.height(),
            taps: (0..=radius).map(|d| (-((d * d) as f64) / two_var).exp()).collect(),
            bilateral: Permutohedral::new(&bilateral_features(image, params)),
        }
    }

    fn pass(&self, src: &[f64], dst: &mut [f64], len: usize, stride: usize, lines: usize, line_stride: usize) {
        let r = self.taps.len() - 1;
        for l in 0..lines {
            let base = l * line_stride;
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let mut acc = 0.0;
                for j in lo..=hi {
                    acc += self.taps[i.abs_diff(j)] * src[base + j * stride];
                }
                dst[base + i * stride] = acc;
            }
        }
    }
}

impl PairwiseFilter for LatticeFilter {
    fn spatial(&self, values: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut tmp = vec![0.0; h * w];
        let mut out = vec![0.0; h * w];
        self.pass(values, &mut tmp, w, 1, h, w);
        self.pass(&tmp, &mut out, h, w, w, 1);
        out
    }

    fn bilateral(&self, values: &[f64]) -> Vec<f64> {
        self.bilateral.filter(values)
    }
}
