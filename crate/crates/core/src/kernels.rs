//! Numeric kernels shared by the autograd ops: im2col convolution and
//! bilinear resampling (half-pixel centres, no corner alignment).

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, all row-major.
/// `ta`/`tb` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the asserted buffer extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn group_in(&self) -> usize {
        self.in_c / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_c / self.groups
    }

    fn col_rows(&self) -> usize {
        self.group_in() * self.kernel * self.kernel
    }
}

fn im2col(geom: &ConvGeom, input: &[f64], c0: usize, cols: &mut [f64]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let k = geom.kernel;
    let plane = geom.in_h * geom.in_w;
    let mut row = 0;
    for c in c0..c0 + geom.group_in() {
        let chan = &input[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= geom.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * geom.in_w..(iy as usize + 1) * geom.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        *v = if ix < 0 || ix >= geom.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(geom: &ConvGeom, cols: &[f64], c0: usize, grad_in: &mut [f64]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let k = geom.kernel;
    let plane = geom.in_h * geom.in_w;
    let mut row = 0;
    for c in c0..c0 + geom.group_in() {
        let chan = &mut grad_in[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * geom.in_w;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix >= 0 && (ix as usize) < geom.in_w {
                            chan[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. `weight` is `[out_c, in_c/groups, k, k]`.
pub(crate) fn conv2d_forward(
    geom: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let n = geom.out_h() * geom.out_w();
    let rows = geom.col_rows();
    let go = geom.group_out();
    let mut out = vec![0.0; geom.out_c * n];
    let mut cols = vec![0.0; rows * n];
    for g in 0..geom.groups {
        im2col(geom, input, g * geom.group_in(), &mut cols);
        let w = &weight[g * go * rows..(g + 1) * go * rows];
        gemm(go, rows, n, w, false, &cols, false, 0.0, &mut out[g * go * n..(g + 1) * go * n]);
    }
    if let Some(b) = bias {
        for (o, plane) in out.chunks_mut(n).enumerate() {
            for v in plane {
                *v += b[o];
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    geom: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let n = geom.out_h() * geom.out_w();
    let rows = geom.col_rows();
    let go = geom.group_out();
    let mut gi = need.0.then(|| vec![0.0; input.len()]);
    let mut gw = need.1.then(|| vec![0.0; weight.len()]);
    let gb = need.2.then(|| grad_out.chunks(n).map(|p| p.iter().sum()).collect());
    if gi.is_some() || gw.is_some() {
        let mut cols = vec![0.0; rows * n];
        let mut dcols = vec![0.0; rows * n];
        for g in 0..geom.groups {
            let dy = &grad_out[g * go * n..(g + 1) * go * n];
            if let Some(gw) = gw.as_mut() {
                im2col(geom, input, g * geom.group_in(), &mut cols);
                let dst = &mut gw[g * go * rows..(g + 1) * go * rows];
                gemm(go, n, rows, dy, false, &cols, true, 0.0, dst);
            }
            if let Some(gi) = gi.as_mut() {
                let w = &weight[g * go * rows..(g + 1) * go * rows];
                gemm(rows, go, n, w, true, dy, false, 0.0, &mut dcols);
                col2im(geom, &dcols, g * geom.group_in(), gi);
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Per-axis interpolation taps for a resize from `src` to `dst` samples.
pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = if i0 + 1 < src { i0 + 1 } else { i0 };
            let l1 = s - i0 as f64;
            let l1 = if i1 == i0 { 0.0 } else { l1 };
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn resize_bilinear(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return input.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward(
    grad_out: &[f64],
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return grad_out.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gin[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    gin
}
