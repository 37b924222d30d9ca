//! Raw kernels behind the tape operations. Everything here works on flat
//! row-major slices; shape validation happens in the graph layer.

/// Left-pad a shape of rank ≤ 4 to exactly four extents.
pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}

fn strides4(shape: &[usize; 4]) -> [usize; 4] {
    [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ]
}

/// Strides into a tensor of shape `small` when iterating over `big`, with
/// zero stride on every axis where `small` has extent 1 and `big` does not.
fn broadcast_strides(small: &[usize; 4], big: &[usize; 4]) -> [usize; 4] {
    let s = strides4(small);
    let mut out = [0; 4];
    for k in 0..4 {
        out[k] = if small[k] == 1 && big[k] != 1 { 0 } else { s[k] };
    }
    out
}

/// Sum `input` (shape `big`) into a tensor of shape `small`, where `small`
/// has extent 1 on every reduced axis.
pub(crate) fn reduce_into(input: &[f64], big: &[usize; 4], small: &[usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; small.iter().product()];
    let bs = broadcast_strides(small, big);
    let mut i = 0;
    for a in 0..big[0] {
        for b in 0..big[1] {
            for c in 0..big[2] {
                let base = a * bs[0] + b * bs[1] + c * bs[2];
                if bs[3] == 0 {
                    let acc: f64 = input[i..i + big[3]].iter().sum();
                    out[base] += acc;
                    i += big[3];
                } else {
                    for d in 0..big[3] {
                        out[base + d] += input[i];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

/// Broadcast `input` (shape `small`, extent 1 on expanded axes) to `big`.
pub(crate) fn expand_into(input: &[f64], small: &[usize; 4], big: &[usize; 4]) -> Vec<f64> {
    let mut out = Vec::with_capacity(big.iter().product());
    let bs = broadcast_strides(small, big);
    for a in 0..big[0] {
        for b in 0..big[1] {
            for c in 0..big[2] {
                let base = a * bs[0] + b * bs[1] + c * bs[2];
                if bs[3] == 0 {
                    out.extend(std::iter::repeat_n(input[base], big[3]));
                } else {
                    out.extend_from_slice(&input[base..base + big[3]]);
                }
            }
        }
    }
    out
}

/// `(outer, axis extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow for large |x|.
pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// One axis of a bilinear resampling plan (half-pixel centers, edge clamp).
#[derive(Clone, Debug)]
pub(crate) struct LinearTaps {
    pub taps: Vec<(usize, usize, f64, f64)>,
}

impl LinearTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let l1 = src - i0 as f64;
                (i0, i1, 1.0 - l1, l1)
            })
            .collect();
        LinearTaps { taps }
    }
}

pub(crate) fn upsample_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    ty: &LinearTaps,
    tx: &LinearTaps,
) -> Vec<f64> {
    let (ho, wo) = (ty.taps.len(), tx.taps.len());
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.taps.iter().enumerate() {
                dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    g: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    ty: &LinearTaps,
    tx: &LinearTaps,
) -> Vec<f64> {
    let (ho, wo) = (ty.taps.len(), tx.taps.len());
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.taps.iter().enumerate() {
                let v = src[oy * wo + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}
