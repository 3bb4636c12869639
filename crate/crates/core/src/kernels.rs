//! Raw numeric kernels on flat NCHW buffers. Both the tape ops and the
//! tape-free helpers call into these.

/// `C = alpha * A * B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, rsa, csa));
    assert!(b.len() >= last(k, n, rsb, csb));
    assert!(c.len() >= last(m, n, rsc, csc));
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ic: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.ic {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

fn col2im(g: &ConvGeom, cols: &[f64], dinput: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.ic {
        let plane = &mut dinput[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.ic * g.h * g.w;
    let out_len = g.oc * p;
    let mut out = vec![0.0; g.n * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..g.n {
        let x = &input[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (oc, row) in y.chunks_mut(p).enumerate() {
                row.fill(bias[oc]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        gemm(g.oc, k, p, 1.0, weight, k, 1, src, p, 1, 1.0, y, p, 1);
    }
    out
}

/// Gradients of a convolution. Each output is only computed when requested.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    want: (bool, bool, bool),
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let in_len = g.ic * g.h * g.w;
    let out_len = g.oc * p;
    let mut dinput = want.0.then(|| vec![0.0; g.n * in_len]);
    let mut dweight = want.1.then(|| vec![0.0; g.oc * k]);
    let mut dbias = want.2.then(|| vec![0.0; g.oc]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![0.0; if want.0 && !g.is_pointwise() { k * p } else { 0 }];
    for b in 0..g.n {
        let x = &input[b * in_len..(b + 1) * in_len];
        let dy = &dout[b * out_len..(b + 1) * out_len];
        if let Some(db) = dbias.as_mut() {
            for (oc, row) in dy.chunks(p).enumerate() {
                db[oc] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dweight.as_mut() {
            let src: &[f64] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            // dW[oc, K] += dY[oc, P] * cols[K, P]^T
            gemm(g.oc, p, k, 1.0, dy, p, 1, src, 1, p, 1.0, dw, k, 1);
        }
        if let Some(dx) = dinput.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, g.oc, p, 1.0, weight, 1, k, dy, p, 1, 1.0, dxb, p, 1);
            } else {
                gemm(k, g.oc, p, 1.0, weight, 1, k, dy, p, 1, 0.0, &mut dcols, p, 1);
                col2im(g, &dcols, dxb);
            }
        }
    }
    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}

/// Per-plane standardization. Returns the normalized output and the
/// per-plane inverse standard deviations.
pub(crate) fn instance_norm_forward(x: &[f64], planes: usize, m: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; planes];
    for p in 0..planes {
        let src = &x[p * m..(p + 1) * m];
        let mean = src.iter().sum::<f64>() / m as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[p] = is;
        for (o, v) in out[p * m..(p + 1) * m].iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

pub(crate) fn instance_norm_backward(xhat: &[f64], inv: &[f64], dy: &[f64], m: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    for (p, &is) in inv.iter().enumerate() {
        let r = p * m..(p + 1) * m;
        let (xh, g) = (&xhat[r.clone()], &dy[r.clone()]);
        let mean_g = g.iter().sum::<f64>() / m as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / m as f64;
        for ((d, &gi), &xi) in dx[r].iter_mut().zip(g).zip(xh) {
            *d = is * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Half-sample symmetric boundary folding with period `2n`. The resulting
/// blur operator is symmetric, so it preserves plane sums exactly.
#[inline]
fn fold(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

/// Separable blur of every `h x w` plane of `x` with the 1-D taps `k`.
pub(crate) fn blur_planes(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; hw];
    for (src, dst) in x.chunks(hw).zip(out.chunks_mut(hw)) {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let sx = fold(xx as isize + t as isize - r, w);
                    acc += kv * src[y * w + sx];
                }
                tmp[y * w + xx] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let sy = fold(y as isize + t as isize - r, h);
                    acc += kv * tmp[sy * w + xx];
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    out
}

pub(crate) fn nn_upsample(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
    out
}

/// Adjoint of [`nn_upsample`]: sums each `f x f` block.
pub(crate) fn block_sum(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / f) * ow + xx / f] += src[y * w + xx];
            }
        }
    }
    out
}

pub(crate) fn softmax_planes(x: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(m).zip(out.chunks_mut(m)) {
        let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mx).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

/// Bilinear resampling of every plane (half-pixel centers, edge clamped).
pub(crate) fn bilinear_resize(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, h, oh);
            for xx in 0..ow {
                let (x0, x1, fx) = coord(xx, w, ow);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_is_half_sample_symmetric() {
        let n = 4;
        let got: Vec<usize> = (-3..7).map(|i| fold(i, n)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        for s in [0.3, 1.0, 2.5] {
            let k = gaussian_kernel_1d(s);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_preserves_sum_with_wide_kernel() {
        let x: Vec<f64> = (0..15).map(|i| (i * i % 7) as f64).collect();
        let k = gaussian_kernel_1d(4.0);
        let y = blur_planes(&x, 3, 5, &k);
        let (a, b): (f64, f64) = (x.iter().sum(), y.iter().sum());
        assert!(((a - b) / a).abs() < 1e-12);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(bilinear_resize(&x, 1, 3, 4, 3, 4), x);
    }
}
