//! Raw numeric kernels behind the tape operations.
//!
//! Pure functions over row-major `f64` slices. Summation order inside every
//! kernel is fixed; parallel kernels only split work across disjoint output
//! regions, so results are bit-identical regardless of thread scheduling.

use rayon::prelude::*;

/// Work threshold below which kernels stay single-threaded.
const PAR_MIN_OPS: usize = 1 << 16;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |i: usize, out_row: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (t, &av) in ar.iter().enumerate() {
            let br = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_OPS && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a strided, padded convolution (floor semantics).
pub fn conv2d_out_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return None;
    }
    Some(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    k: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, stride, pad).expect("validated conv dims");
    let mut out = vec![0.0; n * cout * oh * ow];
    let image = |ni: usize, out_img: &mut [f64]| {
        let xi = &x[ni * cin * h * w..(ni + 1) * cin * h * w];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xi[(ci * h + iy as usize) * w + ix as usize]
                                    * k[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out_img[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
    };
    let per_image = cout * oh * ow * cin * kh * kw;
    if n * per_image >= PAR_MIN_OPS && n > 1 {
        out.par_chunks_mut(cout * oh * ow)
            .enumerate()
            .for_each(|(ni, o)| image(ni, o));
    } else {
        for (ni, o) in out.chunks_mut(cout * oh * ow).enumerate() {
            image(ni, o);
        }
    }
    out
}

/// Adjoint of `conv2d` with respect to the input, given output-shaped `g`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad(
    g: &[f64],
    k: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, stride, pad).expect("validated conv dims");
    let mut out = vec![0.0; n * cin * h * w];
    let image = |ni: usize, xg: &mut [f64]| {
        let gi = &g[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gi[(co * oh + oy) * ow + ox];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                xg[(ci * h + iy as usize) * w + ix as usize] +=
                                    gv * k[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    };
    let per_image = cout * oh * ow * cin * kh * kw;
    if n * per_image >= PAR_MIN_OPS && n > 1 {
        out.par_chunks_mut(cin * h * w)
            .enumerate()
            .for_each(|(ni, o)| image(ni, o));
    } else {
        for (ni, o) in out.chunks_mut(cin * h * w).enumerate() {
            image(ni, o);
        }
    }
    out
}

/// Adjoint of `conv2d` with respect to the kernel, given output-shaped `g`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel_grad(
    x: &[f64],
    g: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, stride, pad).expect("validated conv dims");
    let mut out = vec![0.0; cout * cin * kh * kw];
    let filter = |co: usize, kg: &mut [f64]| {
        // kg covers cin*kh*kw entries for this output channel
        for ni in 0..n {
            let xi = &x[ni * cin * h * w..(ni + 1) * cin * h * w];
            let gi = &g[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gi[(co * oh + oy) * ow + ox];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                kg[(ci * kh + ky) * kw + kx] +=
                                    gv * xi[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    };
    let per_filter = n * oh * ow * cin * kh * kw;
    if cout * per_filter >= PAR_MIN_OPS && cout > 1 {
        out.par_chunks_mut(cin * kh * kw)
            .enumerate()
            .for_each(|(co, o)| filter(co, o));
    } else {
        for (co, o) in out.chunks_mut(cin * kh * kw).enumerate() {
            filter(co, o);
        }
    }
    out
}

/// 2x2 average pooling with floor semantics; odd trailing rows/cols are dropped.
pub fn avg_pool2(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for img in 0..n * c {
        let xi = &x[img * h * w..(img + 1) * h * w];
        let oi = &mut out[img * oh * ow..(img + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let y = 2 * oy;
                let xcol = 2 * ox;
                oi[oy * ow + ox] = 0.25
                    * (xi[y * w + xcol]
                        + xi[y * w + xcol + 1]
                        + xi[(y + 1) * w + xcol]
                        + xi[(y + 1) * w + xcol + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_grad(g: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * h * w];
    for img in 0..n * c {
        let gi = &g[img * oh * ow..(img + 1) * oh * ow];
        let oi = &mut out[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = 0.25 * gi[oy * ow + ox];
                let y = 2 * oy;
                let xcol = 2 * ox;
                oi[y * w + xcol] = gv;
                oi[y * w + xcol + 1] = gv;
                oi[(y + 1) * w + xcol] = gv;
                oi[(y + 1) * w + xcol + 1] = gv;
            }
        }
    }
    out
}

/// Whether `from` broadcasts to `to` under trailing-dimension alignment.
pub fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &fd)| fd == 1 || fd == to[off + i])
}

fn aligned_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    // stride 0 marks broadcast (or missing leading) dimensions
    let off = to.len() - from.len();
    let mut strides = vec![0usize; to.len()];
    let mut s = 1usize;
    for i in (0..from.len()).rev() {
        strides[off + i] = if from[i] == 1 { 0 } else { s };
        s *= from[i];
    }
    strides
}

pub fn broadcast(x: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let strides = aligned_strides(from, to);
    let total: usize = to.iter().product();
    let mut out = vec![0.0; total];
    let rank = to.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < to[d] {
                break;
            }
            src -= strides[d] * to[d];
            idx[d] = 0;
        }
    }
    out
}

/// Adjoint of `broadcast`: folds `x` (shaped `from`) down onto shape `to`.
pub fn sum_to(x: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let strides = aligned_strides(to, from);
    let total: usize = to.iter().product();
    let mut out = vec![0.0; total];
    let rank = from.len();
    let mut idx = vec![0usize; rank];
    let mut dst = 0usize;
    for &v in x.iter() {
        out[dst] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            dst += strides[d];
            if idx[d] < from[d] {
                break;
            }
            dst -= strides[d] * from[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn concat(parts: &[&[f64]], shapes: &[&[usize]], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut shape = shapes[0].to_vec();
    shape[axis] = total_axis;
    let mut out = vec![0.0; outer * total_axis * inner];
    for o in 0..outer {
        let mut at = 0usize;
        for (part, ps) in parts.iter().zip(shapes) {
            let len = ps[axis] * inner;
            let src = &part[o * len..(o + 1) * len];
            out[(o * total_axis + at) * inner..(o * total_axis + at) * inner + len]
                .copy_from_slice(src);
            at += ps[axis];
        }
    }
    (out, shape)
}

pub fn slice(x: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax = shape[axis];
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &x[(o * ax + start) * inner..(o * ax + start + len) * inner];
        out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    out
}

/// Embed `x` into zeros, padded along `axis` (adjoint of `slice`).
pub fn pad_zero(
    x: &[f64],
    shape: &[usize],
    axis: usize,
    before: usize,
    after: usize,
) -> (Vec<f64>, Vec<usize>) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax = shape[axis];
    let new_ax = before + ax + after;
    let mut shape_out = shape.to_vec();
    shape_out[axis] = new_ax;
    let mut out = vec![0.0; outer * new_ax * inner];
    for o in 0..outer {
        let dst = (o * new_ax + before) * inner;
        out[dst..dst + ax * inner].copy_from_slice(&x[o * ax * inner..(o + 1) * ax * inner]);
    }
    (out, shape_out)
}

/// Row-wise maximum over the last axis, keeping that axis with extent 1.
pub fn row_max(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            x[r * cols..(r + 1) * cols]
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        })
        .collect()
}

/// Per-sample bilinear sampling grid: source (y, x) for each output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGrid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub src: Vec<(f64, f64)>,
}

/// Build a grid from per-sample affine maps taking output pixel coordinates
/// to source coordinates: `sy = m0*y + m1*x + m2`, `sx = m3*y + m4*x + m5`.
pub fn affine_grid(n: usize, h: usize, w: usize, mats: &[[f64; 6]]) -> WarpGrid {
    assert_eq!(mats.len(), n);
    let mut src = Vec::with_capacity(n * h * w);
    for m in mats {
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                src.push((m[0] * yf + m[1] * xf + m[2], m[3] * yf + m[4] * xf + m[5]));
            }
        }
    }
    WarpGrid { n, h, w, src }
}

/// Sample with bilinear weights; out-of-bounds reads as zero.
pub fn bilinear_warp(x: &[f64], n: usize, c: usize, h: usize, w: usize, grid: &WarpGrid) -> Vec<f64> {
    let (gh, gw) = (grid.h, grid.w);
    let mut out = vec![0.0; n * c * gh * gw];
    let read = |img: &[f64], y: isize, xc: isize| -> f64 {
        if y < 0 || y >= h as isize || xc < 0 || xc >= w as isize {
            0.0
        } else {
            img[y as usize * w + xc as usize]
        }
    };
    for ni in 0..n {
        for (pix, &(sy, sx)) in grid.src[ni * gh * gw..(ni + 1) * gh * gw].iter().enumerate() {
            let y0 = sy.floor();
            let x0 = sx.floor();
            let wy = sy - y0;
            let wx = sx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let img = &x[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
                let v = (1.0 - wy) * (1.0 - wx) * read(img, y0, x0)
                    + (1.0 - wy) * wx * read(img, y0, x0 + 1)
                    + wy * (1.0 - wx) * read(img, y0 + 1, x0)
                    + wy * wx * read(img, y0 + 1, x0 + 1);
                out[(ni * c + ch) * gh * gw + pix] = v;
            }
        }
    }
    out
}

/// Adjoint of `bilinear_warp`: scatter output-shaped `g` back to source pixels.
pub fn bilinear_warp_t(
    g: &[f64],
    n: usize,
    c: usize,
    in_h: usize,
    in_w: usize,
    grid: &WarpGrid,
) -> Vec<f64> {
    let (gh, gw) = (grid.h, grid.w);
    let mut out = vec![0.0; n * c * in_h * in_w];
    for ni in 0..n {
        for (pix, &(sy, sx)) in grid.src[ni * gh * gw..(ni + 1) * gh * gw].iter().enumerate() {
            let y0f = sy.floor();
            let x0f = sx.floor();
            let wy = sy - y0f;
            let wx = sx - x0f;
            let (y0, x0) = (y0f as isize, x0f as isize);
            for ch in 0..c {
                let gv = g[(ni * c + ch) * gh * gw + pix];
                let oimg = &mut out[(ni * c + ch) * in_h * in_w..(ni * c + ch + 1) * in_h * in_w];
                let mut put = |y: isize, xc: isize, wgt: f64| {
                    if y >= 0 && y < in_h as isize && xc >= 0 && xc < in_w as isize {
                        oimg[y as usize * in_w + xc as usize] += wgt * gv;
                    }
                };
                put(y0, x0, (1.0 - wy) * (1.0 - wx));
                put(y0, x0 + 1, (1.0 - wy) * wx);
                put(y0 + 1, x0, wy * (1.0 - wx));
                put(y0 + 1, x0 + 1, wy * wx);
            }
        }
    }
    out
}

/// Bilinear resize of one channel with edge-clamped sampling (value-level
/// utility; not a tape operation).
pub fn bilinear_resize_chan(x: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        for xo in 0..nw {
            let sy = ((y as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((xo as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wy = sy - y0 as f64;
            let wx = sx - x0 as f64;
            out[y * nw + xo] = (1.0 - wy) * (1.0 - wx) * x[y0 * w + x0]
                + (1.0 - wy) * wx * x[y0 * w + x1]
                + wy * (1.0 - wx) * x[y1 * w + x0]
                + wy * wx * x[y1 * w + x1];
        }
    }
    out
}
