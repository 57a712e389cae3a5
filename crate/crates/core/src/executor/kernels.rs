//! Slice-level kernels over H×W×C buffers.
//!
//! The direct kernels accumulate every output element in a fixed
//! `(ky, kx, ci)` order, one output row per task, so results do not depend on
//! the number of worker threads. The im2col/col2im kernels go through a
//! blocked sgemm and agree with the direct ones up to float reassociation.

use rayon::prelude::*;

use crate::graph::{conv_padding, transpose_padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeom {
    /// `(out_h, out_w, pad_top, pad_left)` for a same-padded convolution.
    pub fn conv_out(&self) -> (usize, usize, usize, usize) {
        let (oh, pt) = conv_padding(self.h, self.kh, self.stride);
        let (ow, pl) = conv_padding(self.w, self.kw, self.stride);
        (oh, ow, pt, pl)
    }

    /// `(out_h, out_w, crop_top, crop_left)` for a transposed convolution.
    pub fn transpose_out(&self) -> (usize, usize, usize, usize) {
        let (oh, pt) = transpose_padding(self.h, self.kh, self.stride);
        let (ow, pl) = transpose_padding(self.w, self.kw, self.stride);
        (oh, ow, pt, pl)
    }
}

/// Row-parallel same-padded cross-correlation.
pub fn conv2d_direct(x: &[f32], wt: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow, pt, pl) = g.conv_out();
    let co = g.cout;
    let mut out = vec![0.0f32; oh * ow * co];
    if co == 0 {
        return out;
    }
    out.par_chunks_mut(ow * co).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            let acc = &mut row[ox * co..(ox + 1) * co];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let xbase = (iy as usize * g.w + ix as usize) * g.cin;
                    let wbase = (ky * g.kw + kx) * g.cin * co;
                    for ci in 0..g.cin {
                        let xv = x[xbase + ci];
                        let wrow = &wt[wbase + ci * co..wbase + (ci + 1) * co];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Output pixels processed per sgemm call; bounds the column buffer.
const IM2COL_BLOCK: usize = 2048;

/// Same-padded convolution lowered to column buffers plus sgemm.
pub fn conv2d_im2col(x: &[f32], wt: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow, pt, pl) = g.conv_out();
    let co = g.cout;
    let k = g.kh * g.kw * g.cin;
    let pixels = oh * ow;
    let mut out = vec![0.0f32; pixels * co];
    if co == 0 || pixels == 0 {
        return out;
    }
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1;
    out.par_chunks_mut(IM2COL_BLOCK * co).enumerate().for_each(|(blk, out_blk)| {
        let p0 = blk * IM2COL_BLOCK;
        let m = out_blk.len() / co;
        let owned;
        let cols: &[f32] = if pointwise {
            &x[p0 * k..(p0 + m) * k]
        } else {
            let mut buf = vec![0.0f32; m * k];
            for (r, col) in buf.chunks_mut(k).enumerate() {
                let p = p0 + r;
                let (oy, ox) = (p / ow, p % ow);
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        let dst = (ky * g.kw + kx) * g.cin;
                        col[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
            owned = buf;
            &owned
        };
        sgemm(m, k, co, cols, wt, out_blk);
    });
    out
}

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major.
fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gather-form transposed convolution: output `(oy, ox)` collects input
/// `(iy, ix)` through tap `(ky, kx)` when `oy + crop = iy * stride + ky`.
pub fn conv_transpose_direct(x: &[f32], wt: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow, pt, pl) = g.transpose_out();
    let co = g.cout;
    let s = g.stride;
    let mut out = vec![0.0f32; oh * ow * co];
    if co == 0 {
        return out;
    }
    out.par_chunks_mut(ow * co).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            let acc = &mut row[ox * co..(ox + 1) * co];
            for ky in 0..g.kh {
                let ty = (oy + pt) as isize - ky as isize;
                if ty < 0 || !(ty as usize).is_multiple_of(s) || ty as usize / s >= g.h {
                    continue;
                }
                let iy = ty as usize / s;
                for kx in 0..g.kw {
                    let tx = (ox + pl) as isize - kx as isize;
                    if tx < 0 || !(tx as usize).is_multiple_of(s) || tx as usize / s >= g.w {
                        continue;
                    }
                    let ix = tx as usize / s;
                    let xbase = (iy * g.w + ix) * g.cin;
                    let wbase = (ky * g.kw + kx) * g.cin * co;
                    for ci in 0..g.cin {
                        let xv = x[xbase + ci];
                        let wrow = &wt[wbase + ci * co..wbase + (ci + 1) * co];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Transposed convolution as one sgemm into per-tap columns followed by a
/// serial scatter-add (col2im).
pub fn conv_transpose_col2im(x: &[f32], wt: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow, pt, pl) = g.transpose_out();
    let co = g.cout;
    let taps = g.kh * g.kw;
    let n = taps * co;
    let mut out = vec![0.0f32; oh * ow * co];
    if co == 0 {
        return out;
    }
    // [KH, KW, Cin, Cout] -> [Cin, KH*KW*Cout]
    let mut wmat = vec![0.0f32; g.cin * n];
    for t in 0..taps {
        for ci in 0..g.cin {
            let src = (t * g.cin + ci) * co;
            let dst = ci * n + t * co;
            wmat[dst..dst + co].copy_from_slice(&wt[src..src + co]);
        }
    }
    let m = g.h * g.w;
    let mut cols = vec![0.0f32; m * n];
    sgemm(m, g.cin, n, x, &wmat, &mut cols);
    for iy in 0..g.h {
        for ix in 0..g.w {
            let crow = &cols[(iy * g.w + ix) * n..(iy * g.w + ix + 1) * n];
            for ky in 0..g.kh {
                let oy = (iy * g.stride + ky) as isize - pt as isize;
                if oy < 0 || oy >= oh as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ox = (ix * g.stride + kx) as isize - pl as isize;
                    if ox < 0 || ox >= ow as isize {
                        continue;
                    }
                    let dst = (oy as usize * ow + ox as usize) * co;
                    let src = &crow[(ky * g.kw + kx) * co..(ky * g.kw + kx + 1) * co];
                    for (o, &v) in out[dst..dst + co].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

pub fn max_pool_2x2(x: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow * c];
    if c == 0 || ow == 0 {
        return out;
    }
    out.par_chunks_mut(ow * c).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            let at = |dy: usize, dx: usize| ((2 * oy + dy) * w + 2 * ox + dx) * c;
            let (a, b, cc, d) = (at(0, 0), at(0, 1), at(1, 0), at(1, 1));
            for ch in 0..c {
                row[ox * c + ch] = x[a + ch].max(x[b + ch]).max(x[cc + ch]).max(x[d + ch]);
            }
        }
    });
    out
}

/// Per-pixel softmax over channels with max subtraction.
pub fn softmax(x: &[f32], c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    if c == 0 {
        return out;
    }
    for (src, dst) in x.chunks(c).zip(out.chunks_mut(c)) {
        let m = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Per-pixel channel argmax; ties resolve to the lowest index.
pub fn argmax(x: &[f32], c: usize) -> Vec<f32> {
    if c == 0 {
        return Vec::new();
    }
    x.chunks(c)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = i;
                }
            }
            best as f32
        })
        .collect()
}
