//! Numeric kernels behind the graph ops: tiled im2col convolution through
//! the platform GEMM, dense-layer products, pooling, padding.
//!
//! Every kernel accumulates into its output (`+=` semantics) and reduces in
//! a fixed order with fixed tile sizes, so results are bit-identical
//! regardless of how many worker threads execute the tiles.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Spatial tile width (output columns per im2col block).
const TILE_N: usize = 16384;
/// Reduction tile for kernel-gradient GEMMs (spatial positions per partial).
const TILE_K: usize = 8192;
/// Output rows per task in dense-layer products.
const ROW_CHUNK: usize = 256;
/// Output columns per task in transposed dense products.
const COL_CHUNK: usize = 4096;

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// Fills `cols` (shape [c*9, j1-j0], row-major) with the 3x3 zero-padded
/// patches of `x` ([c,h,w]) for flat spatial positions [j0, j1).
fn im2col_tile<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, j0: usize, j1: usize, cols: &mut [T]) {
    let jt = j1 - j0;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * jt);
    for v in cols.iter_mut() {
        *v = T::zero();
    }
    let i_lo = j0 / w;
    let i_hi = (j1 - 1) / w;
    for ch in 0..c {
        for di in 0..3usize {
            for dj in 0..3usize {
                let row = (ch * 9 + di * 3 + dj) * jt;
                let shift = dj as isize - 1;
                for i in i_lo..=i_hi {
                    let si = i as isize + di as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let seg0 = j0.max(i * w);
                    let seg1 = j1.min((i + 1) * w);
                    let c0 = seg0 - i * w;
                    let c1 = seg1 - i * w;
                    let s0 = if shift < 0 { c0.max(1) } else { c0 };
                    let s1 = if shift > 0 { c1.min(w - 1) } else { c1 };
                    if s0 >= s1 {
                        continue;
                    }
                    let src = ch * hw + si as usize * w + (s0 as isize + shift) as usize;
                    let dst = row + (seg0 - j0) + (s0 - c0);
                    let len = s1 - s0;
                    cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
                }
            }
        }
    }
}

/// out[o,h,w] += correlation of x[c,h,w] with kmat[o, c*9] (3x3, zero pad 1).
pub fn conv3x3_acc<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kmat: &[T], o: usize, out: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(x.len(), c * hw);
    debug_assert_eq!(kmat.len(), o * c * 9);
    debug_assert_eq!(out.len(), o * hw);
    let n_tiles = hw.div_ceil(TILE_N);
    let out_ptr = SendPtr(out.as_mut_ptr());
    (0..n_tiles).into_par_iter().for_each(|ti| {
        let j0 = ti * TILE_N;
        let j1 = hw.min(j0 + TILE_N);
        let jt = j1 - j0;
        let mut cols = vec![T::zero(); c * 9 * jt];
        im2col_tile(x, c, h, w, j0, j1, &mut cols);
        let p = &out_ptr;
        unsafe {
            T::gemm(
                o,
                c * 9,
                jt,
                T::one(),
                kmat.as_ptr(),
                (c * 9) as isize,
                1,
                cols.as_ptr(),
                jt as isize,
                1,
                T::one(),
                p.0.add(j0),
                hw as isize,
                1,
            );
        }
    });
}

/// Returns k' with k'[c,o,:,:] = k[o,c,::-1,::-1] (channel swap + spatial flip),
/// so that the gradient of a correlation w.r.t. its input is again a correlation.
pub fn flip_swap<T: Scalar>(k: &[T], o: usize, c: usize) -> Vec<T> {
    debug_assert_eq!(k.len(), o * c * 9);
    let mut out = vec![T::zero(); o * c * 9];
    for io in 0..o {
        for ic in 0..c {
            for t in 0..9 {
                out[(ic * o + io) * 9 + (8 - t)] = k[(io * c + ic) * 9 + t];
            }
        }
    }
    out
}

/// out[c,h,w] += input-gradient of the correlation: upstream g[o,h,w]
/// correlated with the flipped/swapped kernel.
pub fn conv_t_acc<T: Scalar>(g: &[T], o: usize, h: usize, w: usize, k: &[T], c: usize, out: &mut [T]) {
    let kf = flip_swap(k, o, c);
    conv3x3_acc(g, o, h, w, &kf, c, out);
}

/// out[o, c*9] += kernel-gradient of the correlation: dk[o,c,di,dj] =
/// sum_p g[o,p] * patch(x)[c,di,dj,p]. Reduction over spatial tiles is
/// summed serially in tile order.
pub fn conv_kg_acc<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &[T], o: usize, out: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(x.len(), c * hw);
    debug_assert_eq!(g.len(), o * hw);
    debug_assert_eq!(out.len(), o * c * 9);
    let n_tiles = hw.div_ceil(TILE_K);
    let partials: Vec<Vec<T>> = (0..n_tiles)
        .into_par_iter()
        .map(|ti| {
            let p0 = ti * TILE_K;
            let p1 = hw.min(p0 + TILE_K);
            let pt = p1 - p0;
            let mut cols = vec![T::zero(); c * 9 * pt];
            im2col_tile(x, c, h, w, p0, p1, &mut cols);
            let mut part = vec![T::zero(); o * c * 9];
            unsafe {
                T::gemm(
                    o,
                    pt,
                    c * 9,
                    T::one(),
                    g.as_ptr().add(p0),
                    hw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    pt as isize,
                    T::zero(),
                    part.as_mut_ptr(),
                    (c * 9) as isize,
                    1,
                );
            }
            part
        })
        .collect();
    for part in partials {
        for (a, b) in out.iter_mut().zip(&part) {
            *a += *b;
        }
    }
}

/// Four-accumulator dot product with a fixed summation order.
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len();
    let n4 = n / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut i = 0;
    while i < n4 {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = s0 + s1 + s2 + s3;
    for j in n4..n {
        s += a[j] * b[j];
    }
    s
}

/// out[m] += w[m,n] * x[n].
pub fn matvec_acc<T: Scalar>(w: &[T], m: usize, n: usize, x: &[T], out: &mut [T]) {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(out.len(), m);
    out.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(ci, rows)| {
        let r0 = ci * ROW_CHUNK;
        for (r, acc) in rows.iter_mut().enumerate() {
            *acc += dot4(&w[(r0 + r) * n..(r0 + r + 1) * n], x);
        }
    });
}

/// out[n] += w[m,n]^T * a[m].
pub fn matvec_t_acc<T: Scalar>(w: &[T], m: usize, n: usize, a: &[T], out: &mut [T]) {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(a.len(), m);
    debug_assert_eq!(out.len(), n);
    out.par_chunks_mut(COL_CHUNK).enumerate().for_each(|(ci, cols)| {
        let j0 = ci * COL_CHUNK;
        for (i, &ai) in a.iter().enumerate() {
            let row = &w[i * n + j0..i * n + j0 + cols.len()];
            for (cv, &wv) in cols.iter_mut().zip(row) {
                *cv += ai * wv;
            }
        }
    });
}

/// out[m,n] += a[m] * b[n]^T.
pub fn outer_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let n = b.len();
    debug_assert_eq!(out.len(), a.len() * n);
    out.par_chunks_mut(ROW_CHUNK * n).enumerate().for_each(|(ci, rows)| {
        let r0 = ci * ROW_CHUNK;
        for (r, row) in rows.chunks_mut(n).enumerate() {
            let av = a[r0 + r];
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += av * bv;
            }
        }
    });
}

/// 2x2 stride-2 max pooling. Returns (flat argmax indices into x, pooled
/// values); ties go to the first cell in row-major window order.
pub fn maxpool2_argmax<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<usize>, Vec<T>) {
    debug_assert!(h % 2 == 0 && w % 2 == 0, "pool needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = vec![0usize; c * ho * wo];
    let mut val = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let base = ch * h * w + 2 * i * w + 2 * j;
                let mut bi = base;
                let mut bv = x[base];
                for (di, dj) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let p = base + di * w + dj;
                    if x[p] > bv {
                        bv = x[p];
                        bi = p;
                    }
                }
                let q = ch * ho * wo + i * wo + j;
                idx[q] = bi;
                val[q] = bv;
            }
        }
    }
    (idx, val)
}

/// Copies x[c,h,w] into the top-left corner of a zeroed [c,h2,w2] buffer.
pub fn pad_hw<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, h2: usize, w2: usize) -> Vec<T> {
    debug_assert!(h2 >= h && w2 >= w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for i in 0..h {
            let src = ch * h * w + i * w;
            let dst = ch * h2 * w2 + i * w2;
            out[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
    out
}

/// Extracts the top-left [c,h,w] corner of x[c,h2,w2].
pub fn crop_hw<T: Scalar>(x: &[T], c: usize, h2: usize, w2: usize, h: usize, w: usize) -> Vec<T> {
    debug_assert!(h2 >= h && w2 >= w);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..h {
            let src = ch * h2 * w2 + i * w2;
            let dst = ch * h * w + i * w;
            out[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
    out
}

/// out (same layout as the pad result) gains g placed at the top-left.
pub fn pad_hw_acc<T: Scalar>(g: &[T], c: usize, h: usize, w: usize, h2: usize, w2: usize, out: &mut [T]) {
    for ch in 0..c {
        for i in 0..h {
            let src = ch * h * w + i * w;
            let dst = ch * h2 * w2 + i * w2;
            for t in 0..w {
                out[dst + t] += g[src + t];
            }
        }
    }
}

/// out (shape of the cropped source) gains the top-left corner of g.
pub fn crop_hw_acc<T: Scalar>(g: &[T], c: usize, h2: usize, w2: usize, h: usize, w: usize, out: &mut [T]) {
    for ch in 0..c {
        for i in 0..h {
            let src = ch * h2 * w2 + i * w2;
            let dst = ch * h * w + i * w;
            for t in 0..w {
                out[dst + t] += g[src + t];
            }
        }
    }
}
