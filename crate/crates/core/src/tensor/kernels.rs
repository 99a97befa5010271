//! Raw slice kernels shared by the autodiff ops and the frozen encoders.

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_tn_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` where `g` is `m×n` and `b` is `k×n`.
pub fn matmul_nt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            *o = *o + dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Inner product with eight interleaved partial sums, so the loop
/// vectorises. The summation order is fixed, hence deterministic.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Unfold an `h×w×c` image into `(h·w) × (k·k·c)` patches with zero padding
/// `(k-1)/2`. Column order matches a `k×k×c×cout` weight laid out row-major.
pub fn im2col<T: Real>(x: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let cols = k * k * c;
    let mut out = vec![T::zero(); h * w * cols];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * cols;
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = xx as isize + dx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = base + (dy * k + dx) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub fn col2im_acc<T: Real>(cols: &[T], out: &mut [T], h: usize, w: usize, c: usize, k: usize) {
    let pad = (k / 2) as isize;
    let ncols = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * ncols;
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = xx as isize + dx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = base + (dy * k + dx) * c;
                    for ch in 0..c {
                        out[dst + ch] = out[dst + ch] + cols[src + ch];
                    }
                }
            }
        }
    }
}

/// Split a flat index space into `(outer, axis_len, inner)` around `axis`.
pub fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Max-stabilised softmax along `axis`.
pub fn softmax_axis<T: Real>(x: &[T], dims: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(dims, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut denom = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                denom = denom + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / denom;
            }
        }
    }
    out
}

/// Vector-Jacobian product of softmax along `axis`, given its output `y`.
pub fn softmax_vjp<T: Real>(y: &[T], g: &[T], dims: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(dims, axis);
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot = dot + y[idx(j)] * g[idx(j)];
            }
            for j in 0..len {
                out[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
    out
}

/// Bilinear resize of a `c × h × w` stack (half-pixel centres, edge clamped).
pub fn bilinear_resize<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let coord = |d: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, sy, h);
        for xx in 0..ow {
            let (x0, x1, fx) = coord(xx, sx, w);
            let w00 = T::from_f64_lossy((1.0 - fy) * (1.0 - fx));
            let w01 = T::from_f64_lossy((1.0 - fy) * fx);
            let w10 = T::from_f64_lossy(fy * (1.0 - fx));
            let w11 = T::from_f64_lossy(fy * fx);
            for ch in 0..c {
                let p = |yy: usize, xq: usize| x[(ch * h + yy) * w + xq];
                out[(ch * oh + y) * ow + xx] =
                    w00 * p(y0, x0) + w01 * p(y0, x1) + w10 * p(y1, x0) + w11 * p(y1, x1);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_1x1_is_identity() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(im2col(&x, 2, 2, 3, 1), x);
    }

    #[test]
    fn bilinear_halving_averages_blocks() {
        let x: Vec<f64> = vec![1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12., 13., 14., 15., 16.];
        let y = bilinear_resize(&x, 1, 4, 4, 2, 2);
        assert_eq!(y, vec![3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x: Vec<f64> = (0..20).map(|v| v as f64 * 0.5).collect();
        assert_eq!(bilinear_resize(&x, 1, 4, 5, 4, 5), x);
    }
}
