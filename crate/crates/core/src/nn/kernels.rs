//! Loop kernels behind the differentiable ops: im2col convolution, its
//! adjoint, the normalizations, and the depthwise reflect-padded blur.
//!
//! All functions work on one contiguous `N × C × H × W` buffer and are
//! single threaded, so results are bitwise reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Real;

/// Geometry of a 2-D cross-correlation with square kernel and symmetric
/// zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// `H' = floor((H + 2·pad − k)/stride) + 1`; `None` when the output would
    /// be empty.
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { c_in, h, w, k, stride, pad, h_out, w_out })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output side length of a transposed convolution.
pub fn deconv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((len - 1) * stride + k).checked_sub(2 * pad).filter(|&n| n > 0)
}

pub fn im2col<T: Real>(src: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_out = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `dst`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dst: &mut [T]) {
    let n_out = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[n] = W · im2col(x[n]) (+ bias)` with `W: c_out × (c_in·k·k)`.
pub fn conv_forward<T: Real>(x: &[T], n: usize, g: &ConvGeom, w: &[T], c_out: usize, bias: Option<&[T]>) -> Vec<T> {
    let (kr, kc) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); kr * kc];
    let mut out = vec![T::zero(); n * c_out * kc];
    let in_len = g.c_in * g.h * g.w;
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        let o = &mut out[s * c_out * kc..(s + 1) * c_out * kc];
        T::gemm(c_out, kr, kc, T::one(), w, (kr as isize, 1), &cols, (kc as isize, 1), T::zero(), o, (kc as isize, 1));
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                o[co * kc..(co + 1) * kc].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]. Either output may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    c_out: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (kr, kc) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); kr * kc];
    let in_len = g.c_in * g.h * g.w;
    for s in 0..n {
        let dys = &dy[s * c_out * kc..(s + 1) * c_out * kc];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
            // dW += dY · colsᵀ
            T::gemm(c_out, kc, kr, T::one(), dys, (kc as isize, 1), &cols, (1, kc as isize), T::one(), dw, (kr as isize, 1));
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, b) in db.iter_mut().enumerate() {
                *b += dys[co * kc..(co + 1) * kc].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = Wᵀ · dY
            T::gemm(kr, c_out, kc, T::one(), w, (1, kr as isize), dys, (kc as isize, 1), T::zero(), &mut cols, (kc as isize, 1));
            col2im(&cols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
}

/// Per-channel statistics saved by the normalization forward passes.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    /// `1/sqrt(var + eps)` per normalization group.
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch normalization over `(N, H, W)` per channel, with biased variance.
pub fn batch_norm_forward<T: Real>(x: &[T], (n, c, h, w): (usize, usize, usize, usize), gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, NormCache<T>) {
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut means = vec![T::zero(); c];
    let mut vars = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |s: usize| s * c * hw + ch * hw;
        let mut sum = T::zero();
        for s in 0..n {
            sum += x[plane(s)..plane(s) + hw].iter().copied().sum::<T>();
        }
        let mean = sum / m;
        let mut var = T::zero();
        for s in 0..n {
            var += x[plane(s)..plane(s) + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        var /= m;
        let is = T::one() / (var + eps).sqrt();
        for s in 0..n {
            for i in plane(s)..plane(s) + hw {
                let xh = (x[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
        inv_std[ch] = is;
        means[ch] = mean;
        vars[ch] = var;
    }
    (out, NormCache { xhat, inv_std, mean: means, var: vars })
}

pub fn batch_norm_backward<T: Real>(
    dy: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[T],
    cache: &NormCache<T>,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = s * c * hw + ch * hw;
            for i in base..base + hw {
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * cache.xhat[i];
            }
        }
    }
    if let Some(dg) = dgamma {
        dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &b)| *a += b);
    }
    if let Some(db) = dbeta {
        db.iter_mut().zip(&sum_dy).for_each(|(a, &b)| *a += b);
    }
    if let Some(dx) = dx {
        for s in 0..n {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / m;
                let base = s * c * hw + ch * hw;
                for i in base..base + hw {
                    dx[i] += k * (m * dy[i] - sum_dy[ch] - cache.xhat[i] * sum_dy_xhat[ch]);
                }
            }
        }
    }
}

/// Instance normalization: statistics per `(sample, channel)` over `H × W`,
/// affine `γ, β` per channel.
pub fn instance_norm_forward<T: Real>(x: &[T], (n, c, h, w): (usize, usize, usize, usize), gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, NormCache<T>) {
    let hw = h * w;
    let m = T::of(hw as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * c];
    let mut means = vec![T::zero(); n * c];
    let mut vars = vec![T::zero(); n * c];
    for g in 0..n * c {
        let ch = g % c;
        let xs = &x[g * hw..(g + 1) * hw];
        let mean = xs.iter().copied().sum::<T>() / m;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        for i in 0..hw {
            let xh = (xs[i] - mean) * is;
            xhat[g * hw + i] = xh;
            out[g * hw + i] = gamma[ch] * xh + beta[ch];
        }
        inv_std[g] = is;
        means[g] = mean;
        vars[g] = var;
    }
    (out, NormCache { xhat, inv_std, mean: means, var: vars })
}

pub fn instance_norm_backward<T: Real>(
    dy: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    gamma: &[T],
    cache: &NormCache<T>,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let hw = h * w;
    let m = T::of(hw as f64);
    for g in 0..n * c {
        let ch = g % c;
        let dys = &dy[g * hw..(g + 1) * hw];
        let xh = &cache.xhat[g * hw..(g + 1) * hw];
        let sum_dy: T = dys.iter().copied().sum();
        let sum_dy_xhat: T = dys.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ch] += sum_dy_xhat;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[ch] += sum_dy;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let k = gamma[ch] * cache.inv_std[g] / m;
            for i in 0..hw {
                dx[g * hw + i] += k * (m * dys[i] - sum_dy - xh[i] * sum_dy_xhat);
            }
        }
    }
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`-1 → 1`, `n → n-2`), folding as often as needed.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Depthwise correlation with a `(2r+1)²` kernel and reflect padding;
/// output has the input's shape.
pub fn blur_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, kernel: &[T], r: usize) -> Vec<T> {
    let kw = 2 * r + 1;
    let mut out = vec![T::zero(); x.len()];
    let rows: Vec<Vec<usize>> = (0..h).map(|i| (0..kw).map(|u| reflect(i as isize + u as isize - r as isize, h)).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..w).map(|j| (0..kw).map(|v| reflect(j as isize + v as isize - r as isize, w)).collect()).collect();
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (u, &ri) in rows[i].iter().enumerate() {
                    let krow = &kernel[u * kw..(u + 1) * kw];
                    let srow = &src[ri * w..(ri + 1) * w];
                    for (&kv, &cj) in krow.iter().zip(&cols[j]) {
                        acc += kv * srow[cj];
                    }
                }
                dst[i * w + j] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`blur_forward`], accumulated into `dx`.
pub fn blur_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, kernel: &[T], r: usize, dx: &mut [T]) {
    let kw = 2 * r + 1;
    let rows: Vec<Vec<usize>> = (0..h).map(|i| (0..kw).map(|u| reflect(i as isize + u as isize - r as isize, h)).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..w).map(|j| (0..kw).map(|v| reflect(j as isize + v as isize - r as isize, w)).collect()).collect();
    for p in 0..planes {
        let g = &dy[p * h * w..(p + 1) * h * w];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let gv = g[i * w + j];
                for (u, &ri) in rows[i].iter().enumerate() {
                    let krow = &kernel[u * kw..(u + 1) * kw];
                    for (&kv, &cj) in krow.iter().zip(&cols[j]) {
                        d[ri * w + cj] += kv * gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-6, 5), 2);
        assert_eq!(reflect(12, 5), 4);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn conv_output_size() {
        let g = ConvGeom::new(1, 256, 256, 4, 2, 1).unwrap();
        assert_eq!(g.h_out, 128);
        let g = ConvGeom::new(1, 32, 32, 4, 1, 1).unwrap();
        assert_eq!(g.h_out, 31);
        assert!(ConvGeom::new(1, 2, 2, 5, 1, 1).is_none());
        assert_eq!(deconv_out(16, 4, 2, 1), Some(32));
    }
}
