//! Slice-level kernels behind the custom tensor ops.
//!
//! Every kernel walks its loops in a fixed order, so results are bitwise
//! reproducible from run to run on the same machine.

use num_traits::Float;
use std::ops::AddAssign;

/// Element types the kernels are instantiated for (`f32` for training,
/// `f64` for finite-difference checks).
pub trait Real: Float + AddAssign + Default + rustfft::FftNum + Send + Sync + 'static {
    /// `sin` for activation kernels; may trade the last bits of accuracy for speed.
    fn act_sin(self) -> Self {
        self.sin()
    }

    fn act_sin_cos(self) -> (Self, Self) {
        self.sin_cos()
    }
}

impl Real for f32 {
    #[inline(always)]
    fn act_sin(self) -> Self {
        fast_sin_cos(self).0
    }

    #[inline(always)]
    fn act_sin_cos(self) -> (Self, Self) {
        fast_sin_cos(self)
    }
}

impl Real for f64 {}

/// Branch-free single-precision `(sin x, cos x)`: reduce by multiples of
/// pi, then odd/even minimax polynomials on `[-pi/2, pi/2]`. Absolute error
/// stays below 1e-6 for `|x| < 1e3`.
#[inline(always)]
pub fn fast_sin_cos(x: f32) -> (f32, f32) {
    const INV_PI: f32 = std::f32::consts::FRAC_1_PI;
    const PI_A: f32 = 3.140_625;
    const PI_B: f32 = 9.676_536e-4;
    const PI_C: f32 = 5.126_566e-12;
    let j = (x * INV_PI).round_ties_even();
    let r = ((x - j * PI_A) - j * PI_B) - j * PI_C;
    let r2 = r * r;
    let s = r + r * r2 * (-1.666_666_7e-1 + r2 * (8.333_330_4e-3 + r2 * (-1.984_079_6e-4 + r2 * (2.752_230_1e-6 - r2 * 2.384_194_1e-8))));
    let c = 1.0 + r2 * (-0.5 + r2 * (4.166_664e-2 + r2 * (-1.388_839_8e-3 + r2 * (2.476_165_2e-5 - r2 * 2.607_342e-7))));
    let flip = ((j as i32) as u32) << 31;
    (f32::from_bits(s.to_bits() ^ flip), f32::from_bits(c.to_bits() ^ flip))
}

/// Geometry of a batched 1-D convolution with a `(c_out, c_in, k)` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub l_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub l_out: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Output length of an ordinary convolution, `None` when the padded input
    /// is shorter than the dilated kernel.
    pub fn conv_out_len(l_in: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
        let span = dilation * (k - 1) + 1;
        let padded = l_in + 2 * padding;
        (padded >= span).then(|| (padded - span) / stride + 1)
    }

    /// Output rows `t` whose tap `t * stride + off` lands inside the input.
    #[inline]
    fn valid_rows(&self, off: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
        let last = self.l_in as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(self.l_out as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    #[inline]
    fn tap_offset(&self, kk: usize) -> isize {
        (kk * self.dilation) as isize - self.padding as isize
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize the reduction while keeping a fixed summation order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    s0 + s1 + tail
}

/// Row-major matrix view: `ptr[r * rs + c * cs]`.
#[derive(Clone, Copy)]
struct View<T> {
    ptr: *const T,
    rs: isize,
    cs: isize,
}

impl<T> View<T> {
    fn rows(s: &[T], cols: usize) -> Self {
        Self { ptr: s.as_ptr(), rs: cols as isize, cs: 1 }
    }

    fn transposed(s: &[T], cols: usize) -> Self {
        Self { ptr: s.as_ptr(), rs: 1, cs: cols as isize }
    }
}

/// `dst (m × n, row-major) = [dst +] lhs (m × k) · rhs (k × n)`, single-threaded.
fn matmul<T: Real>(dst: &mut [T], accumulate: bool, m: usize, n: usize, k: usize, lhs: View<T>, rhs: View<T>) {
    assert!(dst.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            dst[..m * n].fill(T::zero());
        }
        return;
    }
    // SAFETY: `dst` holds m × n elements; the views are built from slices whose
    // extents cover every index reached with the given strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.ptr,
            lhs.cs,
            lhs.rs,
            rhs.ptr,
            rhs.cs,
            rhs.rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

impl ConvGeom {
    fn patch_rows(&self) -> usize {
        self.c_in * self.k
    }

    /// Whether the column matrix of a batch item is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Fills `col` (`c_in·k × l_out`) with the taps of batch item `xb`.
    fn im2col<T: Real>(&self, xb: &[T], col: &mut [T]) {
        for ci in 0..self.c_in {
            let xr = &xb[ci * self.l_in..][..self.l_in];
            for kk in 0..self.k {
                let row = &mut col[(ci * self.k + kk) * self.l_out..][..self.l_out];
                let off = self.tap_offset(kk);
                let (lo, hi) = self.valid_rows(off);
                row[..lo].fill(T::zero());
                row[hi.max(lo)..].fill(T::zero());
                if lo == hi {
                    continue;
                }
                if self.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    row[lo..hi].copy_from_slice(&xr[start..start + (hi - lo)]);
                } else {
                    let s = self.stride;
                    let start = (lo as isize * s as isize + off) as usize;
                    for (dst, src) in row[lo..hi].iter_mut().zip(xr[start..].iter().step_by(s)) {
                        *dst = *src;
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto the input positions it was read from.
    fn col2im<T: Real>(&self, col: &[T], gxb: &mut [T]) {
        for ci in 0..self.c_in {
            let gxr = &mut gxb[ci * self.l_in..][..self.l_in];
            for kk in 0..self.k {
                let row = &col[(ci * self.k + kk) * self.l_out..][..self.l_out];
                let off = self.tap_offset(kk);
                let (lo, hi) = self.valid_rows(off);
                if lo == hi {
                    continue;
                }
                if self.stride == 1 {
                    let start = (lo as isize + off) as usize;
                    for (dst, src) in gxr[start..start + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                        *dst += *src;
                    }
                } else {
                    let s = self.stride;
                    let start = (lo as isize * s as isize + off) as usize;
                    for (dst, src) in gxr[start..].iter_mut().step_by(s).zip(&row[lo..hi]) {
                        *dst += *src;
                    }
                }
            }
        }
    }
}

/// `y[b, co, t] = sum_{ci, k} w[co, ci, k] * x[b, ci, t * stride + k * dilation - padding]`.
pub fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let kdim = g.patch_rows();
    let mut y = vec![T::zero(); g.batch * g.c_out * g.l_out];
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * g.l_out }];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.l_in..][..g.c_in * g.l_in];
        let rhs = if g.is_pointwise() {
            View::rows(xb, g.l_out)
        } else {
            g.im2col(xb, &mut col);
            View::rows(&col, g.l_out)
        };
        let yb = &mut y[b * g.c_out * g.l_out..][..g.c_out * g.l_out];
        matmul(yb, false, g.c_out, g.l_out, kdim, View::rows(w, kdim), rhs);
    }
    y
}

/// Adjoint of [`conv_forward`] with respect to its input.
pub fn conv_backward_input<T: Real>(g: &ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    let kdim = g.patch_rows();
    let mut gx = vec![T::zero(); g.batch * g.c_in * g.l_in];
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * g.l_out }];
    for b in 0..g.batch {
        let gyb = View::rows(&gy[b * g.c_out * g.l_out..][..g.c_out * g.l_out], g.l_out);
        let gxb = &mut gx[b * g.c_in * g.l_in..][..g.c_in * g.l_in];
        if g.is_pointwise() {
            matmul(gxb, false, kdim, g.l_out, g.c_out, View::transposed(w, kdim), gyb);
        } else {
            matmul(&mut col, false, kdim, g.l_out, g.c_out, View::transposed(w, kdim), gyb);
            g.col2im(&col, gxb);
        }
    }
    gx
}

/// Gradient of [`conv_forward`] with respect to the kernel.
pub fn conv_backward_weight<T: Real>(g: &ConvGeom, gy: &[T], x: &[T]) -> Vec<T> {
    let kdim = g.patch_rows();
    let mut gw = vec![T::zero(); g.c_out * kdim];
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * g.l_out }];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.l_in..][..g.c_in * g.l_in];
        let colv = if g.is_pointwise() {
            View::transposed(xb, g.l_out)
        } else {
            g.im2col(xb, &mut col);
            View::transposed(&col, g.l_out)
        };
        let gyb = View::rows(&gy[b * g.c_out * g.l_out..][..g.c_out * g.l_out], g.l_out);
        matmul(&mut gw, b > 0, g.c_out, kdim, g.l_out, gyb, colv);
    }
    gw
}

const SNAKE_EPS: f64 = 1e-9;

/// Periodic "snake" activation `x + sin^2(alpha x) / alpha`, one alpha per channel.
pub fn snake_forward<T: Real>(x: &[T], alpha: &[T], channels: usize, len: usize) -> Vec<T> {
    let eps = T::from(SNAKE_EPS).unwrap();
    let mut y = Vec::with_capacity(x.len());
    for (row, xr) in x.chunks_exact(len).enumerate() {
        let a = alpha[row % channels];
        let inv = T::one() / (a + eps);
        y.extend(xr.iter().map(|&v| {
            let s = (a * v).act_sin();
            v + inv * s * s
        }));
    }
    y
}

/// Returns `(grad_x, grad_alpha)` for [`snake_forward`].
pub fn snake_backward<T: Real>(x: &[T], alpha: &[T], gy: &[T], channels: usize, len: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::from(SNAKE_EPS).unwrap();
    let mut gx = vec![T::zero(); x.len()];
    let mut ga = vec![T::zero(); channels];
    if len == 0 {
        return (gx, ga);
    }
    for (row, ((xr, gr), gxr)) in x.chunks_exact(len).zip(gy.chunks_exact(len)).zip(gx.chunks_exact_mut(len)).enumerate() {
        let c = row % channels;
        let a = alpha[c];
        let inv = T::one() / (a + eps);
        let a_inv = a * inv;
        let inv2 = inv * inv;
        let point = |v: T, g: T| {
            let (s, co) = (a * v).act_sin_cos();
            let s2 = (s + s) * co;
            (g * (T::one() + a_inv * s2), g * (v * inv * s2 - inv2 * s * s))
        };
        let mut acc = [T::zero(); 8];
        let (xc, gc, oc) = (xr.chunks_exact(8), gr.chunks_exact(8), gxr.chunks_exact_mut(8));
        let tail = xc.remainder().len();
        for ((xv, gv), ov) in xc.zip(gc).zip(oc) {
            for j in 0..8 {
                let (d, da) = point(xv[j], gv[j]);
                ov[j] = d;
                acc[j] += da;
            }
        }
        let mut rest = T::zero();
        for j in len - tail..len {
            let (d, da) = point(xr[j], gr[j]);
            gxr[j] = d;
            rest += da;
        }
        let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
        let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
        ga[c] += s0 + s1 + rest;
    }
    (gx, ga)
}
