//! Differentiable tensor ops with hand-written CPU kernels.
//!
//! Candle's generic convolution path is tuned for wide channel counts; the
//! desk-scale codec runs many narrow convolutions over long sequences, where
//! direct loops are several times faster. These ops plug into candle's
//! autograd through `CustomOp1`/`CustomOp2`.

use super::kernels::{self, ConvGeom, Real};
use candle_core::{
    bail, backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, DType, Layout, Result, Shape, Tensor,
    WithDType,
};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use crate::spectral::{hann_window, reflect_index};

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("custom op input must be contiguous"),
    }
}

fn host_vec<T: WithDType>(t: &Tensor) -> Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// 1-D convolution, input `(batch, c_in, len)`, kernel `(c_out, c_in, k)`.
#[derive(Debug, Clone, Copy)]
struct Conv1dOp {
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv1dOp {
    fn geom(&self, x: &[usize], w: &[usize]) -> Result<ConvGeom> {
        let (&[batch, c_in, l_in], &[c_out, wc_in, k]) = (x, w) else {
            bail!("conv1d expects rank-3 input and kernel, got {x:?} and {w:?}")
        };
        if c_in != wc_in {
            bail!("conv1d channel mismatch: input has {c_in}, kernel expects {wc_in}");
        }
        let Some(l_out) = ConvGeom::conv_out_len(l_in, k, self.stride, self.padding, self.dilation) else {
            bail!("conv1d input of length {l_in} is shorter than the kernel span")
        };
        Ok(ConvGeom { batch, c_in, l_in, c_out, k, l_out, stride: self.stride, padding: self.padding, dilation: self.dilation })
    }

    fn backward<T: Real + WithDType>(&self, x: &Tensor, w: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.geom(x.dims(), w.dims())?;
        let (xv, wv, gv) = (host_vec::<T>(x)?, host_vec::<T>(w)?, host_vec::<T>(gy)?);
        let gx = kernels::conv_backward_input(&g, &gv, &wv);
        let gw = kernels::conv_backward_weight(&g, &gv, &xv);
        Ok((Tensor::from_vec(gx, x.dims(), x.device())?, Tensor::from_vec(gw, w.dims(), w.device())?))
    }
}

impl CustomOp2 for Conv1dOp {
    fn name(&self) -> &'static str {
        "semdac-conv1d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.geom(l1.dims(), l2.dims())?;
        let out = match s1.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(kernels::conv_forward(&g, contiguous(s1, l1)?, contiguous(s2, l2)?)),
            DType::F64 => f64::to_cpu_storage_owned(kernels::conv_forward(&g, contiguous(s1, l1)?, contiguous(s2, l2)?)),
            dt => bail!("conv1d: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((g.batch, g.c_out, g.l_out))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (gx, gw) = match x.dtype() {
            DType::F32 => self.backward::<f32>(x, w, gy)?,
            DType::F64 => self.backward::<f64>(x, w, gy)?,
            dt => bail!("conv1d: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Transposed 1-D convolution, input `(batch, c_in, len)`, kernel `(c_in, c_out, k)`.
///
/// Implemented as the adjoint of [`Conv1dOp`], so it shares the same kernels.
#[derive(Debug, Clone, Copy)]
struct ConvTranspose1dOp {
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose1dOp {
    /// Geometry of the forward convolution whose adjoint this op computes.
    fn adjoint_geom(&self, x: &[usize], w: &[usize]) -> Result<ConvGeom> {
        let (&[batch, c_in, l_in], &[wc_in, c_out, k]) = (x, w) else {
            bail!("conv_transpose1d expects rank-3 input and kernel, got {x:?} and {w:?}")
        };
        if c_in != wc_in {
            bail!("conv_transpose1d channel mismatch: input has {c_in}, kernel expects {wc_in}");
        }
        let full = (l_in - 1) * self.stride + k + self.output_padding;
        if l_in == 0 || full < 2 * self.padding + 1 {
            bail!("conv_transpose1d output would be empty");
        }
        let l_out = full - 2 * self.padding;
        Ok(ConvGeom {
            batch,
            c_in: c_out,
            l_in: l_out,
            c_out: c_in,
            k,
            l_out: l_in,
            stride: self.stride,
            padding: self.padding,
            dilation: 1,
        })
    }

    fn backward<T: Real + WithDType>(&self, x: &Tensor, w: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.adjoint_geom(x.dims(), w.dims())?;
        let (xv, wv, gv) = (host_vec::<T>(x)?, host_vec::<T>(w)?, host_vec::<T>(gy)?);
        let gx = kernels::conv_forward(&g, &gv, &wv);
        let gw = kernels::conv_backward_weight(&g, &xv, &gv);
        Ok((Tensor::from_vec(gx, x.dims(), x.device())?, Tensor::from_vec(gw, w.dims(), w.device())?))
    }
}

impl CustomOp2 for ConvTranspose1dOp {
    fn name(&self) -> &'static str {
        "semdac-conv-transpose1d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.adjoint_geom(l1.dims(), l2.dims())?;
        let out = match s1.dtype() {
            DType::F32 => {
                f32::to_cpu_storage_owned(kernels::conv_backward_input(&g, contiguous(s1, l1)?, contiguous(s2, l2)?))
            }
            DType::F64 => {
                f64::to_cpu_storage_owned(kernels::conv_backward_input(&g, contiguous(s1, l1)?, contiguous(s2, l2)?))
            }
            dt => bail!("conv_transpose1d: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((g.batch, g.c_in, g.l_in))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (gx, gw) = match x.dtype() {
            DType::F32 => self.backward::<f32>(x, w, gy)?,
            DType::F64 => self.backward::<f64>(x, w, gy)?,
            dt => bail!("conv_transpose1d: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Snake activation with a learnable per-channel frequency.
struct SnakeOp;

impl SnakeOp {
    fn dims(x: &[usize], a: &[usize]) -> Result<(usize, usize)> {
        let &[_, c, t] = x else { bail!("snake expects (batch, channels, time), got {x:?}") };
        if a != [c] {
            bail!("snake alpha shape {a:?} does not match {c} channels");
        }
        Ok((c, t))
    }

    fn backward<T: Real + WithDType>(x: &Tensor, a: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c, t) = Self::dims(x.dims(), a.dims())?;
        let (gx, ga) = kernels::snake_backward(&host_vec::<T>(x)?, &host_vec::<T>(a)?, &host_vec::<T>(gy)?, c, t);
        Ok((Tensor::from_vec(gx, x.dims(), x.device())?, Tensor::from_vec(ga, a.dims(), a.device())?))
    }
}

impl CustomOp2 for SnakeOp {
    fn name(&self) -> &'static str {
        "semdac-snake"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (c, t) = Self::dims(l1.dims(), l2.dims())?;
        let out = match s1.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(kernels::snake_forward(contiguous(s1, l1)?, contiguous(s2, l2)?, c, t)),
            DType::F64 => f64::to_cpu_storage_owned(kernels::snake_forward(contiguous(s1, l1)?, contiguous(s2, l2)?, c, t)),
            dt => bail!("snake: unsupported dtype {dt:?}"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, a: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (gx, ga) = match x.dtype() {
            DType::F32 => Self::backward::<f32>(x, a, gy)?,
            DType::F64 => Self::backward::<f64>(x, a, gy)?,
            dt => bail!("snake: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(ga)))
    }
}

struct LeakyReluOp {
    slope: f64,
}

impl LeakyReluOp {
    fn apply<T: Real>(&self, x: &[T]) -> Vec<T> {
        let s = T::from(self.slope).unwrap();
        x.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect()
    }

    fn backward<T: Real + WithDType>(&self, x: &Tensor, gy: &Tensor) -> Result<Tensor> {
        let s = T::from(self.slope).unwrap();
        let g: Vec<T> = host_vec::<T>(x)?
            .into_iter()
            .zip(host_vec::<T>(gy)?)
            .map(|(v, g)| if v > T::zero() { g } else { g * s })
            .collect();
        Tensor::from_vec(g, x.dims(), x.device())
    }
}

impl CustomOp1 for LeakyReluOp {
    fn name(&self) -> &'static str {
        "semdac-leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match s.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(self.apply(contiguous::<f32>(s, l)?)),
            DType::F64 => f64::to_cpu_storage_owned(self.apply(contiguous::<f64>(s, l)?)),
            dt => bail!("leaky_relu: unsupported dtype {dt:?}"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(match x.dtype() {
            DType::F32 => self.backward::<f32>(x, gy)?,
            DType::F64 => self.backward::<f64>(x, gy)?,
            dt => bail!("leaky_relu: unsupported dtype {dt:?}"),
        }))
    }
}

/// Forward value of the second argument, gradient routed unchanged to the first.
struct StraightThroughOp;

impl CustomOp2 for StraightThroughOp {
    fn name(&self) -> &'static str {
        "semdac-straight-through"
    }

    fn cpu_fwd(&self, _s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        if l1.dims() != l2.dims() {
            bail!("straight-through shape mismatch {:?} vs {:?}", l1.dims(), l2.dims());
        }
        let out = match s2.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(contiguous::<f32>(s2, l2)?.to_vec()),
            DType::F64 => f64::to_cpu_storage_owned(contiguous::<f64>(s2, l2)?.to_vec()),
            dt => bail!("straight-through: unsupported dtype {dt:?}"),
        };
        Ok((out, l2.shape().clone()))
    }

    fn bwd(&self, _z: &Tensor, _q: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(gy.clone()), None))
    }
}

/// Magnitude STFT of a batch of signals `(batch, len)` with a periodic Hann
/// window and reflect padding of `window_len / 2` on both sides.
#[derive(Debug, Clone, Copy)]
struct StftMagnitudeOp {
    window_len: usize,
    hop: usize,
}

impl StftMagnitudeOp {
    fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    fn forward<T: Real>(&self, x: &[T], batch: usize, len: usize) -> Vec<T> {
        let n = self.window_len;
        let pad = (n / 2) as isize;
        let (frames, bins) = (self.frames(len), self.bins());
        let window: Vec<T> = hann_window(n).into_iter().map(|w| T::from(w).unwrap()).collect();
        let fft = FftPlanner::<T>::new().plan_fft_forward(n);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut out = vec![T::zero(); batch * bins * frames];
        for b in 0..batch {
            let xr = &x[b * len..][..len];
            for f in 0..frames {
                let start = (f * self.hop) as isize - pad;
                for (j, c) in buf.iter_mut().enumerate() {
                    *c = Complex::new(window[j] * xr[reflect_index(start + j as isize, len)], T::zero());
                }
                fft.process(&mut buf);
                for (k, c) in buf.iter().take(bins).enumerate() {
                    out[(b * bins + k) * frames + f] = c.norm();
                }
            }
        }
        out
    }

    fn backward<T: Real + WithDType>(&self, x: &Tensor, gy: &Tensor) -> Result<Tensor> {
        let (batch, len) = x.dims2()?;
        let xv = host_vec::<T>(x)?;
        let gv = host_vec::<T>(gy)?;
        let n = self.window_len;
        let pad = (n / 2) as isize;
        let (frames, bins) = (self.frames(len), self.bins());
        let window: Vec<T> = hann_window(n).into_iter().map(|w| T::from(w).unwrap()).collect();
        let mut planner = FftPlanner::<T>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let zero = Complex::new(T::zero(), T::zero());
        let mut buf = vec![zero; n];
        let mut gx = vec![T::zero(); batch * len];
        for b in 0..batch {
            let xr = &xv[b * len..][..len];
            let gxr = &mut gx[b * len..][..len];
            for f in 0..frames {
                let start = (f * self.hop) as isize - pad;
                for (j, c) in buf.iter_mut().enumerate() {
                    *c = Complex::new(window[j] * xr[reflect_index(start + j as isize, len)], T::zero());
                }
                fwd.process(&mut buf);
                for (k, c) in buf.iter_mut().enumerate() {
                    if k < bins {
                        let mag = c.norm();
                        let g = gv[(b * bins + k) * frames + f];
                        *c = if mag > T::zero() { *c * (g / mag) } else { zero };
                    } else {
                        *c = zero;
                    }
                }
                inv.process(&mut buf);
                for (j, c) in buf.iter().enumerate() {
                    gxr[reflect_index(start + j as isize, len)] += window[j] * c.re;
                }
            }
        }
        Tensor::from_vec(gx, (batch, len), x.device())
    }
}

impl CustomOp1 for StftMagnitudeOp {
    fn name(&self) -> &'static str {
        "semdac-stft-magnitude"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let &[batch, len] = l.dims() else { bail!("stft expects (batch, len), got {:?}", l.dims()) };
        if len == 0 {
            bail!("stft of an empty signal");
        }
        let out = match s.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(self.forward(contiguous::<f32>(s, l)?, batch, len)),
            DType::F64 => f64::to_cpu_storage_owned(self.forward(contiguous::<f64>(s, l)?, batch, len)),
            dt => bail!("stft: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((batch, self.bins(), self.frames(len)))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, gy: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(match x.dtype() {
            DType::F32 => self.backward::<f32>(x, gy)?,
            DType::F64 => self.backward::<f64>(x, gy)?,
            dt => bail!("stft: unsupported dtype {dt:?}"),
        }))
    }
}

/// Batched 1-D convolution without bias.
pub fn conv1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize, dilation: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv1dOp { stride, padding, dilation })
}

/// Batched transposed 1-D convolution without bias; kernel is `(c_in, c_out, k)`.
pub fn conv_transpose1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize, output_padding: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, ConvTranspose1dOp { stride, padding, output_padding })
}

/// `x + sin^2(alpha x) / alpha` with per-channel `alpha` of shape `(channels,)`.
pub fn snake(x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&alpha.contiguous()?, SnakeOp)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyReluOp { slope })
}

/// Returns `quantized` in the forward pass and passes the incoming gradient
/// unchanged to `input` (straight-through estimator).
pub fn straight_through(input: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    input.contiguous()?.apply_op2(&quantized.detach().contiguous()?, StraightThroughOp)
}

/// Magnitude spectrogram `(batch, window_len / 2 + 1, len / hop + 1)`.
pub fn stft_magnitude(x: &Tensor, window_len: usize, hop: usize) -> Result<Tensor> {
    if window_len < 2 || hop == 0 {
        bail!("invalid stft geometry: window {window_len}, hop {hop}");
    }
    x.contiguous()?.apply_op1(StftMagnitudeOp { window_len, hop })
}
