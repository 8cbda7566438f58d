//! 2D convolution as im2col + GEMM with a hand-written backward pass.
//!
//! candle's built-in conv backward routes the kernel gradient through a
//! large-kernel direct convolution and always computes it, even for frozen
//! weights. This op only produces the gradients whose inputs are tracked.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};
use gemm::Parallelism;

use crate::error::{domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let [batch, c_in, h, w] = x else { candle_core::bail!("conv2d input must be rank 4, got {x:?}") };
        let [c_out, kc, kh, kw] = k else { candle_core::bail!("conv2d kernel must be rank 4, got {k:?}") };
        if kc != c_in {
            candle_core::bail!("conv2d channel mismatch: input {c_in}, kernel {kc}");
        }
        if h + 2 * pad < *kh || w + 2 * pad < *kw {
            candle_core::bail!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w}");
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { batch: *batch, c_in: *c_in, h: *h, w: *w, c_out: *c_out, kh: *kh, kw: *kw, stride, pad, ho, wo })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: WithDType>(g: &Geometry, x: &[T], col: &mut [T]) {
    let p = g.out_px();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy as usize >= g.h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix as usize >= g.w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: WithDType>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let p = g.out_px();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major GEMM: `dst (m x n) = [dst +] a (m x k) * b (k x n)`, with optional
/// transposed views of `a` or `b`.
#[allow(clippy::too_many_arguments)]
fn matmul<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
) {
    debug_assert_eq!(dst.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let (a_rs, a_cs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe views
    // fully inside each slice.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

fn forward<T: WithDType>(g: &Geometry, x: &[T], k: &[T]) -> Vec<T> {
    let (kk, p) = (g.patch(), g.out_px());
    let mut out = vec![T::zero(); g.batch * g.c_out * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for n in 0..g.batch {
        let xn = &x[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        let dst = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        matmul(g.c_out, p, kk, dst, false, k, false, cols, false);
    }
    out
}

fn grad_input<T: WithDType>(g: &Geometry, dy: &[T], k: &[T]) -> Vec<T> {
    let (kk, p) = (g.patch(), g.out_px());
    let in_sz = g.c_in * g.h * g.w;
    let mut dx = vec![T::zero(); g.batch * in_sz];
    let mut dcol = vec![T::zero(); kk * p];
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.c_out * p..(n + 1) * g.c_out * p];
        let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
        if g.is_pointwise() {
            matmul(kk, p, g.c_out, dxn, false, k, true, dyn_, false);
        } else {
            matmul(kk, p, g.c_out, &mut dcol, false, k, true, dyn_, false);
            col2im(g, &dcol, dxn);
        }
    }
    dx
}

fn grad_kernel<T: WithDType>(g: &Geometry, x: &[T], dy: &[T]) -> Vec<T> {
    let (kk, p) = (g.patch(), g.out_px());
    let mut dk = vec![T::zero(); g.c_out * kk];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for n in 0..g.batch {
        let xn = &x[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        let dyn_ = &dy[n * g.c_out * p..(n + 1) * g.c_out * p];
        matmul(g.c_out, kk, p, &mut dk, n > 0, dyn_, false, cols, true);
    }
    dk
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (contiguous(a, $l1)?, contiguous(b, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (contiguous(a, $l1)?, contiguous(b, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("conv2d supports matching f32/f64 operands only"),
        }
    };
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let out = dispatch!(s1, l1, s2, l2, |x, k| forward(&g, x, k));
        Ok((out, Shape::from((g.batch, g.c_out, g.ho, g.wo))))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = if arg.track_op() {
            let op = GradInputOp { stride: self.stride, pad: self.pad, h: arg.dim(2)?, w: arg.dim(3)? };
            Some(grad.apply_op2_no_bwd(kernel, &op)?)
        } else {
            None
        };
        let dk = if kernel.track_op() {
            let op = GradKernelOp { stride: self.stride, pad: self.pad, kh: kernel.dim(2)?, kw: kernel.dim(3)? };
            Some(arg.apply_op2_no_bwd(&grad, &op)?)
        } else {
            None
        };
        Ok((dx, dk))
    }
}

struct GradInputOp {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl CustomOp2 for GradInputOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, _, _, _) = l1.shape().dims4()?;
        let (_, c_in, _, _) = l2.shape().dims4()?;
        let g = Geometry::new(&[b, c_in, self.h, self.w], l2.dims(), self.stride, self.pad)?;
        if l1.dims() != [g.batch, g.c_out, g.ho, g.wo] {
            candle_core::bail!("conv2d grad shape {:?} inconsistent with geometry", l1.dims());
        }
        let out = dispatch!(s1, l1, s2, l2, |dy, k| grad_input(&g, dy, k));
        Ok((out, Shape::from((b, c_in, self.h, self.w))))
    }
}

struct GradKernelOp {
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
}

impl CustomOp2 for GradKernelOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-kernel"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c_in, _, _) = l1.shape().dims4()?;
        let (_, c_out, _, _) = l2.shape().dims4()?;
        let g = Geometry::new(l1.dims(), &[c_out, c_in, self.kh, self.kw], self.stride, self.pad)?;
        let out = dispatch!(s1, l1, s2, l2, |x, dy| grad_kernel(&g, x, dy));
        Ok((out, Shape::from((c_out, c_in, self.kh, self.kw))))
    }
}

/// Cross-correlation of `x (N, C, H, W)` with `kernel (O, C, KH, KW)`, zero
/// padding `pad` on every side.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(domain!("conv2d stride must be >= 1"));
    }
    if x.dtype() != kernel.dtype() || !matches!(x.dtype(), DType::F32 | DType::F64) {
        return Err(domain!("conv2d operands must share an f32/f64 dtype"));
    }
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    Ok(x.apply_op2(&kernel, Conv2dOp { stride, pad })?)
}
