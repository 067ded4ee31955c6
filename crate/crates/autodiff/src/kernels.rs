//! Raw array kernels shared by the tape and by inference-only callers.
//!
//! Convolutions go through im2col and a strided GEMM. Accumulation over the
//! batch always runs in sample order, so results are reproducible bit for bit.

use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dConfig {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with the padding that keeps the spatial size for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cfg: Conv2dConfig,
}

impl ConvGeometry {
    fn new(input: [usize; 4], weight: [usize; 4], cfg: Conv2dConfig) -> Result<Self> {
        let [n, c, h, w] = input;
        let [o, wc, kh, kw] = weight;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        let (oh, ow) = match (cfg.output_size(h, kh), cfg.output_size(w, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} with {cfg:?} does not fit {h}x{w}"),
                ))
            }
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            cfg,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cells(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate of tap `k` for output coordinate `o`, if inside the input.
    #[inline]
    fn source(&self, out: usize, tap: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.cfg.stride + tap * self.cfg.dilation) as isize - self.cfg.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let cells = self.cells();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * cells..(row + 1) * cells];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.source(oy, ki, self.h) {
                            None => line.fill(T::zero()),
                            Some(sy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kj, self.w) {
                                        Some(sx) => plane[sy * self.w + sx],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let cells = self.cells();
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * cells..(row + 1) * cells];
                    for oy in 0..self.oh {
                        let Some(sy) = self.source(oy, ki, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(sx) = self.source(ox, kj, self.w) {
                                plane[sy * self.w + sx] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and strides describe those slices.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `[n, k]` and `[k, m]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[n, k], &[k2, m]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); n * m];
    gemm(n, k, m, a.data(), false, b.data(), false, T::zero(), &mut out);
    Tensor::new(&[n, m], out)
}

/// 2-D cross-correlation of `x [N, C, H, W]` with `w [O, C, kh, kw]`; no bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, cfg: Conv2dConfig) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.dims4("conv2d")?, w.dims4("conv2d")?, cfg)?;
    let (patch, cells) = (g.patch(), g.cells());
    let mut cols = vec![T::zero(); patch * cells];
    let mut out = vec![T::zero(); g.n * g.o * cells];
    let in_len = g.c * g.h * g.w;
    for ni in 0..g.n {
        g.im2col(&x.data()[ni * in_len..(ni + 1) * in_len], &mut cols);
        let y = &mut out[ni * g.o * cells..(ni + 1) * g.o * cells];
        gemm(g.o, patch, cells, w.data(), false, &cols, false, T::zero(), y);
    }
    Tensor::new(&[g.n, g.o, g.oh, g.ow], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    cfg: Conv2dConfig,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let [n, o, oh, ow] = gy.dims4("conv2d_input_grad")?;
    let [wo, c, _, _] = w.dims4("conv2d_input_grad")?;
    if wo != o {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!("gradient has {o} channels, weight produces {wo}"),
        ));
    }
    let g = ConvGeometry::new([n, c, input_hw.0, input_hw.1], w.dims4("conv2d_input_grad")?, cfg)?;
    if (g.oh, g.ow) != (oh, ow) {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!("gradient is {oh}x{ow}, geometry gives {}x{}", g.oh, g.ow),
        ));
    }
    let (patch, cells) = (g.patch(), g.cells());
    let mut cols = vec![T::zero(); patch * cells];
    let in_len = c * g.h * g.w;
    let mut out = vec![T::zero(); n * in_len];
    for ni in 0..n {
        let gyn = &gy.data()[ni * o * cells..(ni + 1) * o * cells];
        gemm(patch, o, cells, w.data(), true, gyn, false, T::zero(), &mut cols);
        g.col2im(&cols, &mut out[ni * in_len..(ni + 1) * in_len]);
    }
    Tensor::new(&[n, c, g.h, g.w], out)
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    cfg: Conv2dConfig,
    kernel_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("conv2d_weight_grad")?;
    let [gn, o, oh, ow] = gy.dims4("conv2d_weight_grad")?;
    if gn != n {
        return Err(Error::shape("conv2d_weight_grad", "batch mismatch"));
    }
    let g = ConvGeometry::new([n, c, h, w], [o, c, kernel_hw.0, kernel_hw.1], cfg)?;
    if (g.oh, g.ow) != (oh, ow) {
        return Err(Error::shape(
            "conv2d_weight_grad",
            format!("gradient is {oh}x{ow}, geometry gives {}x{}", g.oh, g.ow),
        ));
    }
    let (patch, cells) = (g.patch(), g.cells());
    let mut cols = vec![T::zero(); patch * cells];
    let mut out = vec![T::zero(); o * patch];
    let in_len = c * h * w;
    for ni in 0..n {
        g.im2col(&x.data()[ni * in_len..(ni + 1) * in_len], &mut cols);
        let gyn = &gy.data()[ni * o * cells..(ni + 1) * o * cells];
        let beta = if ni == 0 { T::zero() } else { T::one() };
        gemm(o, cells, patch, gyn, false, &cols, true, beta, &mut out);
    }
    Tensor::new(&[o, c, kernel_hw.0, kernel_hw.1], out)
}

/// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("upsample2")?;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out)
}

/// Sum over non-overlapping 2×2 windows; the adjoint of [`upsample2`].
pub fn sum_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("sum_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("sum_pool2", format!("odd size {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / 2) * ow + xx / 2] += src[y * w + xx];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Max over non-overlapping 2×2 windows (ceil mode: partial windows at the edge).
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("max_pool2")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::neg_infinity(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                let d = &mut dst[(y / 2) * ow + xx / 2];
                *d = d.max(src[y * w + xx]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Adds `b[c]` to every element of channel `c` (channel axis 1).
pub fn bias_add<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 || b.shape() != [shape[1]] {
        return Err(Error::shape(
            "bias_add",
            format!("{:?} + {:?}", shape, b.shape()),
        ));
    }
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[(i / inner) % c];
    }
    Ok(out)
}

/// Sum over every axis except the channel axis.
pub fn channel_sum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape("channel_sum", format!("{shape:?}")));
    }
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = vec![T::zero(); c];
    for (i, &v) in x.data().iter().enumerate() {
        out[(i / inner) % c] += v;
    }
    Tensor::new(&[c], out)
}
