//! Valid-padding 2-D convolutions in NHWC layout.
//!
//! Dense convolutions lower to a single GEMM through an im2col buffer whose
//! rows are output pixels and whose columns follow the kernel's
//! `[kh, kw, cin]` order, so the kernel tensor is used as a matrix in place.

use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kh: usize, kw: usize, stride: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(dim_err!("convolution input must be [N,H,W,C], got {input:?}"));
        }
        if stride == 0 {
            return Err(dim_err!("stride must be at least 1"));
        }
        let (n, h, w, c) = (input[0], input[1], input[2], input[3]);
        if kh > h || kw > w {
            return Err(dim_err!(
                "kernel {kh}x{kw} larger than input {h}x{w}"
            ));
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    /// Output spatial extent of a valid convolution.
    pub fn output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
        (kernel <= input && stride > 0).then(|| (input - kernel) / stride + 1)
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let run = g.kw * g.c;
    let mut col = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut col[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let src = ((n * g.h + oy * g.stride + ky) * g.w + ox * g.stride) * g.c;
                    dst[ky * run..(ky + 1) * run].copy_from_slice(&input[src..src + run]);
                }
                row += 1;
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let run = g.kw * g.c;
    let mut out = vec![T::zero(); g.n * g.h * g.w * g.c];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &col[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let dst = ((n * g.h + oy * g.stride + ky) * g.w + ox * g.stride) * g.c;
                    out[dst..dst + run]
                        .iter_mut()
                        .zip(&src[ky * run..(ky + 1) * run])
                        .for_each(|(o, &v)| *o += v);
                }
                row += 1;
            }
        }
    }
    out
}

fn check_dense<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<(ConvGeometry, usize)> {
    kernel.expect_rank(4, "conv2d kernel")?;
    let ks = kernel.shape();
    let g = ConvGeometry::new(input.shape(), ks[0], ks[1], stride)?;
    if ks[2] != g.c {
        return Err(dim_err!(
            "conv2d kernel expects {} input channels, input has {}",
            ks[2],
            g.c
        ));
    }
    Ok((g, ks[3]))
}

/// `out[n, y, x, o] = bias[o] + sum_{ky,kx,c} input[n, y*s+ky, x*s+kx, c] * kernel[ky, kx, c, o]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (g, cout) = check_dense(input, kernel, stride)?;
    if bias.shape() != [cout] {
        return Err(dim_err!("conv2d bias must be [{cout}], got {:?}", bias.shape()));
    }
    let col = im2col(input.data(), &g);
    let rows = g.rows();
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm(rows, g.patch(), cout, &col, false, kernel.data(), false, T::one(), &mut out);
    Tensor::new(&[g.n, g.oh, g.ow, cout], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    /// Absent when the caller did not request the input gradient.
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (g, cout) = check_dense(input, kernel, stride)?;
    if grad_out.shape() != [g.n, g.oh, g.ow, cout] {
        return Err(dim_err!(
            "conv2d gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.oh, g.ow, cout]
        ));
    }
    let rows = g.rows();
    let patch = g.patch();
    let dy = grad_out.data();

    let col = im2col(input.data(), &g);
    let mut dk = vec![T::zero(); patch * cout];
    gemm(patch, rows, cout, &col, true, dy, false, T::zero(), &mut dk);
    drop(col);

    let mut db = vec![T::zero(); cout];
    for r in dy.chunks_exact(cout) {
        db.iter_mut().zip(r).for_each(|(b, &v)| *b += v);
    }

    let dx = if need_input_grad {
        let mut dcol = vec![T::zero(); rows * patch];
        gemm(rows, cout, patch, dy, false, kernel.data(), true, T::zero(), &mut dcol);
        Some(Tensor::new(input.shape(), col2im(&dcol, &g))?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: dx,
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: Tensor::new(&[cout], db)?,
    })
}

fn check_depthwise<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<ConvGeometry> {
    kernel.expect_rank(3, "depthwise kernel")?;
    let ks = kernel.shape();
    let g = ConvGeometry::new(input.shape(), ks[0], ks[1], stride)?;
    if ks[2] != g.c {
        return Err(dim_err!(
            "depthwise kernel has {} channels, input has {}",
            ks[2],
            g.c
        ));
    }
    Ok(g)
}

/// One spatial filter per channel, no channel mixing, linear output.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = check_depthwise(input, kernel, stride)?;
    let c = g.c;
    if bias.shape() != [c] {
        return Err(dim_err!("depthwise bias must be [{c}], got {:?}", bias.shape()));
    }
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * c];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((n * g.oh + oy) * g.ow + ox) * c;
                let acc = &mut out[o..o + c];
                acc.copy_from_slice(bias.data());
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let xi = ((n * g.h + oy * g.stride + ky) * g.w + ox * g.stride + kx) * c;
                        let ki = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            acc[ch] += x[xi + ch] * k[ki + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.oh, g.ow, c], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = check_depthwise(input, kernel, stride)?;
    let c = g.c;
    if grad_out.shape() != [g.n, g.oh, g.ow, c] {
        return Err(dim_err!(
            "depthwise gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.oh, g.ow, c]
        ));
    }
    let x = input.data();
    let k = kernel.data();
    let dy = grad_out.data();
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); c];
    let mut dx = need_input_grad.then(|| vec![T::zero(); input.len()]);
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((n * g.oh + oy) * g.ow + ox) * c;
                let gy = &dy[o..o + c];
                db.iter_mut().zip(gy).for_each(|(b, &v)| *b += v);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let xi = ((n * g.h + oy * g.stride + ky) * g.w + ox * g.stride + kx) * c;
                        let ki = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            dk[ki + ch] += x[xi + ch] * gy[ch];
                        }
                        if let Some(dx) = dx.as_mut() {
                            for ch in 0..c {
                                dx[xi + ch] += k[ki + ch] * gy[ch];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: Tensor::new(&[c], db)?,
    })
}
