//! 2-D convolution kernels (im2col + GEMM), shared by the autodiff tape and tests.

use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }
}

/// `out = floor((in + 2·pad − kernel) / stride) + 1`, or `None` when the
/// padded input is smaller than the kernel.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(xs: &[usize], ws: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (&[n, c, h, w], &[o, wc, kh, kw]) = (xs, ws) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OCKK weight, got {xs:?} and {ws:?}"),
            ));
        };
        if c != wc {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight {ws:?} expects {wc}"),
            ));
        }
        let out = |i, k| conv_output_size(i, k, spec.stride, spec.padding);
        let (Some(ho), Some(wo)) = (out(h, kh), out(w, kw)) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} too small for kernel {kh}x{kw} with {spec:?}"),
            ));
        };
        Ok(Geometry { n, c, h, w, o, kh, kw, ho, wo, stride: spec.stride, pad: spec.padding })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Input row/col sampled by output `(oy, ox)` at kernel tap `(ki, kj)`.
    #[inline]
    fn source(&self, oy: usize, ki: usize, ox: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let p = self.positions();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.source(oy, ki, ox, kj) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => S::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let p = self.positions();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.source(oy, ki, ox, kj) {
                                plane[y * self.w + x] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [N, C, H, W]` with `weight: [O, C, KH, KW]` plus optional `bias: [O]`.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: Conv2dSpec,
) -> Result<Tensor<S>> {
    let g = Geometry::new(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} filters", b.shape(), g.o)));
        }
    }
    let (patch, p) = (g.patch(), g.positions());
    let mut out = vec![S::zero(); g.n * g.o * p];
    let mut cols = vec![S::zero(); patch * p];
    let in_stride = g.c * g.h * g.w;
    for ni in 0..g.n {
        g.im2col(&x.data()[ni * in_stride..(ni + 1) * in_stride], &mut cols);
        let dst = &mut out[ni * g.o * p..(ni + 1) * g.o * p];
        S::gemm(
            MatRef::row_major(weight.data(), g.o, patch),
            MatRef::row_major(&cols, patch, p),
            dst,
            false,
        );
        if let Some(b) = bias {
            for (oi, row) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[oi];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) struct ConvGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    spec: Conv2dSpec,
    dout: &Tensor<S>,
    want: [bool; 3],
) -> Result<ConvGrads<S>> {
    let g = Geometry::new(x.shape(), weight.shape(), spec)?;
    let (patch, p) = (g.patch(), g.positions());
    let in_stride = g.c * g.h * g.w;
    let mut dx = want[0].then(|| vec![S::zero(); x.len()]);
    let mut dw = want[1].then(|| vec![S::zero(); weight.len()]);
    let mut cols = vec![S::zero(); patch * p];
    for ni in 0..g.n {
        let dy = &dout.data()[ni * g.o * p..(ni + 1) * g.o * p];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[ni * in_stride..(ni + 1) * in_stride], &mut cols);
            // dW[O, CKK] += dY[O, P] · colsᵀ[P, CKK]
            S::gemm(
                MatRef::row_major(dy, g.o, p),
                MatRef::transposed(&cols, p, patch),
                dw,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[CKK, P] = Wᵀ[CKK, O] · dY[O, P]
            S::gemm(
                MatRef::transposed(weight.data(), patch, g.o),
                MatRef::row_major(dy, g.o, p),
                &mut cols,
                false,
            );
            g.col2im(&cols, &mut dx[ni * in_stride..(ni + 1) * in_stride]);
        }
    }
    let db = want[2].then(|| {
        let mut db = vec![0.0f64; g.o];
        for ni in 0..g.n {
            for oi in 0..g.o {
                let base = (ni * g.o + oi) * p;
                db[oi] += dout.data()[base..base + p].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        db.into_iter().map(S::lit).collect::<Vec<_>>()
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(vec![g.o], d)).transpose()?,
    })
}

/// Adjoint of the (bias-free) convolution with respect to its input:
/// `<conv(x), y> == <x, conv2d_input_grad(y)>`.
pub fn conv2d_input_grad<S: Scalar>(
    dout: &Tensor<S>,
    weight: &Tensor<S>,
    input_shape: &[usize],
    spec: Conv2dSpec,
) -> Result<Tensor<S>> {
    let probe = Tensor::zeros(input_shape);
    let g = Geometry::new(input_shape, weight.shape(), spec)?;
    if dout.shape() != [g.n, g.o, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!("gradient {:?} does not match output of {input_shape:?}", dout.shape()),
        ));
    }
    let grads = conv2d_backward(&probe, weight, spec, dout, [true, false, false])?;
    Ok(grads.input.expect("input gradient requested"))
}
