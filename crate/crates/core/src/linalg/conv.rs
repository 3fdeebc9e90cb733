//! 2-D convolution kernels shared by the training layer and the operator view.
//!
//! Layout is channel-major per sample: `(channels, height, width)`. Weights are
//! `(out_ch, in_ch, kh, kw)`, which is also the `out_ch x (in_ch*kh*kw)` matrix
//! consumed by the im2col product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::shape("convolution stride must be positive"));
        }
        if [
            self.in_ch,
            self.in_h,
            self.in_w,
            self.out_ch,
            self.kh,
            self.kw,
        ]
        .contains(&0)
        {
            return Err(Error::shape(format!("zero extent in convolution {self:?}")));
        }
        if self.in_h + 2 * self.pad < self.kh || self.in_w + 2 * self.pad < self.kw {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kh,
                self.kw,
                self.in_h + 2 * self.pad,
                self.in_w + 2 * self.pad
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_h() * self.out_w()
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Columns of the im2col matrix.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Input coordinate read by kernel tap `(ky, kx)` at output `(oy, ox)`,
    /// or `None` when it falls into the zero padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }
}

/// Unfolds one sample into a `patch_len x positions` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some((iy, ix)) => input[(c * g.in_h + iy) * g.in_w + ix],
                            None => T::ZERO,
                        };
                    }
                }
            }
        }
    }
}

/// Folds a `patch_len x positions` matrix back, accumulating into `out`.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            out[(c * g.in_h + iy) * g.in_w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = W * im2col(input) (+ bias)` for one sample. `cols` is scratch space.
pub fn conv_forward_sample<T: Scalar>(
    g: &ConvGeometry,
    weight: &[T],
    bias: Option<&[T]>,
    input: &[T],
    out: &mut [T],
    cols: &mut [T],
) {
    let (k, p) = (g.patch_len(), g.positions());
    im2col(g, input, cols);
    match bias {
        Some(b) => {
            for (oc, chunk) in out.chunks_mut(p).enumerate() {
                chunk.fill(b[oc]);
            }
            T::gemm(
                g.out_ch,
                k,
                p,
                T::ONE,
                weight,
                false,
                cols,
                false,
                T::ONE,
                out,
            );
        }
        None => T::gemm(
            g.out_ch,
            k,
            p,
            T::ONE,
            weight,
            false,
            cols,
            false,
            T::ZERO,
            out,
        ),
    }
}

/// Adjoint of the bias-free convolution for one sample: `dinput += col2im(Wᵀ dout)`.
pub fn conv_adjoint_sample<T: Scalar>(
    g: &ConvGeometry,
    weight: &[T],
    dout: &[T],
    dinput: &mut [T],
    cols: &mut [T],
) {
    let (k, p) = (g.patch_len(), g.positions());
    T::gemm(
        k,
        g.out_ch,
        p,
        T::ONE,
        weight,
        true,
        dout,
        false,
        T::ZERO,
        cols,
    );
    col2im(g, cols, dinput);
}
