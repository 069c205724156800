//! Stride-1, zero-padded "same" cross-correlation and its adjoint.
//!
//! For a kernel of extent `k` the padding before an axis is `(k - 1) / 2` and
//! the padding after it is `k / 2`, so even kernels reach one pixel further
//! towards the bottom/right. The output spatial extent equals the input's.

use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

/// Geometry shared by the three kernels.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
}

impl Geometry {
    fn pad_h(&self) -> usize {
        (self.kh - 1) / 2
    }

    fn pad_w(&self) -> usize {
        (self.kw - 1) / 2
    }

    /// Output rows `i` for which `i + a - pad` lands inside the image.
    fn rows(&self, a: usize) -> (usize, usize) {
        let pad = self.pad_h();
        let lo = pad.saturating_sub(a);
        let hi = (self.height + pad).saturating_sub(a).min(self.height);
        (lo, hi.max(lo))
    }

    fn cols(&self, b: usize) -> (usize, usize) {
        let pad = self.pad_w();
        let lo = pad.saturating_sub(b);
        let hi = (self.width + pad).saturating_sub(b).min(self.width);
        (lo, hi.max(lo))
    }
}

fn geometry(op: &'static str, image: &[usize], w: &[usize], image_is_input: bool) -> Result<Geometry> {
    let [n, c, h, wd] = image[..] else {
        return Err(invalid(op, format!("image must be [N, C, H, W], got {image:?}")));
    };
    let [co, ci, kh, kw] = w[..] else {
        return Err(invalid(op, format!("kernel must be [C_out, C_in, k, k], got {w:?}")));
    };
    let expected = if image_is_input { ci } else { co };
    if c != expected {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![expected],
            got: vec![c],
        });
    }
    if kh == 0 || kw == 0 || kh > h || kw > wd {
        return Err(invalid(op, format!("kernel {kh}x{kw} does not fit image {h}x{wd}")));
    }
    Ok(Geometry {
        batch: n,
        c_in: ci,
        c_out: co,
        height: h,
        width: wd,
        kh,
        kw,
    })
}

/// `out[n, o, i, j] = sum_{c, a, b} w[o, c, a, b] * x[n, c, i + a - pad, j + b - pad]`.
pub fn conv2d_same(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let g = geometry("conv2d_same", x.shape(), w.shape(), true)?;
    let (h, wd) = (g.height, g.width);
    let plane = h * wd;
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    let (xd, wdat) = (x.data(), w.data());
    for n in 0..g.batch {
        for o in 0..g.c_out {
            let out_plane = &mut out[(n * g.c_out + o) * plane..][..plane];
            for c in 0..g.c_in {
                let x_plane = &xd[(n * g.c_in + c) * plane..][..plane];
                for a in 0..g.kh {
                    let (r0, r1) = g.rows(a);
                    for b in 0..g.kw {
                        let wv = wdat[((o * g.c_in + c) * g.kh + a) * g.kw + b];
                        let (c0, c1) = g.cols(b);
                        for i in r0..r1 {
                            let src = (i + a - g.pad_h()) * wd + c0 + b - g.pad_w();
                            let dst = &mut out_plane[i * wd + c0..i * wd + c1];
                            for (d, s) in dst.iter_mut().zip(&x_plane[src..src + (c1 - c0)]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([g.batch, g.c_out, h, wd], out)
}

/// Transpose of [`conv2d_same`] with respect to its image argument: maps
/// `[N, C_out, H, W]` back to `[N, C_in, H, W]`.
pub fn conv2d_adjoint(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    let g = geometry("conv2d_adjoint", y.shape(), w.shape(), false)?;
    let (h, wd) = (g.height, g.width);
    let plane = h * wd;
    let mut out = vec![0.0; g.batch * g.c_in * plane];
    let (yd, wdat) = (y.data(), w.data());
    for n in 0..g.batch {
        for c in 0..g.c_in {
            let out_plane = &mut out[(n * g.c_in + c) * plane..][..plane];
            for o in 0..g.c_out {
                let y_plane = &yd[(n * g.c_out + o) * plane..][..plane];
                for a in 0..g.kh {
                    let (r0, r1) = g.rows(a);
                    for b in 0..g.kw {
                        let wv = wdat[((o * g.c_in + c) * g.kh + a) * g.kw + b];
                        let (c0, c1) = g.cols(b);
                        for i in r0..r1 {
                            let dst = (i + a - g.pad_h()) * wd + c0 + b - g.pad_w();
                            let src = &y_plane[i * wd + c0..i * wd + c1];
                            for (d, s) in out_plane[dst..dst + (c1 - c0)].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([g.batch, g.c_in, h, wd], out)
}

/// Gradient of `<conv2d_same(x, w), g>` with respect to `w`:
/// `dw[o, c, a, b] = sum_{n, i, j} g[n, o, i, j] * x[n, c, i + a - pad, j + b - pad]`.
pub fn conv2d_kernel_grad(x: &Tensor, g_out: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let [n, ci, h, wd] = x.shape()[..] else {
        return Err(invalid("conv2d_kernel_grad", format!("bad image shape {:?}", x.shape())));
    };
    let [n2, co, h2, w2] = g_out.shape()[..] else {
        return Err(invalid("conv2d_kernel_grad", format!("bad grad shape {:?}", g_out.shape())));
    };
    if (n, h, wd) != (n2, h2, w2) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_kernel_grad",
            expected: x.shape().to_vec(),
            got: g_out.shape().to_vec(),
        });
    }
    let g = Geometry {
        batch: n,
        c_in: ci,
        c_out: co,
        height: h,
        width: wd,
        kh,
        kw,
    };
    let plane = h * wd;
    let mut dw = vec![0.0; co * ci * kh * kw];
    let (xd, gd) = (x.data(), g_out.data());
    for o in 0..co {
        for c in 0..ci {
            for a in 0..kh {
                let (r0, r1) = g.rows(a);
                for b in 0..kw {
                    let (c0, c1) = g.cols(b);
                    let mut acc = 0.0;
                    for s in 0..n {
                        let x_plane = &xd[(s * ci + c) * plane..][..plane];
                        let g_plane = &gd[(s * co + o) * plane..][..plane];
                        for i in r0..r1 {
                            let src = (i + a - g.pad_h()) * wd + c0 + b - g.pad_w();
                            let gs = &g_plane[i * wd + c0..i * wd + c1];
                            for (gv, xv) in gs.iter().zip(&x_plane[src..src + (c1 - c0)]) {
                                acc += gv * xv;
                            }
                        }
                    }
                    dw[((o * ci + c) * kh + a) * kw + b] = acc;
                }
            }
        }
    }
    Tensor::new([co, ci, kh, kw], dw)
}
