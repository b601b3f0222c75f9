//! Sequential CPU kernels. Reduction order is fixed, so results are
//! bit-reproducible across runs.

use crate::{Error, Result};

/// Dot product with eight independent partial sums (fixed order, vectorizable).
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let x = &a[c * 8..c * 8 + 8];
        let y = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], brow, &mut c[p * n..(p + 1) * n]);
        }
    }
}

/// Resolved geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be 4-D [n,c,h,w], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be 4-D [c_out,c_in,kh,kw], got {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("c_in: input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::OutputSize {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, c_in, h, w, c_out, kh, kw, stride, pad, oh, ow })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let (oh, ow) = (self.oh, self.ow);
        let plane = oh * ow;
        for ci in 0..self.c_in {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let (oh, ow) = (self.oh, self.ow);
        let plane = oh * ow;
        for ci in 0..self.c_in {
            let dc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f32], k: &[f32]) -> Vec<f32> {
    let plane = g.oh * g.ow;
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * plane;
    let mut out = vec![0.0f32; g.n * out_sz];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; g.patch() * plane] };
    for s in 0..g.n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let cols: &[f32] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        gemm_nn(k, cols, &mut out[s * out_sz..(s + 1) * out_sz], g.c_out, g.patch(), plane);
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel.
/// Either side may be skipped when it does not need a gradient.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    k: &[f32],
    dout: &[f32],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let plane = g.oh * g.ow;
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * plane;
    let patch = g.patch();
    let mut dx = want_dx.then(|| vec![0.0f32; g.n * in_sz]);
    let mut dk = want_dk.then(|| vec![0.0f32; g.c_out * patch]);
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; patch * plane] };
    let mut dcol = if pointwise { Vec::new() } else { vec![0.0f32; patch * plane] };
    for s in 0..g.n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let ds = &dout[s * out_sz..(s + 1) * out_sz];
        if let Some(dk) = dk.as_mut() {
            let cols: &[f32] = if pointwise {
                xs
            } else {
                g.im2col(xs, &mut col);
                &col
            };
            gemm_nt(ds, cols, dk, g.c_out, plane, patch);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
            if pointwise {
                gemm_tn(k, ds, dxs, g.c_out, patch, plane);
            } else {
                dcol.fill(0.0);
                gemm_tn(k, ds, &mut dcol, g.c_out, patch, plane);
                g.col2im(&dcol, dxs);
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f32> = (0..19).map(|i| i as f32).collect();
        let b = vec![1.0f32; 19];
        assert_eq!(dot(&a, &b), (0..19).sum::<i32>() as f32);
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f32> = (0..6).map(|i| i as f32 - 2.0).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|i| (i as f32) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);
        // bᵀ laid out as 4x3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        // aᵀ laid out as 3x2
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_tn(&at, &b, &mut c3, 3, 2, 4);
        assert_eq!(c, c3);
    }

    #[test]
    fn output_size_floors() {
        let g = ConvGeom::new(&[1, 1, 32, 32], &[1, 1, 1, 1], 2, 0).unwrap();
        assert_eq!((g.oh, g.ow), (16, 16));
        let g = ConvGeom::new(&[1, 1, 32, 32], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (16, 16));
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 5, 5], 1, 1).is_err());
    }
}
