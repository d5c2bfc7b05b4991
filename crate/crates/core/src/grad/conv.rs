//! im2col-based 2-D convolution kernels (NCHW).

use serde::{Deserialize, Serialize};

use super::array::{gemm, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Geometry of a forward convolution from `(h, w)` to `(ho, wo)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, mode: PadMode) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        if mode == PadMode::Reflect && (pad >= h || pad >= w) {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            mode,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn src(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Reflect => Some(reflect(i, n)),
        }
    }
}

/// Mirror index without repeating the edge sample (numpy "reflect").
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// `cols[(c,ky,kx), (oy,ox)] = x[c, oy*s+ky-p, ox*s+kx-p]`.
pub fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let ncol = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let sy = g.src(iy, g.h);
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        out[oy * g.wo + ox] = match (sy, g.src(ix, g.w)) {
                            (Some(y), Some(xx)) => plane[y * g.w + xx],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `x`.
pub fn col2im<T: Float>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let ncol = g.cols();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let Some(y) = g.src(iy, g.h) else { continue };
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if let Some(xx) = g.src(ix, g.w) {
                            let v = &mut plane[y * g.w + xx];
                            *v = *v + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// out[n] = W (cout x rows) * im2col(x[n]).
pub fn conv_forward<T: Float>(g: &ConvGeom, batch: usize, cout: usize, x: &[T], w: &[T], out: &mut [T]) {
    let (rows, ncol) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); rows * ncol];
    let in_sz = g.cin * g.h * g.w;
    for n in 0..batch {
        im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut cols);
        gemm(cout, rows, ncol, w, (rows, 1), &cols, (ncol, 1), false, &mut out[n * cout * ncol..(n + 1) * cout * ncol]);
    }
}

/// Gradients of [`conv_forward`] w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Float>(
    g: &ConvGeom,
    batch: usize,
    cout: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let (rows, ncol) = (g.rows(), g.cols());
    let in_sz = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); rows * ncol];
    if let Some(gw) = gw {
        for n in 0..batch {
            im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut cols);
            let go = &gout[n * cout * ncol..(n + 1) * cout * ncol];
            gemm(cout, ncol, rows, go, (ncol, 1), &cols, (1, ncol), true, gw);
        }
    }
    if let Some(gx) = gx {
        for n in 0..batch {
            let go = &gout[n * cout * ncol..(n + 1) * cout * ncol];
            gemm(rows, cout, ncol, w, (1, rows), go, (ncol, 1), false, &mut cols);
            col2im(g, &cols, &mut gx[n * in_sz..(n + 1) * in_sz]);
        }
    }
}

/// Transposed convolution: `g` describes the forward conv from the OUTPUT
/// (cout channels, g.h x g.w) to the INPUT (cin channels, g.ho x g.wo).
/// Weight layout is (cin, cout, k, k).
pub fn convt_forward<T: Float>(g: &ConvGeom, batch: usize, cin: usize, x: &[T], w: &[T], out: &mut [T]) {
    let (rows, ncol) = (g.rows(), g.cols());
    let out_sz = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); rows * ncol];
    out.iter_mut().for_each(|v| *v = T::zero());
    for n in 0..batch {
        let xn = &x[n * cin * ncol..(n + 1) * cin * ncol];
        gemm(rows, cin, ncol, w, (1, rows), xn, (ncol, 1), false, &mut cols);
        col2im(g, &cols, &mut out[n * out_sz..(n + 1) * out_sz]);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn convt_backward<T: Float>(
    g: &ConvGeom,
    batch: usize,
    cin: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let (rows, ncol) = (g.rows(), g.cols());
    let out_sz = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); rows * ncol];
    let mut gx = gx;
    let mut gw = gw;
    for n in 0..batch {
        im2col(g, &gout[n * out_sz..(n + 1) * out_sz], &mut cols);
        if let Some(gx) = gx.as_deref_mut() {
            gemm(cin, rows, ncol, w, (rows, 1), &cols, (ncol, 1), false, &mut gx[n * cin * ncol..(n + 1) * cin * ncol]);
        }
        if let Some(gw) = gw.as_deref_mut() {
            let xn = &x[n * cin * ncol..(n + 1) * cin * ncol];
            gemm(cin, ncol, rows, xn, (ncol, 1), &cols, (1, ncol), true, gw);
        }
    }
}
