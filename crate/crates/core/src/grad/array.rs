use std::cell::Cell;
use std::fmt::Debug;

use num_traits::Float as NumFloat;

use crate::error::{shape_err, Result};
use crate::fmath;

thread_local! {
    static PORTABLE: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with the deterministic matrix kernel selected on this thread.
///
/// The fast kernel picks SIMD paths (including fused multiply-add) at runtime,
/// so its rounding differs between machines. Anything whose output feeds an
/// entropy coder must run under this guard.
pub fn portable<R>(f: impl FnOnce() -> R) -> R {
    let prev = PORTABLE.with(|p| p.replace(true));
    let out = f();
    PORTABLE.with(|p| p.set(prev));
    out
}

pub fn is_portable() -> bool {
    PORTABLE.with(|p| p.get())
}

/// Element type of [`Array`]: `f32` for training, `f64` for gradient checks.
pub trait Float: NumFloat + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_fast(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    );

    fn pexp(self) -> Self {
        if is_portable() {
            Self::of(fmath::exp(self.f64()))
        } else {
            Self::of(self.f64().exp())
        }
    }
    fn pln(self) -> Self {
        if is_portable() {
            Self::of(fmath::ln(self.f64()))
        } else {
            Self::of(self.f64().ln())
        }
    }
    fn ptanh(self) -> Self {
        if is_portable() {
            Self::of(fmath::tanh(self.f64()))
        } else {
            Self::of(self.f64().tanh())
        }
    }
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            fn of(x: f64) -> Self {
                x as $t
            }
            fn f64(self) -> f64 {
                self as f64
            }
            fn gemm_fast(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k > 0 {
                    let a_need = (m - 1) * rsa + (k - 1) * csa + 1;
                    let b_need = (k - 1) * rsb + (n - 1) * csb + 1;
                    assert!(a.len() >= a_need && b.len() >= b_need);
                }
                assert!(c.len() >= m * n);
                // SAFETY: extents checked above; c is contiguous row-major m x n.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Row-major `c (m x n) = a * b + beta * c`, strided `a`/`b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    accumulate: bool,
    c: &mut [T],
) {
    if !is_portable() {
        let beta = if accumulate { T::one() } else { T::zero() };
        T::gemm_fast(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
        return;
    }
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = T::zero());
    }
    let packed;
    let (bd, rsb) = if csb == 1 {
        (b, rsb)
    } else {
        let mut tmp = vec![T::zero(); k * n];
        for p in 0..k {
            for j in 0..n {
                tmp[p * n + j] = b[p * rsb + j * csb];
            }
        }
        packed = tmp;
        (&packed[..], n)
    };
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * rsa + p * csa];
            let brow = &bd[p * rsb..p * rsb + n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Array<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "data",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise view with `perm` applied to the axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides = strides(&self.shape);
        let st: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        for_each_index(&shape, |_, off| out.push(self.data[off]), &st);
        Self { shape, data: out }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every multi-index of `shape` in row-major order, passing the linear
/// output position and the offset under `st`.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, usize), st: &[usize]) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let inner = shape[nd - 1];
    let inner_st = st[nd - 1];
    let mut pos = 0;
    loop {
        let mut o = off;
        for _ in 0..inner {
            f(pos, o);
            pos += 1;
            o += inner_st;
        }
        // carry into outer axes
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= st[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` when broadcast into `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let nd = out.len();
    (0..nd)
        .map(|i| {
            if i + src.len() < nd {
                0
            } else {
                let j = i + src.len() - nd;
                if src[j] == 1 {
                    0
                } else {
                    s[j]
                }
            }
        })
        .collect()
}

/// Sums `g` (shaped like `out`) down to `src` by undoing broadcasting.
pub(crate) fn reduce_to<T: Float>(g: &Array<T>, src: &[usize]) -> Array<T> {
    if g.shape() == src {
        return g.clone();
    }
    let st = broadcast_strides(src, g.shape());
    let mut acc = Array::zeros(src);
    let gd = g.data();
    let ad = acc.data_mut();
    for_each_index(g.shape(), |pos, off| ad[off] = ad[off] + gd[pos], &st);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn portable_gemm_matches_fast() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i % 7) as f64 - 3.0).collect();
        let mut c1 = vec![0.0; 15];
        let mut c2 = vec![0.0; 15];
        gemm(3, 4, 5, &a, (4, 1), &b, (5, 1), false, &mut c1);
        portable(|| gemm(3, 4, 5, &a, (4, 1), &b, (5, 1), false, &mut c2));
        assert_eq!(c1, c2);
        // transposed operand through strides
        let mut c3 = vec![0.0; 9];
        let mut c4 = vec![0.0; 9];
        gemm(3, 4, 3, &a, (4, 1), &a, (1, 4), false, &mut c3);
        portable(|| gemm(3, 4, 3, &a, (4, 1), &a, (1, 4), false, &mut c4));
        assert_eq!(c3, c4);
    }

    #[test]
    fn broadcast_reduce() {
        let g = Array::<f64>::full(&[2, 3, 4], 1.0);
        let r = reduce_to(&g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.data().iter().all(|&v| v == 8.0));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 4], &[3]), None);
    }

    #[test]
    fn permute_transposes() {
        let a = Array::<f64>::from_f64(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
        let t = a.permuted(&[1, 0]);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0., 3., 1., 4., 2., 5.]);
    }
}
