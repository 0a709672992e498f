//! Dense row-major tensors and the scalar trait shared by the numeric code.
//!
//! Training runs in `f32`; gradient verification runs the exact same code in
//! `f64`. Everything numeric is generic over [`Real`].

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Storage code used by the on-disk formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8 = 1,
    F32 = 2,
    F64 = 3,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::U8),
            2 => Some(DType::F32),
            3 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn c(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `C <- alpha * A B + beta * C` with arbitrary strides (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn to_le(self, out: &mut Vec<u8>);

    fn from_le(bytes: &[u8]) -> Self;
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(last >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $dt:expr, $gemm:path, $n:expr) => {
        impl Real for $t {
            const DTYPE: DType = $dt;

            #[inline]
            fn c(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: operand extents were checked against the slices above.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }

            fn to_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le(bytes: &[u8]) -> Self {
                let mut raw = [0u8; $n];
                raw.copy_from_slice(&bytes[..$n]);
                <$t>::from_le_bytes(raw)
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_real!(f64, DType::F64, matrixmultiply::dgemm, 8);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| F::c(x)).collect())
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Channels, height and width of a 3-D tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a CHW map, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "bad reshape to {shape:?}");
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| G::c(x.f64())).collect() }
    }

    /// Matrix product of two 2-D tensors, optionally transposing either side.
    pub fn matmul(&self, trans_a: bool, other: &Tensor<F>, trans_b: bool) -> Tensor<F> {
        let (ar, ac) = self.dims2();
        let (br, bc) = other.dims2();
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![F::zero(); m * n];
        gemm_into(self.data(), ar, ac, trans_a, other.data(), br, bc, trans_b, &mut out, F::zero());
        Tensor::new(&[m, n], out)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[F] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }
}

/// `out <- op(A) op(B) + beta * out` for row-major buffers.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<F: Real>(
    a: &[F],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[F],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    out: &mut [F],
    beta: F,
) {
    let (m, k, rsa, csa) =
        if trans_a { (a_cols, a_rows, 1isize, a_cols as isize) } else { (a_rows, a_cols, a_cols as isize, 1isize) };
    let (k2, n, rsb, csb) =
        if trans_b { (b_cols, b_rows, 1isize, b_cols as isize) } else { (b_rows, b_cols, b_cols as isize, 1isize) };
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert_eq!(out.len(), m * n);
    // Thin products lose most of their time to packing; plain loops are faster.
    if m <= 4 || k <= 4 {
        assert!(a.len() >= m * k && b.len() >= k * n);
        let at = |i: usize, p: usize| a[(i as isize * rsa + p as isize * csa) as usize];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            if beta == F::zero() {
                row.fill(F::zero());
            } else if beta != F::one() {
                row.iter_mut().for_each(|v| *v *= beta);
            }
            if csb == 1 {
                for p in 0..k {
                    let s = at(i, p);
                    let src = &b[p * n..(p + 1) * n];
                    for (o, &x) in row.iter_mut().zip(src) {
                        *o += s * x;
                    }
                }
            } else {
                for (j, o) in row.iter_mut().enumerate() {
                    let col = &b[j * k..(j + 1) * k];
                    let mut acc = F::zero();
                    for (p, &x) in col.iter().enumerate() {
                        acc += at(i, p) * x;
                    }
                    *o += acc;
                }
            }
        }
        return;
    }
    F::gemm(m, k, n, F::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
}
