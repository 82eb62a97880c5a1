use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rustfft::{Fft, FftNum, FftPlanner};

/// Element type of a [`Tensor`](crate::Tensor): `f32` for training, `f64` for
/// gradient checks and solver validation.
pub trait Scalar:
    Float + FftNum + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` on row/column strides, as in BLAS.
    ///
    /// # Safety
    /// The strided views must lie inside the allocations behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Runs `f` with the thread-local FFT plan cache for this precision.
    fn with_plans<R>(f: impl FnOnce(&mut FftPlans<Self>) -> R) -> R;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

/// Cache of forward/inverse complex FFT plans keyed by length.
pub struct FftPlans<T: FftNum> {
    planner: FftPlanner<T>,
    forward: HashMap<usize, Arc<dyn Fft<T>>>,
    inverse: HashMap<usize, Arc<dyn Fft<T>>>,
}

impl<T: FftNum> FftPlans<T> {
    fn new() -> Self {
        Self {
            planner: FftPlanner::new(),
            forward: HashMap::new(),
            inverse: HashMap::new(),
        }
    }

    pub fn forward(&mut self, len: usize) -> Arc<dyn Fft<T>> {
        let planner = &mut self.planner;
        self.forward
            .entry(len)
            .or_insert_with(|| planner.plan_fft_forward(len))
            .clone()
    }

    pub fn inverse(&mut self, len: usize) -> Arc<dyn Fft<T>> {
        let planner = &mut self.planner;
        self.inverse
            .entry(len)
            .or_insert_with(|| planner.plan_fft_inverse(len))
            .clone()
    }
}

thread_local! {
    static PLANS_F32: RefCell<FftPlans<f32>> = RefCell::new(FftPlans::new());
    static PLANS_F64: RefCell<FftPlans<f64>> = RefCell::new(FftPlans::new());
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn with_plans<R>(f: impl FnOnce(&mut FftPlans<Self>) -> R) -> R {
        PLANS_F32.with(|p| f(&mut p.borrow_mut()))
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn with_plans<R>(f: impl FnOnce(&mut FftPlans<Self>) -> R) -> R {
        PLANS_F64.with(|p| f(&mut p.borrow_mut()))
    }
}

/// Dense row-major matrix product `c (+)= op(a) · op(b)`.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when
/// `trans_b`), `c` is `m×n`. With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs extent");
    assert_eq!(b.len(), k * n, "rhs extent");
    assert_eq!(c.len(), m * n, "output extent");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the extents were checked above and the strides describe
    // row-major (or transposed row-major) views over exactly those slices.
    unsafe {
        T::gemm_raw(
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
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_loops() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(2, 3, 4, &a, false, &b, false, &mut c, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ stored as 3x2, bᵀ stored as 4x3
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c2 = vec![1.0; 8];
        matmul(2, 3, 4, &at, true, &bt, true, &mut c2, true);
        for (x, y) in c.iter().zip(&c2) {
            assert_eq!(x + 1.0, *y);
        }
    }
}
