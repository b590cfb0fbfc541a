//! Scalar abstraction for the fitting and model code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating point types the fitters and the observability model run on.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in every Real")
    }

    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("u64 representable in every Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Inverts a small symmetric positive definite matrix with Gauss-Jordan
/// elimination and partial pivoting. Returns `None` when singular.
pub(crate) fn invert<T: Real, const N: usize>(m: [[T; N]; N]) -> Option<[[T; N]; N]> {
    let mut a = m;
    let mut inv = [[T::zero(); N]; N];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = T::one();
    }
    for col in 0..N {
        let pivot = (col..N).max_by(|&x, &y| {
            a[x][col]
                .abs()
                .partial_cmp(&a[y][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() <= T::epsilon() * T::lit(1e-6) || !a[pivot][col].is_finite() {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..N {
            a[col][j] = a[col][j] / p;
            inv[col][j] = inv[col][j] / p;
        }
        for r in 0..N {
            if r == col {
                continue;
            }
            let f = a[r][col];
            if f == T::zero() {
                continue;
            }
            for j in 0..N {
                a[r][j] = a[r][j] - f * a[col][j];
                inv[r][j] = inv[r][j] - f * inv[col][j];
            }
        }
    }
    Some(inv)
}

/// Golden-section minimisation of a unimodal function on `[lo, hi]`.
///
/// Stops when the bracket is narrower than `tol` or after `max_iter`
/// contractions, whichever comes first.
pub(crate) fn golden_min<T: Real>(
    mut lo: T,
    mut hi: T,
    tol: T,
    max_iter: usize,
    mut f: impl FnMut(T) -> T,
) -> (T, T) {
    let inv_phi = T::lit(0.618_033_988_749_894_9);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..max_iter {
        if (hi - lo).abs() <= tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}
