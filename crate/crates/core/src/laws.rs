//! The closed-form traffic laws, evaluated pointwise.

use crate::num::Real;

/// `c · n^γ`
pub fn window_scaling<T: Real>(coefficient: T, gamma: T, n_valid: T) -> T {
    coefficient * n_valid.powf(gamma)
}

/// Unnormalised Zipf–Mandelbrot weight `1 / (d + δ)^λ`.
pub fn zipf_mandelbrot<T: Real>(d: T, delta: T, lambda: T) -> T {
    (d + delta).powf(-lambda)
}

/// Modified Cauchy decay `β / (β + t^α)`; exactly 1 at `t = 0`.
pub fn modified_cauchy<T: Real>(t: T, alpha: T, beta: T) -> T {
    if t == T::zero() {
        return T::one();
    }
    beta / (beta + t.powf(alpha))
}

/// Half-life `β^(1/α)` of the modified Cauchy decay.
pub fn half_life<T: Real>(alpha: T, beta: T) -> T {
    beta.powf(alpha.recip())
}

/// Probability a source with `d` packets in an `n_valid` window is also seen
/// by a second observer: `log2(d) / log2(√n_valid)`, capped at 1.
///
/// Requires `d ≥ 1` and `n_valid ≥ 4`; returns exactly 1 when `d² ≥ n_valid`.
pub fn visibility<T: Real>(d: u64, n_valid: u64) -> T {
    debug_assert!(d >= 1 && n_valid >= 4);
    if (d as u128) * (d as u128) >= n_valid as u128 {
        return T::one();
    }
    let num = T::from_count(d).log2();
    let den = T::from_count(n_valid).log2() * T::lit(0.5);
    (num / den).min(T::one())
}
