//! Convex extensions of reciprocal terms outside their natural domain.
//!
//! The modeling callbacks contain `1/x` and `1/x^2` pieces that are convex
//! only for `x > 0`. The slack phase of the barrier solver may evaluate them
//! at arbitrary points, so below a floor each term continues as its
//! second-order Taylor polynomial at the floor: the result is C^2, convex on
//! the whole line, and identical to the original on the region any feasible
//! point can occupy.

/// `1/x` for `x >= floor`, quadratic extension below. Returns
/// `(value, first derivative, second derivative)`.
pub fn reciprocal(x: f64, floor: f64) -> (f64, f64, f64) {
    debug_assert!(floor > 0.0);
    if x >= floor {
        let inv = 1.0 / x;
        (inv, -inv * inv, 2.0 * inv * inv * inv)
    } else {
        let inv = 1.0 / floor;
        let d = x - floor;
        (
            inv - d * inv * inv + d * d * inv * inv * inv,
            -inv * inv + 2.0 * d * inv * inv * inv,
            2.0 * inv * inv * inv,
        )
    }
}

/// `1/x^2` for `x >= floor`, quadratic extension below.
pub fn reciprocal_sq(x: f64, floor: f64) -> (f64, f64, f64) {
    debug_assert!(floor > 0.0);
    if x >= floor {
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        (inv2, -2.0 * inv2 * inv, 6.0 * inv2 * inv2)
    } else {
        let inv = 1.0 / floor;
        let inv2 = inv * inv;
        let d = x - floor;
        (
            inv2 - 2.0 * d * inv2 * inv + 3.0 * d * d * inv2 * inv2,
            -2.0 * inv2 * inv + 6.0 * d * inv2 * inv2,
            6.0 * inv2 * inv2,
        )
    }
}
