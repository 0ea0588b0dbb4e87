//! Small dense-vector helpers shared across modules.
//!
//! Storage is `f32`; every reduction accumulates in `f64`.

/// Inner product with double-precision accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Squared Euclidean distance with double-precision accumulation.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[inline]
pub fn l2_norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// True when every entry is finite and the norm is strictly positive.
pub fn is_valid_embedding(a: &[f32]) -> bool {
    a.iter().all(|x| x.is_finite()) && l2_norm(a) > 0.0
}

/// Scales `a` to unit L2 norm in place. Returns `false` (leaving `a`
/// untouched) when the norm is zero or not finite.
pub fn normalize(a: &mut [f32]) -> bool {
    let norm = l2_norm(a);
    if !(norm.is_finite() && norm > 0.0) {
        return false;
    }
    for x in a.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}
