//! Small shared helpers for flat `f64` vectors.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector is all-zero.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Scales `a` to unit norm in place; leaves an all-zero vector untouched.
pub(crate) fn l2_normalize(a: &mut [f64]) {
    let n = l2_norm(a);
    if n > 0.0 {
        for v in a {
            *v /= n;
        }
    }
}

pub(crate) fn mean_vector(rows: &[&[f64]]) -> Vec<f64> {
    assert!(!rows.is_empty());
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for row in rows {
        for (o, v) in out.iter_mut().zip(*row) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}
