//! Central finite differences, kept separate from the tape so it can serve
//! as an independent check on analytic gradients.

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

/// Largest element-wise relative error, skipping entries where both values
/// are below `floor` in magnitude.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> Option<Mismatch> {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .filter(|(_, (a, n))| a.abs() >= floor || n.abs() >= floor)
        .map(|(index, (&a, &n))| Mismatch {
            index,
            analytic: a,
            numeric: n,
            relative: (a - n).abs() / a.abs().max(n.abs()),
        })
        .max_by(|x, y| x.relative.total_cmp(&y.relative))
}
