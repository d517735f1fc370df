/// `|a − b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Central difference `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for coordinate `i`.
pub fn central_difference<F>(f: &F, point: &[f64], i: usize, h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    x[i] = point[i] + h;
    let plus = f(&x);
    x[i] = point[i] - h;
    let minus = f(&x);
    (plus - minus) / (2.0 * h)
}

/// Maximum relative error between an analytic gradient and central
/// differences over all coordinates of `point`.
///
/// `value` evaluates the scalar function; `gradient` returns its analytic
/// gradient at a point.
pub fn grad_check<F, G>(value: F, gradient: G, point: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = gradient(point);
    assert_eq!(analytic.len(), point.len());
    (0..point.len())
        .map(|i| relative_error(analytic[i], central_difference(&value, point, i, h)))
        .fold(0.0, f64::max)
}
