//! Exp-concavity of the conditional square risk `L(y) = (y - mu)² + sigma2`.

/// `phi''(y)` for `phi(y) = exp(-eta L(y))`:
/// `-2 eta phi(y) (1 - 2 eta (y - mu)²)`.
pub fn phi_second_derivative(y: f64, mu: f64, sigma2: f64, eta: f64) -> f64 {
    let dev2 = (y - mu).powi(2);
    let phi = (-eta * (dev2 + sigma2)).exp();
    -2.0 * eta * phi * (1.0 - 2.0 * eta * dev2)
}

/// Largest `phi''` over the grid. A non-positive result certifies that
/// `exp(-eta L)` is concave on the grid.
pub fn exp_concavity_probe(y_grid: &[f64], mu: f64, sigma2: f64, eta: f64) -> f64 {
    y_grid
        .iter()
        .map(|&y| phi_second_derivative(y, mu, sigma2, eta))
        .fold(f64::NEG_INFINITY, f64::max)
}
