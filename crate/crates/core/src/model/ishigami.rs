//! Ishigami function on the unit cube, mapped to `(−π, π)³`.

use std::f64::consts::PI;

pub const A: f64 = 7.0;
pub const B: f64 = 0.1;

pub fn ishigami(x: &[f64]) -> f64 {
    let u: Vec<f64> = x.iter().map(|&xi| PI * (2.0 * xi - 1.0)).collect();
    u[0].sin() + A * u[1].sin().powi(2) + B * u[2].powi(4) * u[0].sin()
}

/// Closed-form first-order and total indices `(S, T)` for inputs 1..3.
pub fn analytic_indices() -> ([f64; 3], [f64; 3]) {
    let pi4 = PI.powi(4);
    let pi8 = PI.powi(8);
    let v = A * A / 8.0 + B * pi4 / 5.0 + B * B * pi8 / 18.0 + 0.5;
    let v1 = 0.5 * (1.0 + B * pi4 / 5.0).powi(2);
    let v2 = A * A / 8.0;
    let v13 = 8.0 * B * B * pi8 / 225.0;
    (
        [v1 / v, v2 / v, 0.0],
        [(v1 + v13) / v, v2 / v, v13 / v],
    )
}
