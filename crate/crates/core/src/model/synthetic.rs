//! Synthetic test model with tunable discontinuities.
//!
//! ```text
//! z_j   = Σ_i 1[j ∈ L_i] · 1[x_i ≥ ξ_i] · ζ_i (x_i − ξ_i)^δ_i
//! dy/dt = (κ y) ∘ z ∘ (1 − (σ y) ∘ z)
//! ```
//!
//! integrated from `y(0) = y0` with fixed-step RK4. `δ_i = 0` is a pure
//! step (`0⁰ = 1`).

use serde::{Deserialize, Serialize};

use crate::error::SensaError;
use crate::Result;

pub const DEFAULT_STEP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelParams {
    pub m: usize,
    pub n: usize,
    pub t_final: f64,
    /// 0-based output indices each input feeds into.
    pub mixing: Vec<Vec<usize>>,
    pub degrees: Vec<u32>,
    pub locations: Vec<f64>,
    pub scales: Vec<f64>,
    pub y0: Vec<f64>,
    /// Row-major `n × n`.
    pub kappa: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl SyntheticModelParams {
    /// The three-input, three-output instance with discontinuities of
    /// order 0, 1 and 2 at `x ≈ 0.5933, 0.9485, 0.1030`.
    pub fn reference() -> Self {
        Self {
            m: 3,
            n: 3,
            t_final: 10.0,
            mixing: vec![vec![1, 2], vec![0, 1], vec![0, 1, 2]],
            degrees: vec![0, 1, 2],
            locations: vec![0.5933, 0.9485, 0.1030],
            scales: vec![0.8788, 0.2668, 0.6661],
            y0: vec![-0.1900, 0.5145, 0.4094],
            kappa: vec![
                vec![0.7054, 0.2921, 0.7361],
                vec![-0.1151, 0.5206, -0.0707],
                vec![0.3475, -0.0579, -0.2229],
            ],
            sigma: vec![
                vec![0.0294, 0.1668, 0.5788],
                vec![0.1046, 0.1705, 0.2749],
                vec![-0.1258, -0.0712, 0.7372],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m_ok = [
            self.mixing.len(),
            self.degrees.len(),
            self.locations.len(),
            self.scales.len(),
        ]
        .iter()
        .all(|&l| l == self.m);
        let n_ok = self.y0.len() == self.n
            && self.kappa.len() == self.n
            && self.sigma.len() == self.n
            && self.kappa.iter().chain(&self.sigma).all(|r| r.len() == self.n);
        let idx_ok = self.mixing.iter().flatten().all(|&j| j < self.n);
        if m_ok && n_ok && idx_ok {
            Ok(())
        } else {
            Err(SensaError::Config("inconsistent synthetic model parameters".into()))
        }
    }

    pub fn z(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.n];
        for i in 0..self.m {
            if x[i] >= self.locations[i] {
                let term = self.scales[i] * (x[i] - self.locations[i]).powi(self.degrees[i] as i32);
                for &j in &self.mixing[i] {
                    z[j] += term;
                }
            }
        }
        z
    }

    fn rhs(&self, y: &[f64], z: &[f64], out: &mut [f64]) {
        for j in 0..self.n {
            let ky: f64 = self.kappa[j].iter().zip(y).map(|(k, y)| k * y).sum();
            let sy: f64 = self.sigma[j].iter().zip(y).map(|(s, y)| s * y).sum();
            out[j] = ky * z[j] * (1.0 - sy * z[j]);
        }
    }

    fn rk4_step(&self, y: &mut [f64], z: &[f64], h: f64, stages: &mut [Vec<f64>; 5]) {
        let n = self.n;
        let [k1, k2, k3, k4, tmp] = stages;
        self.rhs(y, z, k1);
        for j in 0..n {
            tmp[j] = y[j] + 0.5 * h * k1[j];
        }
        self.rhs(tmp, z, k2);
        for j in 0..n {
            tmp[j] = y[j] + 0.5 * h * k2[j];
        }
        self.rhs(tmp, z, k3);
        for j in 0..n {
            tmp[j] = y[j] + h * k3[j];
        }
        self.rhs(tmp, z, k4);
        for j in 0..n {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }

    /// `y` at each of the ascending `times` (starting from 0), using RK4 with
    /// step `h`; a final shorter step lands exactly on each requested time.
    pub fn eval_with_step(&self, x: &[f64], times: &[f64], h: f64) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.m {
            return Err(SensaError::MalformedPoint {
                expected: self.m,
                actual: x.len(),
            });
        }
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0))
            || times.windows(2).any(|w| w[0] > w[1])
        {
            return Err(SensaError::Validation(
                "times must be nonnegative and ascending".into(),
            ));
        }
        let z = self.z(x);
        let mut y = self.y0.clone();
        let mut stages: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; self.n]);
        let mut steps_taken = 0u64;
        let mut t = 0.0;
        let mut out = Vec::with_capacity(times.len());
        for &target in times {
            // Step counts are derived from the grid, not accumulated, so
            // t stays on multiples of h.
            let full_steps = ((target / h) * (1.0 + 1e-12)).floor() as u64;
            while steps_taken < full_steps {
                self.rk4_step(&mut y, &z, h, &mut stages);
                steps_taken += 1;
                t = steps_taken as f64 * h;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(SensaError::Divergence { time: t });
                }
            }
            let rest = target - t;
            let mut y_out = y.clone();
            if rest > 1e-12 * h.max(target) {
                self.rk4_step(&mut y_out, &z, rest, &mut stages);
            }
            if y_out.iter().any(|v| !v.is_finite()) {
                return Err(SensaError::Divergence { time: target });
            }
            out.push(y_out);
        }
        Ok(out)
    }

    pub fn eval(&self, x: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.eval_with_step(x, times, DEFAULT_STEP)
    }

    /// Output at `t_final`.
    pub fn eval_final(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(x, &[self.t_final])?.pop().expect("one time requested"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn z_at_reference_point() {
        let p = SyntheticModelParams::reference();
        let z = p.z(&[0.1, 0.2, 0.3]);
        let expected = 0.6661 * (0.3f64 - 0.1030).powi(2);
        for zj in z {
            assert_eq!(zj, expected);
        }
        assert_abs_diff_eq!(expected, 0.02585, epsilon = 1e-5);
    }

    #[test]
    fn z_below_all_locations_is_zero() {
        let p = SyntheticModelParams::reference();
        assert_eq!(p.z(&[0.5, 0.9, 0.1]), vec![0.0; 3]);
    }

    #[test]
    fn z_at_upper_corner() {
        let p = SyntheticModelParams::reference();
        let t1 = 0.8788;
        let t2 = 0.2668 * (1.0 - 0.9485);
        let t3 = 0.6661 * (1.0f64 - 0.1030).powi(2);
        let z = p.z(&[1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(z[0], t2 + t3, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], t1 + t2 + t3, epsilon = 1e-15);
        assert_abs_diff_eq!(z[2], t1 + t3, epsilon = 1e-15);
    }

    #[test]
    fn reproduces_printed_trajectory() {
        let p = SyntheticModelParams::reference();
        let ys = p.eval(&[0.1, 0.2, 0.3], &[0.0, 5.0, 10.0]).unwrap();
        let printed = [
            [-0.1900320, 0.5144967, 0.4093612],
            [-0.1478757, 0.5489932, 0.3864914],
            [-0.1024813, 0.5854096, 0.3659173],
        ];
        for (y, row) in ys.iter().zip(&printed) {
            for (a, b) in y.iter().zip(row) {
                assert_abs_diff_eq!(a, b, epsilon = 5e-3);
            }
        }
        for (a, b) in ys[0].iter().zip(&printed[0]) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn step_halving_converges() {
        let p = SyntheticModelParams::reference();
        for x in [[0.1, 0.2, 0.3], [0.9, 0.99, 0.8], [0.6, 0.5, 0.95]] {
            let a = p.eval_with_step(&x, &[10.0], DEFAULT_STEP).unwrap();
            let b = p.eval_with_step(&x, &[10.0], DEFAULT_STEP / 2.0).unwrap();
            for (u, v) in a[0].iter().zip(&b[0]) {
                assert!((u - v).abs() < 1e-8, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn off_grid_times() {
        let p = SyntheticModelParams::reference();
        let x = [0.7, 0.96, 0.5];
        let a = p.eval(&x, &[2.345]).unwrap();
        let b = p.eval_with_step(&x, &[2.345], 0.001).unwrap();
        for (u, v) in a[0].iter().zip(&b[0]) {
            assert!((u - v).abs() < 1e-8);
        }
        assert!(p.eval(&x, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = SyntheticModelParams::reference();
        p.kappa = vec![vec![50.0; 3]; 3];
        p.sigma = vec![vec![-50.0; 3]; 3];
        p.y0 = vec![10.0; 3];
        let err = p.eval(&[1.0, 1.0, 1.0], &[10.0]).unwrap_err();
        assert!(matches!(err, SensaError::Divergence { .. }));
    }

    // Central differences of z straddling each location: jump for δ=0,
    // slope break for δ=1, continuous slope for δ=2.
    #[test]
    fn discontinuity_orders() {
        let p = SyntheticModelParams::reference();
        let h = 1e-6;
        let z_at = |i: usize, xi: f64| {
            let mut x = vec![0.0; 3];
            x[i] = xi;
            p.z(&x)
        };
        let j_for = [1usize, 0, 0];
        for i in 0..3 {
            let c = p.locations[i];
            let j = j_for[i];
            let left = z_at(i, c - h)[j];
            let right = z_at(i, c + h)[j];
            let slope_left = (z_at(i, c - h)[j] - z_at(i, c - 2.0 * h)[j]) / h;
            let slope_right = (z_at(i, c + 2.0 * h)[j] - z_at(i, c + h)[j]) / h;
            assert_eq!(slope_left, 0.0);
            match p.degrees[i] {
                0 => assert!((right - left) > 0.5),
                1 => {
                    assert!((right - left).abs() < 1e-5);
                    assert!((slope_right - p.scales[i]).abs() < 1e-6);
                }
                2 => {
                    assert!((right - left).abs() < 1e-10);
                    assert!(slope_right.abs() < 1e-4);
                }
                _ => unreachable!(),
            }
        }
    }
}
