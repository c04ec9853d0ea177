//! Complex Gamma function.

use num_complex::Complex64;
use std::f64::consts::PI;

const G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Gamma(z) via Lanczos (g = 7), reflected for Re z < 1/2.
///
/// Returns an infinite value at the poles; callers that care should test
/// with [`nonpositive_integer_distance`] first.
pub fn gamma(z: Complex64) -> Complex64 {
    if z.re < 0.5 {
        let s = (z * PI).sin();
        if s.norm() == 0.0 {
            return Complex64::new(f64::INFINITY, 0.0);
        }
        return Complex64::new(PI, 0.0) / (s * gamma(Complex64::new(1.0, 0.0) - z));
    }
    let z = z - 1.0;
    let mut x = Complex64::new(LANCZOS[0], 0.0);
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        x += *c / (z + i as f64);
    }
    let t = z + G + 0.5;
    (2.0 * PI).sqrt() * t.powc(z + 0.5) * (-t).exp() * x
}

/// Distance from z to the nearest pole of Gamma, with that pole's index n
/// (the pole at -n).
pub fn nonpositive_integer_distance(z: Complex64) -> (f64, usize) {
    let n = if z.re >= 0.0 { 0.0 } else { (-z.re).round() };
    let d = (z + n).norm();
    (d, n as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn integer_and_half_values() {
        assert!((gamma(c(5.0, 0.0)).re - 24.0).abs() < 1e-11);
        assert!((gamma(c(0.5, 0.0)).re - PI.sqrt()).abs() < 1e-13);
        assert!((gamma(c(-0.5, 0.0)).re + 2.0 * PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn recurrence_holds_off_axis() {
        for &(a, b) in &[(0.3, 1.7), (-2.4, 0.6), (3.1, -4.2), (0.5, 5.0)] {
            let z = c(a, b);
            let lhs = gamma(z + 1.0);
            let rhs = z * gamma(z);
            assert!((lhs - rhs).norm() <= 1e-12 * lhs.norm(), "{z}");
        }
    }

    #[test]
    fn pole_distance() {
        assert_eq!(nonpositive_integer_distance(c(-2.0, 0.0)), (0.0, 2));
        let (d, n) = nonpositive_integer_distance(c(0.3, 0.4));
        assert_eq!(n, 0);
        assert!((d - 0.5).abs() < 1e-15);
    }
}
