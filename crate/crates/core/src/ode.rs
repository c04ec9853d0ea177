//! Embedded Dormand-Prince 5(4) integrator with step-size control.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Initial step guess; 0 means automatic.
    pub h0: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-10,
            atol: 1e-14,
            max_steps: 2_000_000,
            h0: 0.0,
        }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions {
            rtol: tol,
            atol: tol * 1e-4,
            ..Default::default()
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// 5th minus 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates y' = f(t, y) and reports y at each of `times` (monotone,
/// starting at or after t0 in the direction of travel).
///
/// `inside` is checked after every accepted step; a false return stops
/// with a domain-escape error carrying the time.
pub fn solve_at<F, G>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    times: &[f64],
    opts: &OdeOptions,
    inside: G,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    G: Fn(&[f64]) -> bool,
{
    let n = y0.len();
    let mut out = Vec::with_capacity(times.len());
    let mut y = y0.to_vec();
    let mut t = t0;
    let dir = match times.last() {
        Some(&tl) if tl < t0 => -1.0,
        _ => 1.0,
    };
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    f(t, &y, &mut k1);
    let mut h = if opts.h0 > 0.0 {
        opts.h0
    } else {
        initial_step(&y, &k1, opts)
    };
    let mut steps = 0usize;
    for &target in times {
        if (target - t) * dir < -1e-14 * (1.0 + t.abs()) {
            return Err(Error::validation("times", "output times must be monotone"));
        }
        while (target - t) * dir > 0.0 {
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::numerical("ode", format!("step budget exhausted at t = {t}")));
            }
            let remaining = (target - t).abs();
            let mut last = false;
            if h >= remaining {
                h = remaining;
                last = true;
            }
            let hs = h * dir;
            for i in 0..n {
                ytmp[i] = y[i] + hs * A21 * k1[i];
            }
            f(t + C2 * hs, &ytmp, &mut k2);
            for i in 0..n {
                ytmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            f(t + C3 * hs, &ytmp, &mut k3);
            for i in 0..n {
                ytmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            f(t + C4 * hs, &ytmp, &mut k4);
            for i in 0..n {
                ytmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            f(t + C5 * hs, &ytmp, &mut k5);
            for i in 0..n {
                ytmp[i] = y[i]
                    + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            f(t + hs, &ytmp, &mut k6);
            for i in 0..n {
                ynew[i] = y[i]
                    + hs * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            f(t + hs, &ynew, &mut k7);
            let mut err = 0.0;
            for i in 0..n {
                let e = hs
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
                err += (e / sc) * (e / sc);
            }
            err = (err / n as f64).sqrt();
            if !err.is_finite() {
                h *= 0.1;
                if h < 1e-14 * (1.0 + t.abs()) {
                    return Err(Error::DomainEscape { time: t, point: y.clone() });
                }
                continue;
            }
            if err <= 1.0 {
                t = if last { target } else { t + hs };
                y.copy_from_slice(&ynew);
                std::mem::swap(&mut k1, &mut k7);
                if !inside(&y) {
                    return Err(Error::DomainEscape { time: t, point: y.clone() });
                }
                let fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
                let grown = h * fac.clamp(0.2, 5.0);
                // a clipped final step says nothing about the natural size
                if !last || grown > h {
                    h = grown;
                }
            } else {
                h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                if h < 1e-14 * (1.0 + t.abs()) {
                    return Err(Error::numerical("ode", format!("step size underflow at t = {t}")));
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn initial_step(y: &[f64], f0: &[f64], opts: &OdeOptions) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..y.len() {
        let sc = opts.atol + opts.rtol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (f0[i] / sc).powi(2);
    }
    let h = if d0 < 1e-10 || d1 < 1e-10 {
        1e-6
    } else {
        0.01 * (d0 / d1).sqrt()
    };
    h.min(0.1)
}

/// Integrate to a single end time.
pub fn solve<F>(f: F, t0: f64, y0: &[f64], t1: f64, opts: &OdeOptions) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    Ok(solve_at(f, t0, y0, &[t1], opts, |_| true)?.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let y = solve(|_, y, dy| dy[0] = -y[0], 0.0, &[1.0], 5.0, &OdeOptions::with_tol(1e-12)).unwrap();
        assert!((y[0] - (-5.0f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn harmonic_oscillator_backward() {
        let opts = OdeOptions::with_tol(1e-11);
        let out = solve_at(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &[0.0, 1.0],
            &[-1.0, -2.0],
            &opts,
            |_| true,
        )
        .unwrap();
        assert!((out[0][0] - (-1.0f64).sin()).abs() < 1e-10);
        assert!((out[1][1] - (-2.0f64).cos()).abs() < 1e-10);
    }

    #[test]
    fn escape_reports_time() {
        let r = solve_at(|_, y, dy| dy[0] = y[0], 0.0, &[1.0], &[3.0], &OdeOptions::default(), |y| {
            y[0] < 2.0
        });
        match r {
            Err(Error::DomainEscape { time, .. }) => assert!(time > 0.6 && time < 0.8, "{time}"),
            other => panic!("{other:?}"),
        }
    }
}
