//! Ground truth for d = 1: direct integration of the Weber equation
//! -h^2 u'' - lambda^2 x^2 u / 4 = z u, and complex-scaled resonances.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microlocal::{fbi, frequency_mass, GridFunction, PhaseSpaceGrid, PhaseSpaceRegion};
use crate::model::{distance_to_lattice, gamma0_lattice, make_barrier_model, spectral_params};
use crate::ode::{solve_at, OdeOptions};
use crate::phase::{ScenarioConfig, TransitionScenario};
use crate::poly::Poly;
use crate::transition::{apply_j, apply_j_prepared, incoming_data, outgoing_data, CauchyData, IncomingData, OutgoingData};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Solutions of the Weber equation with the large-|x| form
/// (epsilon/|x|)^{1/2 - i sigma zeta} e^{i sigma a (x^2 - epsilon^2)/2h} (1 + O(x^-2)),
/// a = lambda/2, zeta = z/(lambda h); sigma = -1 is incoming on x > 0,
/// sigma = +1 outgoing on either side.
#[derive(Debug, Clone, Copy)]
struct WeberBasis {
    epsilon: f64,
    theta: Complex64,
    beta: Complex64,
}

impl WeberBasis {
    fn new(lambda: f64, z: Complex64, h: f64, epsilon: f64, sigma: f64) -> Self {
        let a = 0.5 * lambda;
        let zeta = z / (lambda * h);
        WeberBasis {
            epsilon,
            theta: I * sigma * a / h,
            beta: Complex64::new(-0.5, 0.0) + I * sigma * zeta,
        }
    }

    /// Asymptotic series f(r) = sum c_m r^{-2m} and f'(r), summed until the
    /// terms stop shrinking.
    fn series(&self, r: f64) -> (Complex64, Complex64) {
        let b = self.beta;
        let mut cm = Complex64::new(1.0, 0.0);
        let mut f = cm;
        let mut df = Complex64::new(0.0, 0.0);
        let mut last = f64::INFINITY;
        for m in 1..60 {
            let mf = m as f64;
            cm *= (b * b - b - 4.0 * (mf - 1.0) * b + (2.0 * mf - 2.0) * (2.0 * mf - 1.0)) / (4.0 * mf * self.theta);
            let term = cm * r.powi(-2 * m as i32);
            if term.norm() >= last || term.norm() < 1e-18 {
                break;
            }
            last = term.norm();
            f += term;
            df += -2.0 * mf * term / r;
        }
        (f, df)
    }

    /// Value and d/dr at r > 0.
    fn eval(&self, r: f64) -> (Complex64, Complex64) {
        let e = self.epsilon;
        let lead = ((self.beta * (r / e).ln()) + self.theta * (r * r - e * e) / 2.0).exp();
        let (f, df) = self.series(r);
        let v = lead * f;
        (v, lead * (f * (self.theta * r + self.beta / r) + df))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionResult {
    /// Normalized to 1.
    pub incoming_amplitude: Complex64,
    /// (reflected on x > 0, transmitted on x < 0).
    pub outgoing_amplitudes: (Complex64, Complex64),
    pub matching_radius: f64,
    pub estimated_error: f64,
    pub matching_residual: f64,
}

impl ConnectionResult {
    pub fn transmission(&self) -> Complex64 {
        self.outgoing_amplitudes.1 / self.incoming_amplitude
    }

    pub fn reflection(&self) -> Complex64 {
        self.outgoing_amplitudes.0 / self.incoming_amplitude
    }

    /// |R|^2 + |T|^2 - 1.
    pub fn unitarity_defect(&self) -> f64 {
        self.reflection().norm_sqr() + self.transmission().norm_sqr() - 1.0
    }
}

struct Integrated {
    incoming: Complex64,
    reflected: Complex64,
    residual: f64,
    values: Vec<Complex64>,
}

/// Integrates from -x0 (pure transmitted wave, coefficient 1) to 1.1 x0 and
/// splits the result into incoming and reflected waves at x0, 1.05 x0,
/// 1.1 x0. `probes` (increasing, inside (-x0, x0)) get raw values.
fn integrate(lambda: f64, z: Complex64, h: f64, epsilon: f64, x0: f64, tol: f64, probes: &[f64]) -> Result<Integrated> {
    let out = WeberBasis::new(lambda, z, h, epsilon, 1.0);
    let inc = WeberBasis::new(lambda, z, h, epsilon, -1.0);
    let (u0, du0) = out.eval(x0);
    // u(x) = B(|x|) on x < 0, so du/dx = -B'
    let y0 = [u0.re, u0.im, -du0.re, -du0.im];
    let a2 = 0.25 * lambda * lambda;
    let h2 = h * h;
    let rhs = |x: f64, y: &[f64], dy: &mut [f64]| {
        let u = Complex64::new(y[0], y[1]);
        let q = -(a2 * x * x + z) / h2;
        let d2 = q * u;
        dy[0] = y[2];
        dy[1] = y[3];
        dy[2] = d2.re;
        dy[3] = d2.im;
    };
    let marks = [x0, 1.05 * x0, 1.1 * x0];
    let mut times: Vec<f64> = probes.to_vec();
    times.extend(marks);
    if times.windows(2).any(|w| w[1] <= w[0]) || times[0] <= -x0 {
        return Err(Error::validation("probes", "must increase inside (-X0, X0)"));
    }
    let opts = OdeOptions {
        rtol: tol,
        atol: tol * 1e-3 * u0.norm(),
        max_steps: 5_000_000,
        ..Default::default()
    };
    let sol = solve_at(rhs, -x0, &y0, &times, &opts, |y| y.iter().all(|v| v.is_finite()))?;
    let np = probes.len();
    let values: Vec<Complex64> = sol[..np].iter().map(|s| Complex64::new(s[0], s[1])).collect();
    // rows (u, u' h/(a r)) at each matching radius
    let mut m = DMatrix::<Complex64>::zeros(6, 2);
    let mut b = DVector::<Complex64>::zeros(6);
    for (k, (&r, s)) in marks.iter().zip(&sol[np..]).enumerate() {
        let w = h / (0.5 * lambda * r);
        let (vi, di) = inc.eval(r);
        let (vo, dout) = out.eval(r);
        m[(2 * k, 0)] = vi;
        m[(2 * k, 1)] = vo;
        m[(2 * k + 1, 0)] = di * w;
        m[(2 * k + 1, 1)] = dout * w;
        b[2 * k] = Complex64::new(s[0], s[1]);
        b[2 * k + 1] = Complex64::new(s[2], s[3]) * w;
    }
    let svd = m.clone().svd(true, true);
    let x = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::numerical("weber_connection", e.to_string()))?;
    let residual = (&m * &x - &b).norm() / b.norm();
    Ok(Integrated {
        incoming: x[0],
        reflected: x[1],
        residual,
        values,
    })
}

fn check_inputs(lambda: f64, h: f64, epsilon: f64, x0: f64, tol: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::validation("lambda", "must be positive"));
    }
    if !(h > 0.0) {
        return Err(Error::validation("h", "must be positive"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::validation("epsilon", "must be positive"));
    }
    if !(x0 >= 5.0 * h.sqrt().max(epsilon)) {
        return Err(Error::validation("X0", "need X0 >= 5 max(sqrt(h), epsilon)"));
    }
    if !(tol >= 1e-12) {
        return Err(Error::validation("tol", "must be at least 1e-12"));
    }
    Ok(())
}

fn connection_once(lambda: f64, z: Complex64, h: f64, epsilon: f64, x0: f64, tol: f64) -> Result<(ConnectionResult, Integrated)> {
    let it = integrate(lambda, z, h, epsilon, x0, tol, &[])?;
    if it.residual > 1e-6 {
        return Err(Error::with_residual("weber_connection", "insufficient X0/tol", it.residual));
    }
    let r = ConnectionResult {
        incoming_amplitude: Complex64::new(1.0, 0.0),
        outgoing_amplitudes: (it.reflected / it.incoming, 1.0 / it.incoming),
        matching_radius: x0,
        estimated_error: 0.0,
        matching_residual: it.residual,
    };
    Ok((r, it))
}

/// Connection coefficients of the solution that is purely outgoing on
/// x < 0, normalized to unit incoming amplitude; the error estimate
/// compares against a run with 2 X0 and tol / 2.
pub fn weber_connection(lambda: f64, z: Complex64, h: f64, epsilon: f64, x0: f64, tol: f64) -> Result<ConnectionResult> {
    check_inputs(lambda, h, epsilon, x0, tol)?;
    let (mut r, _) = connection_once(lambda, z, h, epsilon, x0, tol)?;
    let (r2, _) = connection_once(lambda, z, h, epsilon, 2.0 * x0, 0.5 * tol)?;
    let dt = (r.transmission() - r2.transmission()).norm() / r2.transmission().norm();
    let dr = (r.reflection() - r2.reflection()).norm() / r2.reflection().norm().max(1e-300);
    r.estimated_error = dt.max(dr.min(1.0)).max(r.matching_residual);
    Ok(r)
}

/// Values of the same solution (unit incoming amplitude) at increasing
/// points inside (-X0, X0).
pub fn weber_values(
    lambda: f64,
    z: Complex64,
    h: f64,
    epsilon: f64,
    x0: f64,
    tol: f64,
    xs: &[f64],
) -> Result<Vec<Complex64>> {
    check_inputs(lambda, h, epsilon, x0, tol)?;
    let it = integrate(lambda, z, h, epsilon, x0, tol, xs)?;
    if it.residual > 1e-6 {
        return Err(Error::with_residual("weber_connection", "insufficient X0/tol", it.residual));
    }
    Ok(it.values.iter().map(|v| v / it.incoming).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub lambda: f64,
    pub epsilon: f64,
    /// Evaluation point on the transmitted side (x < 0).
    pub x_target: f64,
    /// Spectral points as multiples of h.
    pub z_over_h: Vec<Complex64>,
    pub h_list: Vec<f64>,
    pub c0: f64,
    pub c1: f64,
    pub nu: f64,
    pub tol: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            lambda: 1.0,
            epsilon: 0.1,
            x_target: -2.0,
            z_over_h: vec![Complex64::new(0.0, 0.0)],
            h_list: vec![0.2, 0.1, 0.05],
            c0: 1.0,
            c1: 2.0,
            nu: 0.1,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub z: Complex64,
    pub h: f64,
    /// |u(x_T)| (|x_T|/epsilon)^{1/2} for the true solution.
    pub t_oracle: f64,
    /// The same for J u_0 with u_0 = 1.
    pub t_j: f64,
    pub rel_err_modulus: f64,
    /// arg(J u_0 / u) at x_T minus the scenario's mean, wrapped.
    pub phase_err: f64,
    /// d(z, Gamma_0(h)) <= nu h.
    pub excluded: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Log-log slope of rel_err_modulus against h, per z/h.
    pub slopes: Vec<(Complex64, f64)>,
    pub phase_constant: f64,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let f = crate::io::fmt_num;
        let mut s = String::from("z_re,z_im,h,T_oracle,T_J,rel_err_modulus,phase_err,excluded\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                f(r.z.re),
                f(r.z.im),
                f(r.h),
                f(r.t_oracle),
                f(r.t_j),
                f(r.rel_err_modulus),
                f(r.phase_err),
                r.excluded
            ));
        }
        s
    }
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

struct Point {
    z: Complex64,
    h: f64,
    excluded: bool,
    outcome: Result<(Complex64, Complex64)>,
}

/// J u_0 against the Weber solution at x_T on the exact barrier
/// -h^2 d^2 - lambda^2 x^2/4, u_0 = 1 being the incoming Cauchy value.
pub fn compare_transition(cfg: &CompareConfig) -> Result<CompareReport> {
    if !(cfg.x_target < 0.0) {
        return Err(Error::validation("x_target", "must be on the transmitted side x < 0"));
    }
    if cfg.z_over_h.is_empty() || cfg.h_list.is_empty() {
        return Err(Error::validation("sweep", "z and h lists must be nonempty"));
    }
    let lam = cfg.lambda;
    let reach = 1.25 * cfg.x_target.abs();
    let model = make_barrier_model(&[lam], &Poly::zero(1))?.with_validity_radius(reach / 0.9);
    let scfg = ScenarioConfig {
        chart_radius: Some(reach),
        ..ScenarioConfig::with_epsilon(cfg.epsilon)
    };
    let jobs: Vec<(Complex64, f64)> = cfg
        .h_list
        .iter()
        .flat_map(|&h| cfg.z_over_h.iter().map(move |&w| (w * h, h)))
        .collect();
    let points: Vec<Point> = jobs
        .par_iter()
        .map(|&(z, h)| -> Result<Point> {
            let sp = spectral_params(z, h, cfg.c0, cfg.c1, cfg.nu, &[lam])?;
            let lattice = gamma0_lattice(&[lam], h, z.norm() + 2.0 * lam * h)?;
            let excluded = distance_to_lattice(z, &lattice)? <= cfg.nu * h;
            let outcome = (|| {
                let sc = TransitionScenario::new(&model, &scfg, sp)?;
                let j = apply_j(&sc, &CauchyData::point(Complex64::new(1.0, 0.0)), &[vec![cfg.x_target]])?[0];
                let x0 = (5.0 * h.sqrt().max(cfg.epsilon)).max(cfg.x_target.abs() + 1.0);
                let u = weber_values(lam, z, h, cfg.epsilon, x0, cfg.tol, &[cfg.x_target])?[0];
                Ok((j, u))
            })();
            Ok(Point { z, h, excluded, outcome })
        })
        .collect::<Result<_>>()?;
    let scale = (cfg.x_target.abs() / cfg.epsilon).sqrt();
    let ratios: Vec<f64> = points
        .iter()
        .filter_map(|p| p.outcome.as_ref().ok().map(|(j, u)| (j / u).arg()))
        .collect();
    let phase_constant = if ratios.is_empty() {
        0.0
    } else {
        let s: Complex64 = ratios.iter().map(|a| Complex64::from_polar(1.0, *a)).sum();
        s.arg()
    };
    let rows: Vec<CompareRow> = points
        .into_iter()
        .map(|p| match p.outcome {
            Ok((j, u)) => CompareRow {
                z: p.z,
                h: p.h,
                t_oracle: u.norm() * scale,
                t_j: j.norm() * scale,
                rel_err_modulus: (j.norm() - u.norm()).abs() / u.norm(),
                phase_err: wrap((j / u).arg() - phase_constant),
                excluded: p.excluded,
                error: None,
            },
            Err(e) => CompareRow {
                z: p.z,
                h: p.h,
                t_oracle: f64::NAN,
                t_j: f64::NAN,
                rel_err_modulus: f64::NAN,
                phase_err: f64::NAN,
                excluded: p.excluded,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let slopes = cfg
        .z_over_h
        .iter()
        .map(|&w| {
            let (hs, es): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| (r.z - w * r.h).norm() < 1e-14 && r.error.is_none())
                .map(|r| (r.h, r.rel_err_modulus))
                .unzip();
            (w, loglog_slope(&hs, &es))
        })
        .collect();
    Ok(CompareReport {
        rows,
        slopes,
        phase_constant,
    })
}

/// Number of eigenvalues of the real symmetric tridiagonal (d, e) below x.
fn sturm_count(d: &[f64], e: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..d.len() {
        let off = if i == 0 { 0.0 } else { e[i - 1] * e[i - 1] };
        q = d[i] - x - if i == 0 { 0.0 } else { off / q };
        if q == 0.0 {
            q = 1e-300;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

fn lowest_eigenvalues(d: &[f64], e: &[f64], count: usize) -> Vec<f64> {
    let lo0 = d.iter().cloned().fold(f64::INFINITY, f64::min) - 2.0 * e.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let hi0 = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 2.0 * e.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (0..count)
        .map(|k| {
            let (mut lo, mut hi) = (lo0, hi0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if sturm_count(d, e, mid) > k {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= 1e-15 * hi.abs().max(1e-300) {
                    break;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

/// Eigenvalues of the complex-scaled operator -h^2 d^2 - lambda^2 x^2 / 4
/// (x = e^{i pi/4} y) by centered differences on n interior nodes.
fn scaled_eigenvalues(lambda: f64, h: f64, count: usize, n: usize, half_width: f64) -> Result<Vec<Complex64>> {
    let rot = Complex64::from_polar(1.0, PI / 4.0);
    let dy = 2.0 * half_width / (n + 1) as f64;
    let kin = h * h / (rot * rot);
    let diag: Vec<Complex64> = (1..=n)
        .map(|i| {
            let y = -half_width + i as f64 * dy;
            let x = rot * y;
            kin * (2.0 / (dy * dy)) - 0.25 * lambda * lambda * x * x
        })
        .collect();
    let off = kin * (-1.0 / (dy * dy));
    // the scaled matrix is c times a real symmetric one; find c and check
    let c = diag[n / 2] / diag[n / 2].norm();
    let er = off / c;
    if er.im.abs() > 1e-12 * er.norm() {
        return Err(Error::numerical("scaled_resonances", "scaled operator is not a rotated real symmetric matrix"));
    }
    let dr: Vec<f64> = diag.iter().map(|v| v / c).map(|v| {
        if v.im.abs() > 1e-12 * v.norm().max(1.0) {
            f64::NAN
        } else {
            v.re
        }
    }).collect();
    if dr.iter().any(|v| v.is_nan()) {
        return Err(Error::numerical("scaled_resonances", "scaled operator is not a rotated real symmetric matrix"));
    }
    let e = vec![er.re; n - 1];
    // c is -i here, so ascending real eigenvalues give resonances by depth
    Ok(lowest_eigenvalues(&dr, &e, count).into_iter().map(|v| c * v).collect())
}

/// The lowest `count` resonances of the 1-D barrier, from complex scaling
/// by pi/4; grid doubling must move them by at most 1e-4 relative, and the
/// returned values are Richardson-extrapolated from the two grids.
pub fn scaled_resonances(lambda: f64, h: f64, count: usize, grid_size: usize) -> Result<Vec<Complex64>> {
    if !(lambda > 0.0) {
        return Err(Error::validation("lambda", "must be positive"));
    }
    if !(h > 0.0) {
        return Err(Error::validation("h", "must be positive"));
    }
    if grid_size < 1000 {
        return Err(Error::validation("grid_size", "must be at least 1000"));
    }
    if count == 0 || count > 10 {
        return Err(Error::validation("count", "must be in 1..=10"));
    }
    // eigenfunctions decay like e^{-lambda y^2/4h}
    let half_width = (4.0 * h * (40.0 + 4.0 * count as f64) / lambda).sqrt();
    let coarse = scaled_eigenvalues(lambda, h, count, grid_size, half_width)?;
    let fine = scaled_eigenvalues(lambda, h, count, 2 * grid_size + 1, half_width)?;
    for (a, b) in coarse.iter().zip(&fine) {
        let moved = (a - b).norm() / b.norm();
        if moved > 1e-4 {
            return Err(Error::with_residual("scaled_resonances", "discretization not converged", moved));
        }
    }
    // second-order scheme, spacing halved exactly with 2n + 1 nodes
    Ok(coarse.iter().zip(&fine).map(|(a, b)| (4.0 * b - a) / 3.0).collect())
}

/// Outer edge of the assembled solution's support.
const ASSEMBLY_REACH: f64 = 1.6;

/// Geometry of the 1-D assembly, shared by every h and z.
pub struct Assembly1d {
    pub scenario: TransitionScenario,
    pub axis: Vec<f64>,
    live: Vec<usize>,
    incoming: Vec<IncomingData>,
    outgoing: Vec<OutgoingData>,
}

fn assembly_cut(x: f64, epsilon: f64) -> f64 {
    (1.0 - (-(x / epsilon).powi(4)).exp()) * (-x.powi(12)).exp()
}

impl Assembly1d {
    /// Precomputes the transition geometry at every node of `axis`.
    pub fn new(lambda: f64, epsilon: f64, axis: Vec<f64>) -> Result<Self> {
        if axis.iter().any(|x| x.abs() > ASSEMBLY_REACH) {
            return Err(Error::validation("axis", format!("must lie in [-{ASSEMBLY_REACH}, {ASSEMBLY_REACH}]")));
        }
        let reach = ASSEMBLY_REACH + 0.1;
        let model = make_barrier_model(&[lambda], &Poly::zero(1))?.with_validity_radius(reach / 0.9);
        let scfg = ScenarioConfig {
            chart_radius: Some(reach),
            ..ScenarioConfig::with_epsilon(epsilon)
        };
        // geometry does not see the spectral parameter
        let sp = spectral_params(Complex64::new(0.0, 0.0), 1.0, 1.0, 2.0, 0.1, &[lambda])?;
        let scenario = TransitionScenario::new(&model, &scfg, sp)?;
        let live: Vec<usize> = (0..axis.len()).filter(|&i| assembly_cut(axis[i], epsilon) > 1e-17).collect();
        let incoming = vec![incoming_data(&scenario, &[])?];
        let outgoing = live
            .par_iter()
            .map(|&i| outgoing_data(&scenario, &[axis[i]]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Assembly1d {
            scenario,
            axis,
            live,
            incoming,
            outgoing,
        })
    }

    /// Incoming WKB wave (epsilon/x)^{1/2 + i z/(lambda h)} e^{i phi_-(x)/h}
    /// on x > 0 plus J(z) applied to its Cauchy value at x = epsilon. Both
    /// pieces blow up at x = 0 and J is only claimed away from it, so the
    /// sum is multiplied by 1 - e^{-(x/epsilon)^4}; an outer factor e^{-x^12}
    /// keeps the support inside the charts.
    pub fn solution(&self, z: Complex64, h: f64) -> Result<GridFunction> {
        let model = &self.scenario.model;
        let lambda = model.lambda1();
        let eps = self.scenario.epsilon;
        let sp = spectral_params(z, h, 1.0, 2.0, 0.1, &[lambda])?;
        let sc = self.scenario.with_spectral(sp);
        let u0 = CauchyData::point(Complex64::from_polar(1.0, self.incoming[0].phi_minus / h));
        let out = apply_j_prepared(&sc, &u0, &self.incoming, &self.outgoing)?;
        let expo = Complex64::new(0.5, 0.0) + I * z / (lambda * h);
        let mut values = vec![Complex64::new(0.0, 0.0); self.axis.len()];
        for (&i, (j, o)) in self.live.iter().zip(out.into_iter().zip(&self.outgoing)) {
            let x = self.axis[i];
            let mut v = j;
            if x > 0.0 {
                let phi = self.scenario.phi_minus.value(&o.x)?;
                v += (expo * (eps / x).ln() + I * phi / h).exp();
            }
            values[i] = v * assembly_cut(x, eps);
        }
        GridFunction::new(vec![self.axis.clone()], values, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeMass {
    pub h: f64,
    /// Squared L^2 mass of T'u outside the tube, over |x| <= window.
    pub outside: f64,
    /// The same over the whole sampled box.
    pub total: f64,
}

/// Frequency mass of the assembled 1-D solution outside the
/// `thickness`-tube around Lambda_- and Lambda_+ within |x| <= window, for
/// each h (one shared sampling grid, fine enough for the smallest h).
pub fn outside_tube_masses(
    lambda: f64,
    epsilon: f64,
    z_over_h: Complex64,
    h_list: &[f64],
    thickness: f64,
    window: f64,
) -> Result<Vec<TubeMass>> {
    if !(thickness > 0.0) {
        return Err(Error::validation("thickness", "must be positive"));
    }
    if !(window > 0.0 && window < 1.0) {
        return Err(Error::validation("window", "must lie in (0, 1)"));
    }
    let h_min = h_list.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(h_min > 0.0) {
        return Err(Error::validation("h", "need a nonempty list of positive values"));
    }
    // ten nodes per wavelength of the fastest phase on the support
    let kmax = 0.5 * lambda * ASSEMBLY_REACH + thickness;
    let n = ((2.0 * ASSEMBLY_REACH * kmax * 10.0 / (2.0 * PI * h_min)).ceil() as usize).max(801);
    let asm = Assembly1d::new(lambda, epsilon, crate::microlocal::uniform_axis(-ASSEMBLY_REACH, ASSEMBLY_REACH, n))?;
    let tube = PhaseSpaceRegion::Tube {
        charts: vec![asm.scenario.phi_minus.clone(), asm.scenario.phi_plus.clone()],
        thickness,
    };
    let outside_region = tube.complement().within(window);
    h_list
        .iter()
        .map(|&h| {
            let u = asm.solution(z_over_h * h, h)?;
            let xi_max = 0.5 * lambda * window + 8.0 * h.sqrt() + thickness;
            let grid = PhaseSpaceGrid {
                x_axes: vec![crate::microlocal::uniform_axis(-window, window, 101)],
                xi_axes: vec![crate::microlocal::uniform_axis(-xi_max, xi_max, 161)],
            };
            let t = fbi(&u, &grid, h)?;
            Ok(TubeMass {
                h,
                outside: frequency_mass(&t, &outside_region)?,
                total: frequency_mass(&t, &PhaseSpaceRegion::Empty.complement())?,
            })
        })
        .collect()
}
