//! The transition amplitude d_0 from incoming data on x_1 = epsilon to
//! outgoing values near the fixed point: closed form, the independent
//! transport pipeline, the bad-set function phi_1 and the operator J.

use std::f64::consts::PI;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{manifold_leading, LagrangianChart};
use crate::model::{distance_to_lattice, HamiltonianModel, ResonanceLattice, SpectralParams};
use crate::ode::{solve_at, OdeOptions};
use crate::phase::{intersection_point, PsiChart, TransitionScenario};
use crate::special::{gamma, nonpositive_integer_distance};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn long_opts() -> OdeOptions {
    OdeOptions {
        rtol: 1e-12,
        atol: 1e-24,
        ..Default::default()
    }
}

/// Integrates x' = dp/dxi(x, grad phi(x)) together with extra state,
/// reporting at `times`.
fn reduced_with<F>(
    model: &HamiltonianModel,
    chart: &LagrangianChart,
    x0: &[f64],
    extra0: &[f64],
    times: &[f64],
    mut extra: F,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64], &[f64], &[f64], &mut [f64]),
{
    let d = model.dim();
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let x = &y[..d];
        match chart.gradient(x) {
            Ok(xi) => {
                let g = model.grad_p0(x, &xi);
                dy[..d].copy_from_slice(&g[d..]);
                extra(x, &xi, &y[d..], &mut dy[d..]);
            }
            Err(e) => {
                *failure.lock().unwrap() = Some(e);
                dy.iter_mut().for_each(|v| *v = f64::NAN);
            }
        }
    };
    let mut y0 = x0.to_vec();
    y0.extend(extra0);
    let r = solve_at(rhs, 0.0, &y0, times, &long_opts(), |y| y.iter().all(|v| v.is_finite()));
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    r
}

/// One recorded branch decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchEntry {
    pub quantity: String,
    pub argument: [f64; 2],
    pub value: [f64; 2],
    pub branch: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchLog {
    pub entries: Vec<BranchEntry>,
}

impl BranchLog {
    fn push(&mut self, quantity: &str, arg: Complex64, value: Complex64, branch: &str) {
        self.entries.push(BranchEntry {
            quantity: quantity.into(),
            argument: [arg.re, arg.im],
            value: [value.re, value.im],
            branch: branch.into(),
        });
    }
}

fn principal_sqrt(v: f64) -> Complex64 {
    c(v).sqrt()
}

/// Limit of e^{(sum lambda/2 - lambda_1) t} / sqrt(det) as a log-modulus
/// plus the sign of the determinant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLimit {
    pub log_abs: f64,
    pub det_sign: f64,
    /// Estimates at the last few window ends.
    pub estimates: Vec<f64>,
    pub converged: bool,
}

fn window_times(l1: f64) -> Vec<f64> {
    (1..=12).map(|k| 2.0 * k as f64 / l1).collect()
}

fn settle(estimates: Vec<f64>, op: &'static str) -> Result<(f64, bool, Vec<f64>)> {
    let n = estimates.len();
    let (a, b, cc) = (estimates[n - 3], estimates[n - 2], estimates[n - 1]);
    // Aitken on three equally spaced windows when the trend is geometric
    let den = (cc - b) - (b - a);
    let mut lim = cc;
    if den.abs() > 1e-300 {
        let r = (cc - b) / (b - a);
        if r.is_finite() && r.abs() < 0.9 && r != 0.0 {
            lim = cc - (cc - b) * (cc - b) / den;
        }
    }
    let converged = (cc - b).abs() <= 1e-6;
    if !converged {
        return Err(Error::with_residual(
            op,
            format!("limit not settled: last windows {b:.9e}, {cc:.9e}"),
            (cc - b).abs(),
        ));
    }
    Ok((lim, converged, estimates[n.saturating_sub(4)..].to_vec()))
}

/// Variational frames of the psi family along the Lambda_- trajectory
/// from y = (epsilon, y'), with eta' = grad' phi_-(y); returns for each
/// time (x, x', X_w).
fn incoming_frames(
    sc: &TransitionScenario,
    y: &[f64],
    times: &[f64],
) -> Result<Vec<(Vec<f64>, Vec<f64>, DMatrix<f64>)>> {
    let d = sc.dim();
    let model = &sc.model;
    let xi = sc.phi_minus.gradient(y)?;
    let psi = PsiChart::new(model, sc.epsilon, &xi[1..]);
    let (_, fr0) = psi.start(&y[1..])?;
    let k = d - 1;
    let n = 2 * d;
    let out = reduced_with(model, &sc.phi_minus, y, fr0.as_slice(), times, |x, xi, fr, dfr| {
        let h = model.hess_p0(x, xi);
        for col in 0..k {
            let v = &fr[col * n..(col + 1) * n];
            for r in 0..d {
                let mut a = 0.0;
                let mut b = 0.0;
                for m in 0..n {
                    a += h[(d + r, m)] * v[m];
                    b -= h[(r, m)] * v[m];
                }
                dfr[col * n + r] = a;
                dfr[col * n + d + r] = b;
            }
        }
    })?;
    out.into_iter()
        .map(|s| {
            let x = s[..d].to_vec();
            let xi = sc.phi_minus.gradient(&x)?;
            let v = model.dp_dxi(&x, &xi);
            let fr = DMatrix::from_column_slice(n, k, &s[d..]);
            Ok((x, v, fr.rows(0, d).into_owned()))
        })
        .collect()
}

fn frame_det(v: &[f64], xw: &DMatrix<f64>) -> f64 {
    let d = v.len();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        m[(i, 0)] = v[i];
        for k in 0..d - 1 {
            m[(i, k + 1)] = xw[(i, k)];
        }
    }
    m.determinant()
}

/// F_jac limit from variational frames of the psi_{eta'} characteristic
/// family through (epsilon, y').
pub fn jacobian_limit(sc: &TransitionScenario, y: &[f64]) -> Result<LogLimit> {
    let l1 = sc.model.lambda1();
    let rate = 0.5 * sc.model.lambda_sum() - l1;
    let times = window_times(l1);
    let frames = incoming_frames(sc, y, &times)?;
    let mut est = Vec::new();
    let mut sign = 0.0;
    for (t, (_, v, xw)) in times.iter().zip(&frames) {
        let det = frame_det(v, xw);
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Fold { point: y.to_vec() });
        }
        if sign != 0.0 && det.signum() != sign {
            return Err(Error::numerical("d0_closed_form", "Jacobian determinant changed sign (caustic)"));
        }
        sign = det.signum();
        est.push(rate * t - 0.5 * det.abs().ln());
    }
    let (lim, converged, estimates) = settle(est, "d0_closed_form")?;
    Ok(LogLimit {
        log_abs: lim,
        det_sign: sign,
        estimates,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct B0Samples {
    pub times: Vec<f64>,
    pub b0: Vec<Complex64>,
    /// d/dt log |b0| by centered differences (interior samples).
    pub log_rate: Vec<f64>,
}

/// det dx/d(t, x') along the psi_{eta'} ray from (epsilon, y'), full
/// Hamiltonian flow with its own variational frame.
fn ray_dets(sc: &TransitionScenario, eta: &[f64], y: &[f64], times: &[f64]) -> Result<(f64, Vec<f64>)> {
    let psi = PsiChart::new(&sc.model, sc.epsilon, eta);
    let (p0, _) = psi.start(&y[1..])?;
    let dp1 = sc.model.dp_dxi(&p0.x, &p0.xi)[0];
    let dets = times
        .iter()
        .map(|&t| {
            if t == 0.0 {
                Ok(dp1)
            } else {
                psi.ray(t, &y[1..]).map(|r| r.dx.determinant())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dp1, dets))
}

/// b_0 = sqrt(dp/dxi_1) / sqrt(det dx/d(t, x')) e^{itz/h} along the
/// psi_{eta'} characteristic through rho_eta'.
pub fn transport_b0(sc: &TransitionScenario, eta: &[f64], times: &[f64]) -> Result<B0Samples> {
    let inter = intersection_point(sc, eta)?;
    let (dp1, dets) = ray_dets(sc, eta, &inter.x_of_eta, times)?;
    let sp = &sc.spectral;
    let iz_h = Complex64::new(0.0, 1.0) * sp.z / sp.h;
    let mut b0 = Vec::with_capacity(times.len());
    for (&t, &det) in times.iter().zip(&dets) {
        if det == 0.0 || det.signum() != dp1.signum() {
            return Err(Error::numerical("transport_b0", "determinant passed through 0 (caustic)"));
        }
        // both roots sit on the same side of the cut, so the ratio is real
        b0.push(c((dp1 / det).sqrt()) * (iz_h * t).exp());
    }
    let mut log_rate = Vec::new();
    for i in 1..times.len().saturating_sub(1) {
        let dl = b0[i + 1].norm().ln() - b0[i - 1].norm().ln();
        log_rate.push(dl / (times[i + 1] - times[i - 1]));
    }
    Ok(B0Samples {
        times: times.to_vec(),
        b0,
        log_rate,
    })
}

/// Default last window end for the transport limit, in units of 1/lambda_1.
pub const TRANSPORT_T_MAX: f64 = 24.0;

/// lim e^{(sum lambda/2 - lambda_1) t} |b_0| with windows up to t_max /
/// lambda_1. The full ray drifts off Lambda_- like e^{lambda_1 t} times
/// rounding, so the base point follows the reduced flow on Lambda_- and
/// only the frame is linearized.
pub fn transport_limit(sc: &TransitionScenario, eta: &[f64], t_max: f64) -> Result<LogLimit> {
    let inter = intersection_point(sc, eta)?;
    let y = inter.x_of_eta;
    let l1 = sc.model.lambda1();
    let rate = 0.5 * sc.model.lambda_sum() - l1;
    let dp1 = sc.model.dp_dxi(&y, &inter.rho_eta.xi)[0];
    let n = (t_max / 2.0).floor().max(3.0) as usize;
    let times: Vec<f64> = (1..=n).map(|k| 2.0 * k as f64 / l1).collect();
    let frames = incoming_frames(sc, &y, &times)?;
    let mut est = Vec::new();
    for (t, (_, v, xw)) in times.iter().zip(&frames) {
        let det = frame_det(v, xw);
        if det == 0.0 || det.signum() != dp1.signum() {
            return Err(Error::numerical("a00_limit", "determinant passed through 0 (caustic)"));
        }
        est.push(rate * t + 0.5 * (dp1 / det).ln());
    }
    let (lim, converged, estimates) = settle(est, "a00_limit")?;
    Ok(LogLimit {
        log_abs: lim,
        det_sign: 1.0,
        estimates,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A00 {
    pub value: Complex64,
    pub limit: LogLimit,
    pub g1: Vec<f64>,
}

/// a_{0,0}(0, eta') = |g_1| lambda_1^{3/2} e^{-i pi/4} lim e^{(sum lambda/2 -
/// lambda_1) t} b_0(t) e^{-itz/h}, with the limit from the transport route.
pub fn a00_limit(sc: &TransitionScenario, eta: &[f64]) -> Result<A00> {
    let inter = intersection_point(sc, eta)?;
    let (lt, _) = manifold_leading(&sc.model, &sc.phi_minus, &inter.x_of_eta)?;
    let lim = transport_limit(sc, eta, TRANSPORT_T_MAX)?;
    let l1 = sc.model.lambda1();
    let value = Complex64::from_polar(norm(&lt.g1) * l1.powf(1.5) * lim.log_abs.exp(), -PI / 4.0);
    Ok(A00 {
        value,
        limit: lim,
        g1: lt.g1,
    })
}

/// exp of int_0^{-inf} (tr(d2_xixi p0 Hess phi_+) / 2 - sum lambda / 2) dt
/// along the backward Lambda_+ trajectory from x, as its logarithm.
pub fn action_integral(sc: &TransitionScenario, x: &[f64]) -> Result<f64> {
    let d = sc.dim();
    let model = &sc.model;
    let half = 0.5 * model.lambda_sum();
    let l1 = model.lambda1();
    let times: Vec<f64> = (1..=18).map(|k| -2.0 * k as f64 / l1).collect();
    let chart = &sc.phi_plus;
    let out = reduced_with(model, chart, x, &[0.0], &times, |x, xi, _e, de| {
        let f = match chart.hessian(x) {
            Ok(hph) => 0.5 * (model.hess_xixi(x, xi) * hph).trace() - half,
            Err(_) => f64::NAN,
        };
        de[0] = f;
    })?;
    let n = out.len();
    let (a, b) = (out[n - 2][d], out[n - 1][d]);
    if (a - b).abs() > 1e-10 * (1.0 + b.abs()) {
        return Err(Error::with_residual("action_integral", "integral not settled", (a - b).abs()));
    }
    Ok(b)
}

/// phi_1(x) = grad phi_1(0) . g_1^+(x) with grad phi_1(0) = -lambda_1
/// g_1^-(rho_-): the solution of (v . grad - lambda_1) phi_1 = 0 along the
/// phi_+ transport field v.
#[derive(Debug, Clone)]
pub struct Phi1Field {
    pub seed: Vec<f64>,
    model: HamiltonianModel,
    chart: LagrangianChart,
}

pub fn phi1_solve(sc: &TransitionScenario) -> Phi1Field {
    let l1 = sc.model.lambda1();
    Phi1Field {
        seed: sc.g1_minus.iter().map(|g| -l1 * g).collect(),
        model: sc.model.clone(),
        chart: sc.phi_plus.clone(),
    }
}

impl Phi1Field {
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        if norm(x) == 0.0 {
            return Ok(0.0);
        }
        let (lt, _) = manifold_leading(&self.model, &self.chart, x)?;
        Ok(dot(&self.seed, &lt.g1))
    }

    /// |phi_1(x)| / (|grad phi_1(0)| |x|).
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        let v = self.value(x)?;
        Ok(v.abs() / (norm(&self.seed) * norm(x)))
    }

    /// (v . grad - lambda_1) phi_1 at x by a centered difference along v.
    pub fn transport_residual(&self, x: &[f64]) -> Result<f64> {
        let xi = self.chart.gradient(x)?;
        let v = self.model.dp_dxi(x, &xi);
        let h = 1e-4 * norm(x) / norm(&v);
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let dv = (self.value(&xp)? - self.value(&xm)?) / (2.0 * h);
        Ok(dv - self.model.lambda1() * self.value(x)?)
    }
}

/// Incoming-side geometry at (epsilon, y').
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncomingData {
    pub y: Vec<f64>,
    pub g1: Vec<f64>,
    pub dp_dxi1: f64,
    pub hess_det: f64,
    pub jac: LogLimit,
    pub phi_minus: f64,
}

pub fn incoming_data(sc: &TransitionScenario, y_prime: &[f64]) -> Result<IncomingData> {
    let d = sc.dim();
    if y_prime.len() + 1 != d {
        return Err(Error::validation("y_prime", format!("need {} entries", d - 1)));
    }
    let mut y = vec![sc.epsilon];
    y.extend(y_prime);
    let cp = sc.phi_minus.eval(&y)?;
    let (lt, _) = manifold_leading(&sc.model, &sc.phi_minus, &y)?;
    let dp = sc.model.dp_dxi(&y, &cp.grad)[0];
    let hess_det = if d > 1 {
        cp.hess.view((1, 1), (d - 1, d - 1)).determinant()
    } else {
        1.0
    };
    let jac = jacobian_limit(sc, &y)?;
    Ok(IncomingData {
        y,
        g1: lt.g1,
        dp_dxi1: dp,
        hess_det,
        jac,
        phi_minus: cp.value,
    })
}

/// Outgoing-side geometry at the target x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutgoingData {
    pub x: Vec<f64>,
    pub g1: Vec<f64>,
    pub log_action: f64,
    pub phi_plus: f64,
    pub badset_margin: f64,
}

pub fn outgoing_data(sc: &TransitionScenario, x: &[f64]) -> Result<OutgoingData> {
    if x.len() != sc.dim() {
        return Err(Error::validation("x", "dimension mismatch"));
    }
    let (lt, _) = manifold_leading(&sc.model, &sc.phi_plus, x)?;
    let phi1 = phi1_solve(sc);
    let margin = dot(&phi1.seed, &lt.g1).abs() / (norm(&phi1.seed) * norm(x));
    Ok(OutgoingData {
        x: x.to_vec(),
        g1: lt.g1,
        log_action: action_integral(sc, x)?,
        phi_plus: sc.phi_plus.value(x)?,
        badset_margin: margin,
    })
}

fn pole_check(sp: &SpectralParams, l1: f64) -> Result<()> {
    let (dist, n) = nonpositive_integer_distance(sp.s / l1);
    // |S/lambda_1 + n| lambda_1 h = |z - z_n|
    if dist * l1 <= 1e-8 {
        return Err(Error::Pole { n, z: sp.z });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEvaluation {
    pub z: Complex64,
    pub h: f64,
    pub d0: Complex64,
    pub f_gamma: Complex64,
    pub f_bracket: Complex64,
    pub f_geom: Complex64,
    pub f_action: Complex64,
    pub f_jac: Complex64,
    pub badset_margin: f64,
    pub branch_log: BranchLog,
}

impl TransitionEvaluation {
    pub fn factor_product(&self) -> Complex64 {
        self.f_gamma * self.f_bracket * self.f_geom * self.f_action * self.f_jac
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cj = |v: Complex64| serde_json::json!([v.re, v.im]);
        serde_json::json!({
            "z": cj(self.z),
            "h": self.h,
            "d0_re": self.d0.re,
            "d0_im": self.d0.im,
            "factors": {
                "gamma": cj(self.f_gamma),
                "bracket": cj(self.f_bracket),
                "geom": cj(self.f_geom),
                "action": cj(self.f_action),
                "jac": cj(self.f_jac),
            },
            "badset_margin": self.badset_margin,
            "branch_log": self.branch_log,
        })
    }
}

/// The z-independent part of d_0 at one (x, y') pair.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    pub incoming: IncomingData,
    pub outgoing: OutgoingData,
    lambda1: f64,
    dim: usize,
    badset_tol: f64,
}

impl TransitionKernel {
    pub fn new(sc: &TransitionScenario, x: &[f64], y_prime: &[f64]) -> Result<Self> {
        Ok(TransitionKernel {
            incoming: incoming_data(sc, y_prime)?,
            outgoing: outgoing_data(sc, x)?,
            lambda1: sc.model.lambda1(),
            dim: sc.dim(),
            badset_tol: sc.badset_tol,
        })
    }

    pub fn from_parts(sc: &TransitionScenario, incoming: IncomingData, outgoing: OutgoingData) -> Self {
        TransitionKernel {
            incoming,
            outgoing,
            lambda1: sc.model.lambda1(),
            dim: sc.dim(),
            badset_tol: sc.badset_tol,
        }
    }

    pub fn evaluate(&self, sp: &SpectralParams) -> Result<TransitionEvaluation> {
        let l1 = self.lambda1;
        pole_check(sp, l1)?;
        let margin = self.outgoing.badset_margin;
        if margin <= self.badset_tol {
            return Err(Error::BadSet {
                margin,
                tol: self.badset_tol,
            });
        }
        let mut log = BranchLog::default();
        let s = sp.s;
        let d = self.dim as f64;
        let gam = gamma(s / l1);
        let f_gamma = c(l1.sqrt()) * Complex64::from_polar(1.0, -d * PI / 4.0) * gam;

        let base = Complex64::new(0.0, l1 * dot(&self.incoming.g1, &self.outgoing.g1));
        let f_bracket = (-(s / l1) * base.ln()).exp();
        log.push("(i lambda_1 <g1-|g1+>)^(-S/lambda_1)", base, f_bracket, "principal log");

        let sq_dp = principal_sqrt(self.incoming.dp_dxi1);
        log.push("sqrt(dp/dxi_1)", c(self.incoming.dp_dxi1), sq_dp, "principal");
        let f_geom = c(norm(&self.incoming.g1) * self.incoming.hess_det.abs().sqrt()) * sq_dp;

        let f_action = c(self.outgoing.log_action.exp());

        let sq_det = principal_sqrt(self.incoming.jac.det_sign);
        log.push("sqrt(sign det dy/d(t,w'))", c(self.incoming.jac.det_sign), sq_det, "principal");
        let f_jac = c(self.incoming.jac.log_abs.exp()) / sq_det;

        let d0 = f_gamma * f_bracket * f_geom * f_action * f_jac;
        Ok(TransitionEvaluation {
            z: sp.z,
            h: sp.h,
            d0,
            f_gamma,
            f_bracket,
            f_geom,
            f_action,
            f_jac,
            badset_margin: margin,
            branch_log: log,
        })
    }

    /// As `evaluate`, additionally refusing z within nu h of the lattice.
    pub fn evaluate_guarded(&self, sp: &SpectralParams, lattice: &ResonanceLattice) -> Result<TransitionEvaluation> {
        let dist = distance_to_lattice(sp.z, lattice)?;
        let guard = sp.nu * sp.h;
        if dist <= guard {
            return Err(Error::NearLattice { distance: dist, guard });
        }
        self.evaluate(sp)
    }
}

/// d_0(x, y', z) from the closed form with its five factors.
pub fn d0_closed_form(sc: &TransitionScenario, x: &[f64], y_prime: &[f64]) -> Result<TransitionEvaluation> {
    pole_check(&sc.spectral, sc.model.lambda1())?;
    TransitionKernel::new(sc, x, y_prime)?.evaluate(&sc.spectral)
}

/// c_0(x, eta') from a_{0,0}, the action integral, the bracket and Gamma.
pub fn c0_at(sc: &TransitionScenario, x: &[f64], eta: &[f64]) -> Result<Complex64> {
    let l1 = sc.model.lambda1();
    let sp = &sc.spectral;
    pole_check(sp, l1)?;
    let out = outgoing_data(sc, x)?;
    if out.badset_margin <= sc.badset_tol {
        return Err(Error::BadSet {
            margin: out.badset_margin,
            tol: sc.badset_tol,
        });
    }
    let a00 = a00_limit(sc, eta)?;
    let s = sp.s;
    let base = Complex64::new(0.0, l1 * dot(&a00.g1, &out.g1));
    let bracket = (-(s / l1) * base.ln()).exp();
    Ok(c(out.log_action.exp() / l1) * bracket * gamma(s / l1) * a00.value)
}

/// eta' with x'(eta') = y', by Newton on the intersection map.
pub fn stationary_eta(sc: &TransitionScenario, y_prime: &[f64]) -> Result<Vec<f64>> {
    let d = sc.dim();
    let mut eta = sc.xi_minus_prime();
    for _ in 0..50 {
        let inter = intersection_point(sc, &eta)?;
        let r: Vec<f64> = inter.x_of_eta[1..].iter().zip(y_prime).map(|(a, b)| a - b).collect();
        if norm(&r) <= 1e-13 {
            return Ok(eta);
        }
        // d x'/d eta' is the inverse transverse Hessian of phi_-
        let h = sc.phi_minus.hessian(&inter.x_of_eta)?;
        let hs = h.view((1, 1), (d - 1, d - 1)).into_owned();
        let step = hs * DVector::from_vec(r);
        for k in 0..d - 1 {
            eta[k] -= step[k];
        }
    }
    Err(Error::numerical("d0_via_transport", "stationary eta' not found"))
}

/// d_0 = e^{-i(d-1)pi/4} |det Hess' phi_-(epsilon, y')|^{1/2} c_0(x, eta'(y')).
pub fn d0_via_transport(sc: &TransitionScenario, x: &[f64], y_prime: &[f64]) -> Result<Complex64> {
    let d = sc.dim();
    pole_check(&sc.spectral, sc.model.lambda1())?;
    if y_prime.len() + 1 != d {
        return Err(Error::validation("y_prime", format!("need {} entries", d - 1)));
    }
    let eta = if d > 1 { stationary_eta(sc, y_prime)? } else { Vec::new() };
    let mut y = vec![sc.epsilon];
    y.extend(y_prime);
    let det = if d > 1 {
        sc.phi_minus.hessian(&y)?.view((1, 1), (d - 1, d - 1)).determinant()
    } else {
        1.0
    };
    let c0 = c0_at(sc, x, &eta)?;
    Ok(Complex64::from_polar(det.abs().sqrt(), -(d as f64 - 1.0) * PI / 4.0) * c0)
}

/// Cauchy data u_0 on x_1 = epsilon, sampled on a uniform tensor grid in
/// y' (no axes for d = 1), values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauchyData {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<Complex64>,
}

impl CauchyData {
    pub fn point(value: Complex64) -> Self {
        CauchyData {
            axes: Vec::new(),
            values: vec![value],
        }
    }

    fn nodes(&self) -> Vec<(Vec<f64>, Vec<usize>)> {
        let mut out = vec![(Vec::new(), Vec::new())];
        for ax in &self.axes {
            let mut next = Vec::new();
            for (p, idx) in &out {
                for (i, v) in ax.iter().enumerate() {
                    let mut q = p.clone();
                    q.push(*v);
                    let mut j = idx.clone();
                    j.push(i);
                    next.push((q, j));
                }
            }
            out = next;
        }
        out
    }

    fn weight(&self, idx: &[usize]) -> f64 {
        self.axes
            .iter()
            .zip(idx)
            .map(|(ax, &i)| {
                let h = if ax.len() > 1 { ax[1] - ax[0] } else { 1.0 };
                if i == 0 || i + 1 == ax.len() {
                    0.5 * h
                } else {
                    h
                }
            })
            .product()
    }
}

/// J(z) u_0 at the targets, with d replaced by d_0 and trapezoid
/// quadrature in y'.
pub fn apply_j(sc: &TransitionScenario, u0: &CauchyData, targets: &[Vec<f64>]) -> Result<Vec<Complex64>> {
    let d = sc.dim();
    if u0.axes.len() + 1 != d {
        return Err(Error::validation("u0.axes", format!("need {} axes", d - 1)));
    }
    let expected: usize = u0.axes.iter().map(|a| a.len()).product();
    if u0.values.len() != expected {
        return Err(Error::validation("u0.values", "length does not match the grid"));
    }
    for (k, ax) in u0.axes.iter().enumerate() {
        if ax.len() >= 2 {
            let h = ax[1] - ax[0];
            if !(h > 0.0) || ax.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h) {
                return Err(Error::validation(format!("u0.axes[{k}]"), "must be uniform and increasing"));
            }
        }
    }
    let sp = sc.spectral;
    pole_check(&sp, sc.model.lambda1())?;
    let nodes = u0.nodes();
    let active: Vec<usize> = (0..nodes.len()).filter(|&i| u0.values[i] != c(0.0)).collect();
    if active.is_empty() || targets.is_empty() {
        return Ok(vec![c(0.0); targets.len()]);
    }
    let incoming: Vec<IncomingData> = active
        .par_iter()
        .map(|&i| incoming_data(sc, &nodes[i].0))
        .collect::<Result<Vec<_>>>()?;
    let outgoing: Vec<OutgoingData> = targets.par_iter().map(|x| outgoing_data(sc, x)).collect::<Result<_>>()?;
    apply_j_prepared(sc, u0, &incoming, &outgoing)
}

/// [`apply_j`] with the geometry already computed: `incoming` holds one
/// entry per nonzero sample of u_0 in row-major order, `outgoing` one per
/// target. Only the spectral parameter of `sc` is read, so one geometry
/// serves a whole (h, z) sweep.
pub fn apply_j_prepared(
    sc: &TransitionScenario,
    u0: &CauchyData,
    incoming: &[IncomingData],
    outgoing: &[OutgoingData],
) -> Result<Vec<Complex64>> {
    let d = sc.dim();
    let sp = sc.spectral;
    let l1 = sc.model.lambda1();
    pole_check(&sp, l1)?;
    let hbar = sp.h;
    let nodes = u0.nodes();
    let active: Vec<usize> = (0..nodes.len()).filter(|&i| u0.values[i] != c(0.0)).collect();
    if active.len() != incoming.len() {
        return Err(Error::validation("incoming", "need one entry per nonzero sample of u0"));
    }
    // resolution: the phase of the integrand may turn by at most pi/4 per cell
    if d > 1 {
        let pos: std::collections::HashMap<Vec<usize>, usize> =
            active.iter().enumerate().map(|(k, &i)| (nodes[i].1.clone(), k)).collect();
        for (k, &i) in active.iter().enumerate() {
            for ax in 0..d - 1 {
                let mut nb = nodes[i].1.clone();
                nb[ax] += 1;
                if let Some(&k2) = pos.get(&nb) {
                    let i2 = active[k2];
                    let dphi = (incoming[k2].phi_minus - incoming[k].phi_minus) / hbar;
                    let du = (u0.values[i2] / u0.values[i]).arg();
                    let turn = (-dphi + du).abs();
                    if turn > PI / 4.0 {
                        return Err(Error::validation(
                            "u0.axes",
                            format!("grid under-resolved: phase turns {turn:.3} rad per cell"),
                        ));
                    }
                }
            }
        }
    }
    let pref = ((sp.s / l1) * hbar.ln()).exp() / (2.0 * PI * hbar).powf(d as f64 / 2.0);
    outgoing
        .par_iter()
        .map(|out| {
            let mut acc = c(0.0);
            for (k, &i) in active.iter().enumerate() {
                let ker = TransitionKernel::from_parts(sc, incoming[k].clone(), out.clone());
                let ev = ker.evaluate(&sp)?;
                let phase = (out.phi_plus - incoming[k].phi_minus) / hbar;
                acc += ev.d0 * Complex64::from_polar(1.0, phase) * u0.values[i] * u0.weight(&nodes[i].1);
            }
            Ok(pref * acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_barrier_model, spectral_params};
    use crate::phase::ScenarioConfig;
    use crate::poly::Poly;

    fn scenario_z(lams: &[f64], w: Poly, eps: f64, z: Complex64, h: f64) -> TransitionScenario {
        let m = make_barrier_model(lams, &w).unwrap();
        let sp = spectral_params(z, h, 1.0, 5.0, 0.1, lams).unwrap();
        TransitionScenario::new(&m, &ScenarioConfig::with_epsilon(eps), sp).unwrap()
    }

    fn quad1(lam: f64) -> TransitionScenario {
        scenario_z(&[lam], Poly::zero(1), 0.1, c(0.0), 0.05)
    }

    fn quad2(z: Complex64) -> TransitionScenario {
        scenario_z(&[1.0, 2.0], Poly::zero(2), 0.1, z, 0.05)
    }

    #[test]
    fn one_dimensional_amplitude() {
        for lam in [1.0, 1.7] {
            let sc = quad1(lam);
            for x in [0.03, 0.08] {
                let ev = d0_closed_form(&sc, &[x], &[]).unwrap();
                let want = (PI * 0.1 / x).sqrt();
                assert!((ev.d0.norm() - want).abs() < 1e-8 * want, "{lam} {x}: {}", ev.d0.norm());
                assert!((ev.f_action - c(1.0)).norm() < 1e-10);
                assert!((ev.d0 - ev.factor_product()).norm() < 1e-12 * ev.d0.norm());
            }
        }
    }

    #[test]
    fn b0_and_a00_in_one_dimension() {
        let lam = 1.3;
        let sc = quad1(lam);
        let times = [0.0, 1.0, 2.0, 3.0, 4.0];
        let b = transport_b0(&sc, &[], &times).unwrap();
        assert!((b.b0[0] - c(1.0)).norm() < 1e-10);
        for (t, v) in times.iter().zip(&b.b0) {
            assert!((v.norm() - (lam * t / 2.0).exp()).abs() < 1e-8 * v.norm(), "{t}");
        }
        let a = a00_limit(&sc, &[]).unwrap();
        assert!((a.value.norm() - 0.1 * lam.powf(1.5)).abs() < 1e-8);
        assert!(a.limit.converged);
    }

    #[test]
    fn a00_does_not_depend_on_window_end() {
        let sc = scenario_z(&[1.0, 1.6], Poly::monomial(vec![3, 0], 0.05), 0.1, c(0.0), 0.05);
        let eta = [0.004];
        let a = transport_limit(&sc, &eta, 20.0).unwrap().log_abs;
        let b = transport_limit(&sc, &eta, 24.0).unwrap().log_abs;
        assert!((a - b).abs() <= 1e-6, "{a} {b}");
    }

    #[test]
    fn full_rays_match_linearized_frames() {
        let sc = scenario_z(&[1.0, 1.6], Poly::monomial(vec![3, 0], 0.05), 0.1, c(0.0), 0.05);
        let eta = [0.004];
        let times = [1.0, 3.0, 6.0];
        let b = transport_b0(&sc, &eta, &times).unwrap();
        let y = intersection_point(&sc, &eta).unwrap().x_of_eta;
        let dp1 = sc.phi_minus.gradient(&y).map(|g| sc.model.dp_dxi(&y, &g)[0]).unwrap();
        let fr = incoming_frames(&sc, &y, &times).unwrap();
        for ((t, v), (_, xd, xw)) in times.iter().zip(&b.b0).zip(&fr) {
            let other = (dp1 / frame_det(xd, xw)).sqrt();
            assert!((v.norm() - other).abs() <= 1e-8 * other, "{t}: {} vs {other}", v.norm());
        }
    }

    #[test]
    fn b0_growth_rate_in_two_dimensions() {
        let sc = quad2(c(0.0));
        let times: Vec<f64> = (0..=80).map(|k| 0.1 * k as f64).collect();
        let b = transport_b0(&sc, &sc.xi_minus_prime(), &times).unwrap();
        // det dx/d(t,x') ~ e^{(lambda_2 - lambda_1) t}
        let rate = *b.log_rate.last().unwrap();
        assert!((rate + 0.5).abs() < 1e-4, "{rate}");
    }

    #[test]
    fn phi1_is_linear_on_quadratic_model() {
        let sc = quad2(c(0.0));
        let f = phi1_solve(&sc);
        for x in [[0.03, 0.02], [-0.05, 0.04], [0.0, 0.06]] {
            let v = f.value(&x).unwrap();
            assert!((v + 0.1 * x[0]).abs() < 1e-9, "{x:?} {v}");
        }
        assert!(f.transport_residual(&[0.04, 0.03]).unwrap().abs() < 1e-6);
        let e = d0_closed_form(&sc, &[0.0, 0.05], &[0.0]).unwrap_err();
        assert!(matches!(e, Error::BadSet { .. }));
    }

    #[test]
    fn poles_sit_on_the_first_axis_sublattice() {
        let h = 0.05;
        for n in 0..3 {
            let z = Complex64::new(0.0, -h * (n as f64 + 1.5));
            let sc = quad2(z);
            match d0_closed_form(&sc, &[0.05, 0.02], &[0.0]) {
                Err(Error::Pole { n: m, .. }) => assert_eq!(m, n),
                other => panic!("expected pole, got {other:?}"),
            }
        }
        // alpha = (0, 1) is not a pole when lambda_2 / lambda_1 is not an integer
        let lams = [1.0, 1.5];
        let z = Complex64::new(0.0, -h * (1.5 + 1.25));
        let sc = scenario_z(&lams, Poly::zero(2), 0.1, z, h);
        assert!(d0_closed_form(&sc, &[0.05, 0.02], &[0.0]).is_ok());
    }

    #[test]
    fn transport_pipeline_matches_closed_form() {
        for (x, yp, z) in [
            ([0.05, 0.02], 0.0, c(0.0)),
            ([0.04, -0.03], 0.01, Complex64::new(0.02, -0.01)),
            ([0.07, 0.01], -0.015, Complex64::new(-0.03, 0.02)),
        ] {
            let sc = quad2(z);
            let a = d0_closed_form(&sc, &x, &[yp]).unwrap().d0;
            let b = d0_via_transport(&sc, &x, &[yp]).unwrap();
            assert!((a - b).norm() <= 1e-6 * a.norm(), "{x:?} {yp}: {a} vs {b}");
        }
    }

    #[test]
    fn perturbed_pipelines_agree() {
        let w = Poly::monomial(vec![2, 1], 0.05);
        let sc = scenario_z(&[1.0, 1.6], w, 0.1, Complex64::new(0.01, 0.0), 0.05);
        let x = [0.05, 0.02];
        let a = d0_closed_form(&sc, &x, &[0.005]).unwrap().d0;
        let b = d0_via_transport(&sc, &x, &[0.005]).unwrap();
        assert!((a - b).norm() <= 1e-6 * a.norm(), "{a} vs {b}");
    }

    #[test]
    fn j_in_one_dimension() {
        let sc = quad1(1.0);
        let u = Complex64::new(0.6, -0.8);
        for x in [0.04, 0.09] {
            let v = apply_j(&sc, &CauchyData::point(u), &[vec![x]]).unwrap()[0];
            let want = (0.1 / (2.0 * x)).sqrt();
            assert!((v.norm() - want).abs() < 1e-8 * want);
        }
        let zero = apply_j(&sc, &CauchyData::point(c(0.0)), &[vec![0.05]]).unwrap();
        assert_eq!(zero[0], c(0.0));
    }

    #[test]
    fn j_is_linear_and_rejects_coarse_grids() {
        let sc = quad2(c(0.0));
        let ax: Vec<f64> = (0..9).map(|k| -0.01 + 0.0025 * k as f64).collect();
        let bump = |y: f64, k: f64| Complex64::from_polar((1.0 - (y / 0.012).powi(2)).max(0.0), k * y);
        let u = CauchyData { axes: vec![ax.clone()], values: ax.iter().map(|&y| bump(y, 0.0)).collect() };
        let v = CauchyData { axes: vec![ax.clone()], values: ax.iter().map(|&y| bump(y, 30.0)).collect() };
        let (al, be) = (Complex64::new(0.3, 1.0), c(-2.0));
        let w = CauchyData {
            axes: vec![ax.clone()],
            values: u.values.iter().zip(&v.values).map(|(a, b)| al * a + be * b).collect(),
        };
        let t = vec![vec![0.05, 0.02]];
        let (ju, jv, jw) = (apply_j(&sc, &u, &t).unwrap(), apply_j(&sc, &v, &t).unwrap(), apply_j(&sc, &w, &t).unwrap());
        let lin = al * ju[0] + be * jv[0];
        assert!((jw[0] - lin).norm() <= 1e-12 * lin.norm().max(1e-300));
        let fast = CauchyData { axes: vec![ax.clone()], values: ax.iter().map(|&y| bump(y, 2000.0)).collect() };
        assert!(matches!(apply_j(&sc, &fast, &t), Err(Error::Validation { .. })));
    }

    #[test]
    fn c0_obeys_its_transport_equation() {
        let sc = scenario_z(&[1.0, 1.6], Poly::monomial(vec![3, 0], 0.05), 0.1, Complex64::new(0.02, -0.01), 0.05);
        let eta = [0.004];
        let x0 = [0.04, 0.03];
        let dt = 1e-3;
        let opts = OdeOptions { rtol: 1e-13, atol: 1e-18, ..Default::default() };
        let back = crate::flow::manifold_path(&sc.model, &sc.phi_plus, &x0, &[-dt], &opts).unwrap();
        let fwd = crate::flow::manifold_path(&sc.model, &sc.phi_plus, &x0, &[dt], &opts).unwrap();
        let (cm, cp) = (c0_at(&sc, &back[0], &eta).unwrap(), c0_at(&sc, &fwd[0], &eta).unwrap());
        let lhs = (cp.ln() - cm.ln()) / (2.0 * dt);
        let xi = sc.phi_plus.gradient(&x0).unwrap();
        let tr = (sc.model.hess_xixi(&x0, &xi) * sc.phi_plus.hessian(&x0).unwrap()).trace();
        let sp = sc.spectral;
        let rhs = c(-0.5 * tr) + Complex64::new(0.0, 1.0) * sp.z / sp.h;
        assert!((lhs - rhs).norm() <= 1e-6, "{lhs} vs {rhs}");
    }
}
