//! Phases attached to the hypersurface x_1 = epsilon: the eikonal solution
//! psi_eta', the auxiliary Lagrangian Lambda_0 through its level set, and
//! the evolved family phi(t, x, eta').

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{fit_expandible, mu_ladder, ExpandiblePolySeries};
use crate::error::{Error, Result};
use crate::flow::{
    flow_general, manifold_generating_function, manifold_leading, BoxDomain, ChartEval, ChartKind,
    ChartPoint, LagrangianChart,
};
use crate::model::{real_branch, HamiltonianModel, PhasePoint, SpectralParams};
use crate::ode::OdeOptions;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sym(h: DMatrix<f64>) -> DMatrix<f64> {
    (&h + h.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Offset of H_- = {x_1 = epsilon}; defaults to 0.1 * chart_radius.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Transverse coordinates of rho_-; defaults to 0.
    #[serde(default)]
    pub x_minus_prime: Vec<f64>,
    /// Half width of the phi_+/- chart boxes; defaults to 0.9 of the
    /// validity radius.
    #[serde(default)]
    pub chart_radius: Option<f64>,
    #[serde(default = "default_cone")]
    pub cone_aperture: f64,
    /// Half width of the eta' box around xi_-'; defaults to epsilon / 4.
    #[serde(default)]
    pub eta_halfwidth: Option<f64>,
    /// Minimum |phi_1(x)| / (|grad phi_1(0)| |x|) for transition targets.
    #[serde(default = "default_badset_tol")]
    pub badset_tol: f64,
}

fn default_badset_tol() -> f64 {
    0.05
}

fn default_cone() -> f64 {
    0.5
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            epsilon: None,
            x_minus_prime: Vec::new(),
            chart_radius: None,
            cone_aperture: default_cone(),
            eta_halfwidth: None,
            badset_tol: default_badset_tol(),
        }
    }
}

impl ScenarioConfig {
    pub fn with_epsilon(eps: f64) -> Self {
        ScenarioConfig {
            epsilon: Some(eps),
            ..Default::default()
        }
    }
}

/// A point rho_- on Lambda_- over H_-, with the charts and data the
/// transition construction needs.
#[derive(Debug, Clone)]
pub struct TransitionScenario {
    pub model: HamiltonianModel,
    pub epsilon: f64,
    pub rho_minus: PhasePoint,
    pub eta_prime_box: BoxDomain,
    pub spectral: SpectralParams,
    pub phi_plus: LagrangianChart,
    pub phi_minus: LagrangianChart,
    /// Leading coefficient of the Lambda_- trajectory through rho_-.
    pub g1_minus: Vec<f64>,
    pub cone_aperture: f64,
    pub chart_radius: f64,
    pub badset_tol: f64,
}

impl TransitionScenario {
    pub fn new(model: &HamiltonianModel, cfg: &ScenarioConfig, spectral: SpectralParams) -> Result<Self> {
        let d = model.dim();
        let radius = cfg.chart_radius.unwrap_or(0.9 * model.validity_radius());
        if !(radius > 0.0) || radius > model.validity_radius() {
            return Err(Error::validation(
                "chart_radius",
                "must be positive and inside the validity radius",
            ));
        }
        let eps = cfg.epsilon.unwrap_or(0.1 * radius);
        if !(eps > 0.0 && eps < radius) {
            return Err(Error::validation("epsilon", "must lie in (0, chart_radius)"));
        }
        let xp = if cfg.x_minus_prime.is_empty() {
            vec![0.0; d - 1]
        } else {
            cfg.x_minus_prime.clone()
        };
        if xp.len() + 1 != d {
            return Err(Error::validation("x_minus_prime", format!("need {} entries", d - 1)));
        }
        if !(cfg.badset_tol >= 0.0) {
            return Err(Error::validation("badset_tol", "must be nonnegative"));
        }
        if !(cfg.cone_aperture > 0.0) {
            return Err(Error::validation("cone_aperture", "must be positive"));
        }
        let dom = BoxDomain::cube(d, radius);
        let phi_plus = manifold_generating_function(model, true, &dom, 1e-8)?;
        let phi_minus = manifold_generating_function(model, false, &dom, 1e-8)?;
        let mut x = vec![eps];
        x.extend(&xp);
        let xi = phi_minus.gradient(&x)?;
        let rho_minus = PhasePoint::new(x.clone(), xi.clone());
        let (lt, _) = manifold_leading(model, &phi_minus, &x)?;
        let g1 = lt.g1;
        let gn = norm(&g1);
        if !(gn > 0.0) {
            return Err(Error::numerical("scenario", "g_1^-(rho_-) vanishes: rho_- lies on the bad set"));
        }
        if norm(&g1[1..]) > 1e-8 * gn {
            return Err(Error::validation(
                "x_minus_prime",
                "g_1^- is not collinear to the x_1 axis; rotate coordinates",
            ));
        }
        let hw = cfg.eta_halfwidth.unwrap_or(0.25 * eps);
        let eta_prime_box = BoxDomain {
            lo: xi[1..].iter().map(|v| v - hw).collect(),
            hi: xi[1..].iter().map(|v| v + hw).collect(),
        };
        Ok(TransitionScenario {
            model: model.clone(),
            epsilon: eps,
            rho_minus,
            eta_prime_box,
            spectral,
            phi_plus,
            phi_minus,
            g1_minus: g1,
            cone_aperture: cfg.cone_aperture,
            chart_radius: radius,
            badset_tol: cfg.badset_tol,
        })
    }

    /// Same geometry, another spectral parameter.
    pub fn with_spectral(&self, spectral: SpectralParams) -> Self {
        TransitionScenario {
            spectral,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn xi_minus_prime(&self) -> Vec<f64> {
        self.rho_minus.xi[1..].to_vec()
    }

    pub fn x_minus_prime(&self) -> Vec<f64> {
        self.rho_minus.x[1..].to_vec()
    }

    fn check_eta(&self, eta: &[f64]) -> Result<()> {
        if eta.len() + 1 != self.dim() {
            return Err(Error::validation("eta_prime", format!("need {} entries", self.dim() - 1)));
        }
        Ok(())
    }
}

pub(crate) fn phase_opts() -> OdeOptions {
    OdeOptions {
        rtol: 1e-12,
        atol: 1e-15,
        ..Default::default()
    }
}

/// Point of a psi_eta' characteristic: parameters (s, w') and the data
/// carried along it.
#[derive(Debug, Clone)]
pub struct PsiRay {
    pub s: f64,
    pub w: Vec<f64>,
    pub point: PhasePoint,
    pub value: f64,
    pub hess: DMatrix<f64>,
    /// d x / d(s, w') at the end point.
    pub dx: DMatrix<f64>,
}

/// psi_eta' by characteristics issued from H_-:
/// (epsilon, w', f_-(epsilon, w', eta'), eta').
pub struct PsiChart {
    model: HamiltonianModel,
    epsilon: f64,
    eta: Vec<f64>,
    opts: OdeOptions,
}

impl PsiChart {
    pub fn new(model: &HamiltonianModel, epsilon: f64, eta: &[f64]) -> Self {
        PsiChart {
            model: model.clone(),
            epsilon,
            eta: eta.to_vec(),
            opts: phase_opts(),
        }
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Initial point over (epsilon, w') and the tangent frame d/dw'.
    pub fn start(&self, w: &[f64]) -> Result<(PhasePoint, DMatrix<f64>)> {
        let d = self.model.dim();
        let mut x = vec![self.epsilon];
        x.extend(w);
        let f = real_branch(&self.model, &x, &self.eta, false)?;
        let mut xi = vec![f];
        xi.extend(&self.eta);
        let g = self.model.grad_p0(&x, &xi);
        let dp1 = g[d];
        if dp1.abs() < 1e-300 {
            return Err(Error::Fold { point: x });
        }
        let mut fr = DMatrix::zeros(2 * d, d - 1);
        for k in 0..d - 1 {
            fr[(k + 1, k)] = 1.0;
            fr[(d, k)] = -g[k + 1] / dp1;
        }
        Ok((PhasePoint::new(x, xi), fr))
    }

    pub fn ray(&self, s: f64, w: &[f64]) -> Result<PsiRay> {
        let d = self.model.dim();
        let (p0, fr0) = self.start(w)?;
        let out = flow_general(&self.model, &p0, s, Some(&fr0), &self.opts)?;
        let fr = out.frame.unwrap();
        let hf = self.model.hamilton_field(&out.point.x, &out.point.xi);
        let mut xm = DMatrix::zeros(d, d);
        let mut xim = DMatrix::zeros(d, d);
        for i in 0..d {
            xm[(i, 0)] = hf[i];
            xim[(i, 0)] = hf[d + i];
            for k in 0..d - 1 {
                xm[(i, k + 1)] = fr[(i, k)];
                xim[(i, k + 1)] = fr[(d + i, k)];
            }
        }
        let inv = xm
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Fold { point: out.point.x.clone() })?;
        Ok(PsiRay {
            s,
            w: w.to_vec(),
            value: dot(w, &self.eta) + out.action,
            hess: sym(&xim * inv),
            dx: xm,
            point: out.point,
        })
    }

    fn default_guess(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let lam = self.model.lambdas();
        let s = if x[0] > 0.0 {
            (self.epsilon / x[0]).ln() / lam[0]
        } else {
            0.0
        };
        let w = x[1..].iter().zip(&lam[1..]).map(|(v, l)| v * (l * s).exp()).collect();
        (s, w)
    }

    /// The characteristic through x, by Newton over (s, w').
    pub fn solve(&self, x: &[f64], guess: Option<(f64, Vec<f64>)>) -> Result<PsiRay> {
        let d = self.model.dim();
        let (mut s, mut w) = guess.unwrap_or_else(|| self.default_guess(x));
        let tol = 1e-14 + 1e-12 * norm(x);
        let mut prev: Option<(f64, Vec<f64>)> = None;
        for _ in 0..80 {
            let r = match self.ray(s, &w) {
                Ok(r) => r,
                Err(Error::DomainEscape { .. }) | Err(Error::Numerical { .. }) => {
                    let (ps, pw) = prev.clone().ok_or_else(|| {
                        Error::numerical("eikonal_psi", format!("no characteristic reaches x = {x:?}"))
                    })?;
                    s = 0.5 * (s + ps);
                    w.iter_mut().zip(&pw).for_each(|(a, b)| *a = 0.5 * (*a + b));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let g: Vec<f64> = r.point.x.iter().zip(x).map(|(a, b)| a - b).collect();
            if norm(&g) <= tol {
                return Ok(r);
            }
            let step = r
                .dx
                .clone()
                .lu()
                .solve(&DVector::from_vec(g))
                .ok_or_else(|| Error::Fold { point: x.to_vec() })?;
            prev = Some((s, w.clone()));
            let damp = (0.5 / step[0].abs()).min(1.0);
            s -= damp * step[0];
            for k in 0..d - 1 {
                w[k] -= damp * step[k + 1];
            }
        }
        Err(Error::numerical(
            "eikonal_psi",
            format!("characteristic search for x = {x:?} did not converge"),
        ))
    }

    /// Parameter s on the ray w' where psi takes the value c.
    pub fn level_crossing(&self, w: &[f64], c: f64, s0: f64) -> Result<PsiRay> {
        let mut s = s0;
        for _ in 0..60 {
            let r = self.ray(s, w)?;
            let f = r.value - c;
            let dp = self.model.dp_dxi(&r.point.x, &r.point.xi);
            let rate = dot(&r.point.xi, &dp);
            if f.abs() <= 1e-15 + 1e-13 * c.abs() {
                return Ok(r);
            }
            if rate == 0.0 {
                break;
            }
            s -= (f / rate).clamp(-0.5, 0.5);
        }
        Err(Error::numerical("eikonal_psi", "level set of psi not reached on this ray"))
    }
}

impl ChartEval for PsiChart {
    fn eval(&self, x: &[f64]) -> Result<ChartPoint> {
        let r = self.solve(x, None)?;
        Ok(ChartPoint {
            value: r.value,
            grad: r.point.xi,
            hess: r.hess,
        })
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "method": "characteristics from x_1 = epsilon",
            "epsilon": self.epsilon,
            "eta_prime": self.eta,
        })
    }
}

/// psi_eta' as a chart on a box around rho_-.
pub fn eikonal_psi(sc: &TransitionScenario, eta: &[f64]) -> Result<LagrangianChart> {
    sc.check_eta(eta)?;
    let pc = PsiChart::new(&sc.model, sc.epsilon, eta);
    let inter = intersection_point(sc, eta)?;
    Ok(LagrangianChart::new(
        ChartKind::PsiEta,
        BoxDomain::cube(sc.dim(), sc.chart_radius),
        Some(inter.rho_eta),
        Arc::new(pc),
    ))
}

#[derive(Debug, Clone)]
pub struct Intersection {
    pub x_of_eta: Vec<f64>,
    pub rho_eta: PhasePoint,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves grad' phi_-(epsilon, x') = eta' by Newton from x_-'.
pub fn intersection_point(sc: &TransitionScenario, eta: &[f64]) -> Result<Intersection> {
    sc.check_eta(eta)?;
    let d = sc.dim();
    let mut xp = sc.x_minus_prime();
    let mut res = f64::INFINITY;
    for it in 0..50 {
        let mut x = vec![sc.epsilon];
        x.extend(&xp);
        let cp = sc.phi_minus.eval(&x)?;
        let r: Vec<f64> = cp.grad[1..].iter().zip(eta).map(|(a, b)| a - b).collect();
        res = norm(&r);
        if res <= 1e-12 {
            let f = real_branch(&sc.model, &x, eta, false)?;
            if (f - cp.grad[0]).abs() > 1e-8 {
                return Err(Error::with_residual(
                    "intersection_point",
                    "d_1 phi_- differs from f_-",
                    (f - cp.grad[0]).abs(),
                ));
            }
            let mut xi = vec![f];
            xi.extend(eta);
            return Ok(Intersection {
                x_of_eta: x.clone(),
                rho_eta: PhasePoint::new(x, xi),
                residual: res,
                iterations: it,
            });
        }
        let h = cp.hess.view((1, 1), (d - 1, d - 1)).into_owned();
        let step = h
            .lu()
            .solve(&DVector::from_vec(r))
            .ok_or_else(|| Error::numerical("intersection_point", "singular transverse Hessian"))?;
        for k in 0..d - 1 {
            xp[k] -= step[k];
        }
    }
    Err(Error::with_residual(
        "intersection_point",
        "Newton did not converge in 50 steps",
        res,
    ))
}

/// x'(eta').eta' - phi_-(x(eta')).
pub fn psi_tilde(sc: &TransitionScenario, eta: &[f64]) -> Result<f64> {
    let inter = intersection_point(sc, eta)?;
    Ok(dot(&inter.x_of_eta[1..], eta) - sc.phi_minus.value(&inter.x_of_eta)?)
}

/// Generating function Phi = psi + a (psi - c)^2 / 2 of Lambda_0.
pub struct Lambda0Eval {
    psi: Arc<PsiChart>,
    a: f64,
    c: f64,
}

impl Lambda0Eval {
    pub fn eval_with(&self, x: &[f64], guess: Option<(f64, Vec<f64>)>) -> Result<(ChartPoint, PsiRay)> {
        let r = self.psi.solve(x, guess)?;
        let m = 1.0 + self.a * (r.value - self.c);
        let xi = DVector::from_column_slice(&r.point.xi);
        let hess = &r.hess * m + &xi * xi.transpose() * self.a;
        let cp = ChartPoint {
            value: r.value + 0.5 * self.a * (r.value - self.c).powi(2),
            grad: r.point.xi.iter().map(|v| m * v).collect(),
            hess,
        };
        Ok((cp, r))
    }
}

impl ChartEval for Lambda0Eval {
    fn eval(&self, x: &[f64]) -> Result<ChartPoint> {
        Ok(self.eval_with(x, None)?.0)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "generating_function": "psi + a (psi - c)^2 / 2",
            "a": self.a,
            "c": self.c,
            "psi": self.psi.describe(),
        })
    }
}

/// Lambda_0 with the diagnostics of its construction.
pub struct Lambda0 {
    pub chart: LagrangianChart,
    pub a: f64,
    /// psi on Gamma_0.
    pub level: f64,
    pub rho_eta: PhasePoint,
    /// |d xi| / |d x| on T Lambda_0 at rho_eta.
    pub xi_ratio: f64,
    /// Angle between H_p(rho_eta) and T Lambda_0, degrees.
    pub angle_deg: f64,
    pub(crate) eval: Arc<Lambda0Eval>,
    pub(crate) psi: Arc<PsiChart>,
}

pub fn build_lambda0(sc: &TransitionScenario, eta: &[f64]) -> Result<Lambda0> {
    let d = sc.dim();
    let inter = intersection_point(sc, eta)?;
    let psi = Arc::new(PsiChart::new(&sc.model, sc.epsilon, eta));
    let r0 = psi.ray(0.0, &inter.x_of_eta[1..])?;
    let xi = &r0.point.xi;
    let a = -r0.hess[(0, 0)] / (xi[0] * xi[0]);
    let c = r0.value;
    let xiv = DVector::from_column_slice(xi);
    let hphi = &r0.hess + &xiv * xiv.transpose() * a;
    let xi_ratio = hphi.clone().svd(false, false).singular_values.max();
    let mut basis = DMatrix::zeros(2 * d, d);
    for i in 0..d {
        basis[(i, i)] = 1.0;
        for j in 0..d {
            basis[(d + i, j)] = hphi[(i, j)];
        }
    }
    let q = basis.qr().q();
    let hp = DVector::from_vec(sc.model.hamilton_field(&r0.point.x, xi));
    let v = &hp / hp.norm();
    let perp = &v - &q * (q.transpose() * &v);
    let sin = perp.norm().min(1.0);
    if sin < 1e-6 {
        return Err(Error::with_residual(
            "build_lambda0",
            "H_p is tangent to Lambda_0 at rho_eta",
            sin,
        ));
    }
    let eval = Arc::new(Lambda0Eval {
        psi: psi.clone(),
        a,
        c,
    });
    let chart = LagrangianChart::new(
        ChartKind::Lambda0,
        BoxDomain::cube(d, sc.chart_radius),
        Some(inter.rho_eta.clone()),
        eval.clone(),
    );
    Ok(Lambda0 {
        chart,
        a,
        level: c,
        rho_eta: inter.rho_eta,
        xi_ratio,
        angle_deg: sin.asin().to_degrees(),
        eval,
        psi,
    })
}

#[derive(Debug, Clone)]
pub struct PhaseValue {
    pub t: f64,
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: DMatrix<f64>,
    /// Base point on Lambda_0 (x component).
    pub base: Vec<f64>,
    pub(crate) psi_params: (f64, Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalTime {
    pub t_star: f64,
    pub second_derivative: f64,
    /// The same time read off the psi characteristic: tau(x) - s_c(w').
    pub t_star_characteristic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOptions {
    pub t_min: f64,
    pub t_max: f64,
    pub n_t: usize,
    pub x_domain: BoxDomain,
    pub n_x: usize,
    pub tol: f64,
}

impl PhaseOptions {
    pub fn default_for(sc: &TransitionScenario, eta: &[f64]) -> Result<Self> {
        let d = sc.dim();
        let eps = sc.epsilon;
        let inter = intersection_point(sc, eta)?;
        let mut lo = vec![0.3 * eps];
        let mut hi = vec![0.6 * eps];
        for k in 1..d {
            let c = 0.5 * inter.x_of_eta[k];
            lo.push(c - 0.1 * eps);
            hi.push(c + 0.1 * eps);
        }
        let l1 = sc.model.lambda1();
        Ok(PhaseOptions {
            t_min: 2.5 / l1,
            // past ~8/lambda_1 the forward flow amplifies integration noise
            // by e^{lambda_d t} beyond what Newton can resolve
            t_max: 8.0 / l1,
            n_t: 24,
            x_domain: BoxDomain::new(lo, hi)?,
            n_x: 3,
            tol: 1e-6,
        })
    }
}

/// phi(t, x, eta') on a t-grid times an x-grid, with its expansion.
pub struct PhaseFamily {
    pub eta_prime: Vec<f64>,
    pub psi_chart: LagrangianChart,
    pub lambda0: Lambda0,
    pub t_grid: Vec<f64>,
    pub x_grid: Vec<Vec<f64>>,
    /// values[i][k] = phi(t_grid[i], x_grid[k]).
    pub values: Vec<Vec<f64>>,
    pub gradients: Vec<Vec<Vec<f64>>>,
    pub psi_tilde: f64,
    /// phi - phi_+ - psi_tilde fitted in t per x-grid point; the mu = 0
    /// term is the defect of the limit.
    pub expansion: ExpandiblePolySeries,
    pub eikonal_residual: f64,
    pub normalization_residual: f64,
    model: HamiltonianModel,
    epsilon: f64,
    opts: OdeOptions,
}

impl PhaseFamily {
    /// Builds the evaluator without any grid.
    pub fn evaluator(sc: &TransitionScenario, eta: &[f64]) -> Result<Self> {
        let lambda0 = build_lambda0(sc, eta)?;
        let psi_chart = LagrangianChart::new(
            ChartKind::PsiEta,
            BoxDomain::cube(sc.dim(), sc.chart_radius),
            Some(lambda0.rho_eta.clone()),
            lambda0.psi.clone(),
        );
        Ok(PhaseFamily {
            eta_prime: eta.to_vec(),
            psi_chart,
            lambda0,
            t_grid: Vec::new(),
            x_grid: Vec::new(),
            values: Vec::new(),
            gradients: Vec::new(),
            psi_tilde: psi_tilde(sc, eta)?,
            expansion: ExpandiblePolySeries {
                terms: Vec::new(),
                value_dim: 0,
                tail_bound: 0.0,
                residual_rms: 0.0,
                spatial_dim: None,
            },
            eikonal_residual: 0.0,
            normalization_residual: 0.0,
            model: sc.model.clone(),
            epsilon: sc.epsilon,
            opts: phase_opts(),
        })
    }

    /// phi at (t, x) given a nearby base point on Lambda_0.
    fn solve_at(
        &self,
        t: f64,
        x: &[f64],
        y0: &[f64],
        psi_guess: Option<(f64, Vec<f64>)>,
    ) -> Result<PhaseValue> {
        let d = self.model.dim();
        let mut y = y0.to_vec();
        let mut guess = psi_guess;
        let mut prev: Option<Vec<f64>> = None;
        // the flow carries relative noise near 1e-13, amplified along the
        // expanding directions: accept a stalled residual a little above tol
        let tol = 1e-14 + 1e-12 * norm(x);
        let step_cap = 0.2 * self.epsilon;
        let mut last_res = f64::INFINITY;
        for _ in 0..60 {
            let attempt = self.lambda0.eval.eval_with(&y, guess.clone()).and_then(|(cp, r)| {
                let mut frame = DMatrix::zeros(2 * d, d);
                for i in 0..d {
                    frame[(i, i)] = 1.0;
                    for j in 0..d {
                        frame[(d + i, j)] = cp.hess[(i, j)];
                    }
                }
                let start = PhasePoint::new(y.clone(), cp.grad.clone());
                let out = flow_general(&self.model, &start, t, Some(&frame), &self.opts)?;
                Ok((cp, r, start, out))
            });
            let (cp, r, start, out) = match attempt {
                Ok(v) => v,
                Err(Error::DomainEscape { .. }) | Err(Error::Numerical { .. }) if prev.is_some() => {
                    let p = prev.as_ref().unwrap();
                    y.iter_mut().zip(p).for_each(|(a, b)| *a = 0.5 * (*a + b));
                    continue;
                }
                Err(e) => return Err(e),
            };
            guess = Some((r.s, r.w.clone()));
            let fr = out.frame.unwrap();
            let xm = fr.rows(0, d).into_owned();
            let xim = fr.rows(d, d).into_owned();
            let g: Vec<f64> = out.point.x.iter().zip(x).map(|(a, b)| a - b).collect();
            let inv = xm.try_inverse().ok_or_else(|| Error::Fold { point: x.to_vec() })?;
            let res = norm(&g);
            let stalled = res <= 1e3 * tol && res > 0.25 * last_res;
            last_res = res;
            if res <= tol || stalled {
                let p = self.model.p0(&start.x, &start.xi);
                return Ok(PhaseValue {
                    t,
                    value: cp.value + out.action - t * p,
                    grad: out.point.xi,
                    hess: sym(&xim * &inv),
                    base: y,
                    psi_params: (r.s, r.w),
                });
            }
            let step = &inv * DVector::from_vec(g);
            let sn = step.norm();
            let damp = if sn > step_cap { step_cap / sn } else { 1.0 };
            prev = Some(y.clone());
            for i in 0..d {
                y[i] -= damp * step[i];
            }
        }
        Err(Error::numerical(
            "evolve_phase",
            format!("no point of Lambda_t over x = {x:?} at t = {t} (projection fold?)"),
        ))
    }

    /// The point of Lambda_{t*} over x, t* the critical time, found on the
    /// psi characteristic through x.
    fn critical_seed(&self, x: &[f64]) -> Result<(f64, PhaseValue)> {
        let psi = &self.lambda0.psi;
        let rx = psi.solve(x, None).map_err(|_| {
            Error::numerical("critical_time", format!("x = {x:?} outside reachable cone"))
        })?;
        let rc = psi.level_crossing(&rx.w, self.lambda0.level, 0.0).map_err(|_| {
            Error::numerical("critical_time", format!("x = {x:?} outside reachable cone"))
        })?;
        let t_star = rx.s - rc.s;
        let pv = self.solve_at(t_star, x, &rc.point.x, Some((rc.s, rc.w.clone())))?;
        Ok((t_star, pv))
    }

    /// phi(t, x) by continuation in t from the critical time.
    pub fn phase_at(&self, t: f64, x: &[f64]) -> Result<PhaseValue> {
        let (_, pv) = self.critical_seed(x)?;
        self.continue_to(pv, t, x)
    }

    fn continue_to(&self, mut pv: PhaseValue, t: f64, x: &[f64]) -> Result<PhaseValue> {
        let dt_max = 0.25 / self.model.lambda1();
        let mut last_base: Option<(f64, Vec<f64>)> = None;
        while (t - pv.t).abs() > 0.0 {
            let dt = (t - pv.t).clamp(-dt_max, dt_max);
            let tn = if (t - pv.t).abs() <= dt_max { t } else { pv.t + dt };
            // linear predictor from the previous base point
            let guess: Vec<f64> = match &last_base {
                Some((tp, yp)) if (pv.t - tp).abs() > 0.0 => {
                    let r = (tn - pv.t) / (pv.t - tp);
                    pv.base.iter().zip(yp).map(|(a, b)| a + r * (a - b)).collect()
                }
                _ => pv.base.clone(),
            };
            let next = self.solve_at(tn, x, &guess, Some(pv.psi_params.clone()))?;
            last_base = Some((pv.t, pv.base.clone()));
            pv = next;
        }
        Ok(pv)
    }

    /// Values at every grid time for one x, in increasing t.
    fn sweep(&self, x: &[f64], times: &[f64]) -> Result<Vec<PhaseValue>> {
        let (_, mut pv) = self.critical_seed(x)?;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            pv = self.continue_to(pv, t, x)?;
            out.push(pv.clone());
        }
        Ok(out)
    }

    /// d_t phi from a centered difference.
    pub fn dt_phase(&self, pv: &PhaseValue, x: &[f64]) -> Result<f64> {
        let h = 1e-4 / self.model.lambda1();
        let a = self.solve_at(pv.t + h, x, &pv.base, Some(pv.psi_params.clone()))?;
        let b = self.solve_at(pv.t - h, x, &pv.base, Some(pv.psi_params.clone()))?;
        Ok((a.value - b.value) / (2.0 * h))
    }

    pub fn critical_time(&self, x: &[f64]) -> Result<CriticalTime> {
        let (t_char, mut pv) = self.critical_seed(x)?;
        let mut t = t_char;
        let tt = |pv: &PhaseValue| {
            let g = self.model.grad_p0(x, &pv.grad);
            let d = x.len();
            let (px, pxi) = (&g[..d], &g[d..]);
            let hp = &pv.hess * DVector::from_column_slice(pxi);
            dot(pxi, px) + dot(pxi, hp.as_slice())
        };
        for _ in 0..20 {
            let f = -self.model.p0(x, &pv.grad);
            if f.abs() < 1e-15 {
                break;
            }
            let d2 = tt(&pv);
            if !(d2 > 0.0) {
                return Err(Error::numerical("critical_time", "d_tt phi is not positive"));
            }
            t -= (f / d2).clamp(-0.5, 0.5);
            pv = self.solve_at(t, x, &pv.base, Some(pv.psi_params.clone()))?;
        }
        Ok(CriticalTime {
            t_star: t,
            second_derivative: tt(&pv),
            t_star_characteristic: t_char,
        })
    }

    /// JSON dump: grid axes, values and gradients.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "eta_prime": self.eta_prime,
            "psi_tilde": self.psi_tilde,
            "a": self.lambda0.a,
            "level": self.lambda0.level,
            "t_grid": self.t_grid,
            "x_grid": self.x_grid,
            "values": self.values,
            "gradients": self.gradients,
            "eikonal_residual": self.eikonal_residual,
            "normalization_residual": self.normalization_residual,
            "expansion": self.expansion.to_json(),
        })
    }
}

/// Lambda_t = exp(t H_p)(Lambda_0) and its phase on the grid of `opts`.
pub fn evolve_phase(sc: &TransitionScenario, eta: &[f64], opts: &PhaseOptions) -> Result<PhaseFamily> {
    let l1 = sc.model.lambda1();
    if !(opts.t_max > opts.t_min && opts.t_min >= 0.0) || opts.t_max > 12.0 / l1 + 1e-12 {
        return Err(Error::validation("t_max", "need 0 <= t_min < t_max <= 12 / lambda_1"));
    }
    if opts.n_t < 2 || opts.n_x < 1 {
        return Err(Error::validation("n_t", "grid too small"));
    }
    let mut fam = PhaseFamily::evaluator(sc, eta)?;
    let t_grid: Vec<f64> = (0..opts.n_t)
        .map(|i| opts.t_min + (opts.t_max - opts.t_min) * i as f64 / (opts.n_t - 1) as f64)
        .collect();
    let x_grid = opts.x_domain.grid(opts.n_x);
    let fam_ref = &fam;
    let cols: Vec<(Vec<PhaseValue>, f64)> = x_grid
        .par_iter()
        .map(|x| {
            let vals = fam_ref.sweep(x, &t_grid)?;
            let mut worst = 0.0f64;
            for pv in &vals {
                let dt = fam_ref.dt_phase(pv, x)?;
                worst = worst.max((dt + sc.model.p0(x, &pv.grad)).abs());
            }
            Ok((vals, worst))
        })
        .collect::<Result<Vec<_>>>()?;
    let eikonal_residual = cols.iter().map(|c| c.1).fold(0.0, f64::max);
    if eikonal_residual > opts.tol {
        return Err(Error::with_residual(
            "evolve_phase",
            format!("eikonal residual {eikonal_residual:.3e} exceeds {:.3e}", opts.tol),
            eikonal_residual,
        ));
    }
    let nt = t_grid.len();
    let values: Vec<Vec<f64>> = (0..nt)
        .map(|i| cols.iter().map(|c| c.0[i].value).collect())
        .collect();
    let gradients: Vec<Vec<Vec<f64>>> = (0..nt)
        .map(|i| cols.iter().map(|c| c.0[i].grad.clone()).collect())
        .collect();

    // normalization on H_-: phi(t*, x) = x'.eta'
    let inter = intersection_point(sc, eta)?;
    let mut norm_res = 0.0f64;
    for shift in [-0.05, 0.0, 0.05] {
        let mut x = inter.x_of_eta.clone();
        if x.len() > 1 {
            x[1] += shift * sc.epsilon;
        } else if shift != 0.0 {
            continue;
        }
        let ct = fam.critical_time(&x)?;
        let pv = fam.phase_at(ct.t_star, &x)?;
        norm_res = norm_res.max((pv.value - dot(&x[1..], eta)).abs());
    }

    let psi_t = fam.psi_tilde;
    let phip: Vec<f64> = x_grid
        .iter()
        .map(|x| sc.phi_plus.value(x))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<(f64, Vec<f64>)> = t_grid
        .iter()
        .zip(&values)
        .map(|(t, v)| (*t, v.iter().zip(&phip).map(|(a, b)| a - b - psi_t).collect()))
        .collect();
    let ladder = mu_ladder(sc.model.lambdas(), 3.0 * l1 + 1e-9)?;
    let deg = if ladder.is_resonant() { 1 } else { 0 };
    let expansion = fit_expandible(&samples, &ladder.exponents, deg)?;

    fam.t_grid = t_grid;
    fam.x_grid = x_grid;
    fam.values = values;
    fam.gradients = gradients;
    fam.expansion = expansion;
    fam.eikonal_residual = eikonal_residual;
    fam.normalization_residual = norm_res;
    Ok(fam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_barrier_model, spectral_params};
    use crate::poly::Poly;
    use num_complex::Complex64;

    fn scenario(lams: &[f64], w: Poly, eps: f64) -> TransitionScenario {
        let m = make_barrier_model(lams, &w).unwrap();
        let sp = spectral_params(Complex64::new(0.0, 0.0), 0.01, 1.0, 1.0, 0.1, lams).unwrap();
        TransitionScenario::new(&m, &ScenarioConfig::with_epsilon(eps), sp).unwrap()
    }

    fn quad2() -> TransitionScenario {
        scenario(&[1.0, 2.0], Poly::zero(2), 0.1)
    }

    #[test]
    fn scenario_data() {
        let sc = quad2();
        assert!((sc.rho_minus.xi[0] + 0.05).abs() < 1e-15);
        assert!((sc.g1_minus[0] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn psi_boundary_and_branch() {
        let sc = quad2();
        let psi = eikonal_psi(&sc, &[0.0]).unwrap();
        let g = psi.gradient(&[0.1, 0.0]).unwrap();
        assert!((g[0] + 0.05).abs() < 1e-12 && g[1].abs() < 1e-12);
        let psi = eikonal_psi(&sc, &[0.01]).unwrap();
        for xp in [-0.02, 0.0, 0.015] {
            let p = psi.eval(&[0.1, xp]).unwrap();
            assert!((p.grad[1] - 0.01).abs() < 1e-11);
            assert!((p.value - 0.01 * xp).abs() < 1e-13);
        }
        // eikonal residual away from H_-
        for x in [[0.07, 0.01], [0.05, -0.01], [0.12, 0.0]] {
            let g = psi.gradient(&x).unwrap();
            assert!(sc.model.p0(&x, &g).abs() < 1e-10);
        }
    }

    #[test]
    fn psi_in_one_dimension_is_phi_minus() {
        let sc = scenario(&[1.5], Poly::monomial(vec![3], 0.1), 0.1);
        let psi = eikonal_psi(&sc, &[]).unwrap();
        let c = psi.value(&[0.1]).unwrap() - sc.phi_minus.value(&[0.1]).unwrap();
        for x in [0.04, 0.07, 0.13] {
            let d = psi.value(&[x]).unwrap() - sc.phi_minus.value(&[x]).unwrap();
            assert!((d - c).abs() < 1e-11, "{x}");
        }
        let pt = psi_tilde(&sc, &[]).unwrap();
        assert!((pt + sc.phi_minus.value(&[0.1]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn intersection_examples() {
        let sc = quad2();
        let i0 = intersection_point(&sc, &sc.xi_minus_prime()).unwrap();
        assert!(i0.x_of_eta[1].abs() < 1e-14);
        assert!((i0.rho_eta.xi[0] - sc.rho_minus.xi[0]).abs() < 1e-14);
        let i1 = intersection_point(&sc, &[0.003]).unwrap();
        assert!((i1.x_of_eta[1] + 0.003).abs() < 1e-12);
        assert!(i1.residual <= 1e-10);

        // perturbed: slope of x'(eta') close to 2 / lambda_2
        let sc = scenario(&[1.0, 2.0], Poly::monomial(vec![3, 0], 0.05), 0.1);
        let e0 = sc.xi_minus_prime()[0];
        let h = 1e-3;
        let a = intersection_point(&sc, &[e0 + h]).unwrap().x_of_eta[1];
        let b = intersection_point(&sc, &[e0 - h]).unwrap().x_of_eta[1];
        let slope = ((a - b) / (2.0 * h)).abs();
        assert!((slope - 1.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn psi_tilde_quadratic() {
        let sc = quad2();
        let v = psi_tilde(&sc, &[0.0]).unwrap();
        assert!((v - 0.01 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn lambda0_frame() {
        let sc = quad2();
        let l0 = build_lambda0(&sc, &[0.0]).unwrap();
        assert!(l0.xi_ratio <= 0.2, "{}", l0.xi_ratio);
        // H_p on Lambda_- over the x_1 axis has slope lambda_1 / 2
        assert!((l0.angle_deg - 0.5f64.atan().to_degrees()).abs() < 1e-6, "{}", l0.angle_deg);
        // Gamma_0 lies in Lambda_0: Phi = c and grad Phi = grad psi there
        let psi = PsiChart::new(&sc.model, sc.epsilon, &[0.0]);
        for w in [-0.02, 0.01, 0.03] {
            let r = psi.level_crossing(&[w], l0.level, 0.0).unwrap();
            let cp = l0.chart.eval(&r.point.x).unwrap();
            assert!((cp.value - l0.level).abs() < 1e-8);
            assert!((cp.grad[0] - r.point.xi[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn critical_time_on_axis() {
        let sc = quad2();
        let fam = PhaseFamily::evaluator(&sc, &[0.0]).unwrap();
        for a in [0.05, 0.03] {
            let ct = fam.critical_time(&[a, 0.0]).unwrap();
            assert!((ct.t_star - (0.1f64 / a).ln()).abs() < 1e-8, "{a}: {}", ct.t_star);
            assert!(ct.second_derivative > 0.0);
            assert!((ct.t_star - ct.t_star_characteristic).abs() < 1e-8);
            // grad psi = grad_x phi at the critical time
            let pv = fam.phase_at(ct.t_star, &[a, 0.0]).unwrap();
            let g = fam.psi_chart.gradient(&[a, 0.0]).unwrap();
            assert!((pv.grad[0] - g[0]).abs() < 1e-8 && (pv.grad[1] - g[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn evolved_phase_limit() {
        let sc = quad2();
        let eta = [0.004];
        let mut opts = PhaseOptions::default_for(&sc, &eta).unwrap();
        opts.n_x = 2;
        opts.n_t = 16;
        let fam = evolve_phase(&sc, &eta, &opts).unwrap();
        assert!(fam.eikonal_residual <= 1e-6);
        assert!(fam.normalization_residual <= 1e-8);
        // psi_tilde = x'(eta') eta' - phi_-(x(eta')) with x' = -eta'
        let want = -0.004 * 0.004 + (0.01 / 4.0 + 2.0 * 0.004 * 0.004 / 4.0);
        assert!((fam.psi_tilde - want).abs() < 1e-15);
        let first = &fam.expansion.terms[0];
        assert_eq!(first.mu, 0.0);
        let defect = first.coeffs.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(defect <= 1e-6, "{defect}");
        let next = &fam.expansion.terms[1];
        assert!((next.mu - 1.0).abs() < 1e-6);
        assert!(next.coeffs[0].iter().all(|v| v.abs() > 1e-4));
    }
}
