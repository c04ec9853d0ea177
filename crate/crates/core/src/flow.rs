//! Hamiltonian flow with variational frames, and the invariant-manifold
//! generating functions phi_+ / phi_-.

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::asymptotics::{fit_expandible, leading_term, mu_ladder, ExpandiblePolySeries, LeadingTerm};
use crate::error::{Error, Result};
use crate::model::{linearize, HamiltonianModel, ModelKind, PhasePoint};
use crate::ode::{solve_at, OdeOptions};
use crate::poly::{exponents_of_degree, Poly};

/// Omega = [[0, I], [-I, 0]].
pub fn omega(d: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        w[(i, d + i)] = 1.0;
        w[(d + i, i)] = -1.0;
    }
    w
}

/// max |J^T Omega J - Omega|.
pub fn symplectic_defect(j: &DMatrix<f64>) -> f64 {
    let d = j.nrows() / 2;
    let w = omega(d);
    (j.transpose() * &w * j - &w).amax()
}

#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub point: PhasePoint,
    /// Propagated tangent frame (2d x k) if one was supplied.
    pub frame: Option<DMatrix<f64>>,
    /// int xi . dx along the path.
    pub action: f64,
}

fn pack(point: &PhasePoint, frame: Option<&DMatrix<f64>>) -> Vec<f64> {
    let mut y = point.to_vec();
    if let Some(f) = frame {
        y.extend(f.iter());
    }
    y.push(0.0);
    y
}

fn unpack(y: &[f64], d: usize, k: Option<usize>) -> FlowOutput {
    let n = 2 * d;
    let point = PhasePoint::from_slice(&y[..n]);
    let k_given = k.is_some();
    let k = k.unwrap_or(0);
    let frame = if k_given {
        Some(DMatrix::from_column_slice(n, k, &y[n..n + n * k]))
    } else {
        None
    };
    FlowOutput {
        point,
        frame,
        action: y[n + n * k],
    }
}

fn frame_rhs<'a>(model: &'a HamiltonianModel, k: usize) -> impl FnMut(f64, &[f64], &mut [f64]) + 'a {
    let d = model.dim();
    let n = 2 * d;
    move |_t, y, dy| {
        let (x, xi) = (&y[..d], &y[d..n]);
        let g = model.grad_p0(x, xi);
        let mut act = 0.0;
        for j in 0..d {
            dy[j] = g[d + j];
            dy[d + j] = -g[j];
            act += xi[j] * g[d + j];
        }
        if k > 0 {
            let h = model.hess_p0(x, xi);
            // F = Omega H
            for c in 0..k {
                let col = &y[n + c * n..n + (c + 1) * n];
                for r in 0..d {
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for m in 0..n {
                        a += h[(d + r, m)] * col[m];
                        b -= h[(r, m)] * col[m];
                    }
                    dy[n + c * n + r] = a;
                    dy[n + c * n + d + r] = b;
                }
            }
        }
        dy[n + n * k] = act;
    }
}

/// Flow for time t (either sign), optionally carrying a tangent frame.
pub fn flow_general(
    model: &HamiltonianModel,
    point: &PhasePoint,
    t: f64,
    frame: Option<&DMatrix<f64>>,
    opts: &OdeOptions,
) -> Result<FlowOutput> {
    let d = model.dim();
    if point.dim() != d {
        return Err(Error::validation("point", "dimension mismatch"));
    }
    let k = frame.map(|f| f.ncols()).unwrap_or(0);
    let y0 = pack(point, frame);
    let guard = |y: &[f64]| model.in_validity(&y[..d], &y[d..2 * d]);
    let mut out = solve_at(frame_rhs(model, k), 0.0, &y0, &[t], opts, guard)?;
    Ok(unpack(&out.pop().unwrap(), d, frame.map(|f| f.ncols())))
}

/// Samples of a flow (with frame) at several times, all of one sign.
pub fn flow_samples(
    model: &HamiltonianModel,
    point: &PhasePoint,
    times: &[f64],
    frame: Option<&DMatrix<f64>>,
    opts: &OdeOptions,
) -> Result<Vec<FlowOutput>> {
    let d = model.dim();
    let k = frame.map(|f| f.ncols()).unwrap_or(0);
    let y0 = pack(point, frame);
    let guard = |y: &[f64]| model.in_validity(&y[..d], &y[d..2 * d]);
    let out = solve_at(frame_rhs(model, k), 0.0, &y0, times, opts, guard)?;
    Ok(out.iter().map(|y| unpack(y, d, frame.map(|f| f.ncols()))).collect())
}

pub fn flow(model: &HamiltonianModel, point: &PhasePoint, t: f64, tol: f64) -> Result<PhasePoint> {
    Ok(flow_general(model, point, t, None, &OdeOptions::with_tol(tol))?.point)
}

pub fn flow_with_jacobian(
    model: &HamiltonianModel,
    point: &PhasePoint,
    t: f64,
    tol: f64,
) -> Result<(PhasePoint, DMatrix<f64>)> {
    let n = 2 * model.dim();
    let id = DMatrix::identity(n, n);
    let out = flow_general(model, point, t, Some(&id), &OdeOptions::with_tol(tol))?;
    Ok((out.point, out.frame.unwrap()))
}

#[derive(Debug, Clone)]
pub struct TrajectorySample {
    pub times: Vec<f64>,
    pub points: Vec<PhasePoint>,
    pub jacobians: Option<Vec<DMatrix<f64>>>,
    pub energy: Vec<f64>,
}

impl TrajectorySample {
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energy[0];
        self.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max)
    }

    pub fn max_symplectic_defect(&self) -> f64 {
        self.jacobians
            .as_ref()
            .map(|js| js.iter().map(symplectic_defect).fold(0.0, f64::max))
            .unwrap_or(0.0)
    }

    /// CSV with columns t, x_0.., xi_0.., energy.
    pub fn to_csv(&self) -> String {
        let d = self.points.first().map(|p| p.dim()).unwrap_or(0);
        let mut s = String::from("t");
        for j in 0..d {
            s.push_str(&format!(",x_{j}"));
        }
        for j in 0..d {
            s.push_str(&format!(",xi_{j}"));
        }
        s.push_str(",energy\n");
        for ((t, p), e) in self.times.iter().zip(&self.points).zip(&self.energy) {
            s.push_str(&crate::io::fmt_num(*t));
            for v in p.x.iter().chain(&p.xi) {
                s.push(',');
                s.push_str(&crate::io::fmt_num(*v));
            }
            s.push(',');
            s.push_str(&crate::io::fmt_num(*e));
            s.push('\n');
        }
        s
    }
}

/// Trajectory sampled at `times` (starting at 0 is allowed).
pub fn trajectory(
    model: &HamiltonianModel,
    point: &PhasePoint,
    times: &[f64],
    tol: f64,
    with_jacobian: bool,
) -> Result<TrajectorySample> {
    let n = 2 * model.dim();
    let id = DMatrix::identity(n, n);
    let frame = if with_jacobian { Some(&id) } else { None };
    let outs = flow_samples(model, point, times, frame, &OdeOptions::with_tol(tol))?;
    let energy = outs.iter().map(|o| model.p0(&o.point.x, &o.point.xi)).collect();
    let jacobians = if with_jacobian {
        Some(outs.iter().map(|o| o.frame.clone().unwrap()).collect())
    } else {
        None
    };
    Ok(TrajectorySample {
        times: times.to_vec(),
        points: outs.into_iter().map(|o| o.point).collect(),
        jacobians,
        energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    PhiPlus,
    PhiMinus,
    PsiEta,
    Lambda0,
    PhaseFamilySlice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::validation("domain", "need lo < hi in every coordinate"));
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn cube(d: usize, r: f64) -> Self {
        BoxDomain {
            lo: vec![-r; d],
            hi: vec![r; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a - 1e-12 && *v <= *b + 1e-12)
    }

    /// Largest |x| over the corners.
    pub fn radius(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| a.abs().max(b.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Tensor grid with n points per axis.
    pub fn grid(&self, n: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut out = vec![vec![]];
        for j in 0..d {
            let mut next = Vec::with_capacity(out.len() * n);
            for p in &out {
                for k in 0..n {
                    let s = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
                    let mut q = p.clone();
                    q.push(self.lo[j] + s * (self.hi[j] - self.lo[j]));
                    next.push(q);
                }
            }
            out = next;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ChartPoint {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: DMatrix<f64>,
}

pub trait ChartEval: Send + Sync {
    fn eval(&self, x: &[f64]) -> Result<ChartPoint>;

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(x)?.grad)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// A generating function with gradient and Hessian on a box.
#[derive(Clone)]
pub struct LagrangianChart {
    pub kind: ChartKind,
    pub domain: BoxDomain,
    pub base_point: Option<PhasePoint>,
    inner: Arc<dyn ChartEval>,
}

impl std::fmt::Debug for LagrangianChart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LagrangianChart")
            .field("kind", &self.kind)
            .field("domain", &self.domain)
            .finish()
    }
}

impl LagrangianChart {
    pub fn new(
        kind: ChartKind,
        domain: BoxDomain,
        base_point: Option<PhasePoint>,
        inner: Arc<dyn ChartEval>,
    ) -> Self {
        LagrangianChart {
            kind,
            domain,
            base_point,
            inner,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<ChartPoint> {
        self.inner.eval(x)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.inner.eval(x)?.value)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inner.grad(x)
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.inner.eval(x)?.hess)
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "domain": self.domain,
            "representation": self.inner.describe(),
        })
    }
}

/// A chart given by an explicit polynomial (exact models, tests).
pub struct PolyChart(pub Poly);

impl ChartEval for PolyChart {
    fn eval(&self, x: &[f64]) -> Result<ChartPoint> {
        let (v, g, h) = self.0.eval_all(x);
        let d = x.len();
        Ok(ChartPoint {
            value: v,
            grad: g,
            hess: DMatrix::from_fn(d, d, |i, j| h[i][j]),
        })
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.eval_grad(x).1)
    }

    fn describe(&self) -> serde_json::Value {
        poly_json(&self.0)
    }
}

fn poly_json(p: &Poly) -> serde_json::Value {
    let terms: Vec<_> = p
        .terms
        .iter()
        .map(|(e, c)| serde_json::json!({"exponents": e, "coeff": c}))
        .collect();
    serde_json::json!({ "polynomial": terms })
}

/// Kinetic matrix diagonal M and potential V with p0 = xi^T M xi / 2 + V.
fn split_kinetic(model: &HamiltonianModel) -> Option<(Vec<f64>, Poly)> {
    let d = model.dim();
    match model.kind() {
        ModelKind::ExactQuadratic => {
            let mut v = Poly::zero(d);
            for (j, l) in model.lambdas().iter().enumerate() {
                let mut e = vec![0; d];
                e[j] = 2;
                v.add_term(e, -0.5 * l);
            }
            Some((model.lambdas().to_vec(), v))
        }
        ModelKind::SchrodingerBarrier => Some((vec![2.0; d], model.potential()?.clone())),
        ModelKind::Custom => None,
    }
}

/// Taylor jet of phi_{sign} to the given total degree, solved degree by
/// degree from the eikonal equation.
pub fn eikonal_jet(model: &HamiltonianModel, plus: bool, degree: u32) -> Result<Poly> {
    let d = model.dim();
    let s = if plus { 1.0 } else { -1.0 };
    let (m, v) = match split_kinetic(model) {
        Some(mv) => mv,
        None => {
            let b = linearize(model)?.graph_matrix(plus)?;
            let mut p = Poly::zero(d);
            for i in 0..d {
                for j in 0..d {
                    let mut e = vec![0; d];
                    e[i] += 1;
                    e[j] += 1;
                    p.add_term(e, 0.5 * b[(i, j)]);
                }
            }
            return Ok(p);
        }
    };
    let lam = model.lambdas();
    // phi_2 from (1/2) sum m_j c_j^2 (2)^2 x_j^2 + v_2 = 0 per coordinate
    let mut parts: Vec<Poly> = vec![Poly::zero(d), Poly::zero(d)];
    let mut phi2 = Poly::zero(d);
    for j in 0..d {
        let mut e = vec![0; d];
        e[j] = 2;
        let c = s * lam[j] / (2.0 * m[j]);
        phi2.add_term(e, c);
    }
    parts.push(phi2);
    let grads = |p: &Poly| -> Vec<Poly> { (0..d).map(|j| p.deriv(j)).collect() };
    let mut gparts: Vec<Vec<Poly>> = parts.iter().map(|p| grads(p)).collect();
    for k in 3..=degree {
        let mut r = v.homogeneous(k);
        for i in 3..k {
            let j = k + 2 - i;
            if j < 3 || j >= k {
                continue;
            }
            for a in 0..d {
                let prod = gparts[i as usize][a].mul(&gparts[j as usize][a]);
                r = r.add(&prod.scale(0.5 * m[a]));
            }
        }
        let mut phik = Poly::zero(d);
        for alpha in exponents_of_degree(d, k) {
            if let Some(&ra) = r.terms.get(&alpha) {
                let w: f64 = alpha.iter().zip(lam).map(|(a, l)| *a as f64 * l).sum();
                phik.add_term(alpha, -ra / (s * w));
            }
        }
        gparts.push(grads(&phik));
        parts.push(phik);
    }
    let mut out = Poly::zero(d);
    for p in &parts {
        out = out.add(p);
    }
    Ok(out)
}

/// Chart of phi_{+/-}: the eikonal jet near 0 and, beyond its trusted
/// radius, characteristics shot from the jet ball.
pub struct ManifoldChart {
    model: HamiltonianModel,
    plus: bool,
    jet: Poly,
    jet_degree: u32,
    r_jet: f64,
    opts: OdeOptions,
}

impl ManifoldChart {
    pub fn build(model: &HamiltonianModel, plus: bool, degree: u32, opts: OdeOptions) -> Result<Self> {
        let jet = eikonal_jet(model, plus, degree)?;
        let exact = match model.kind() {
            ModelKind::ExactQuadratic => true,
            ModelKind::SchrodingerBarrier => model.perturbation().is_zero(),
            ModelKind::Custom => false,
        };
        let r_jet = if exact {
            f64::INFINITY
        } else if model.kind() == ModelKind::Custom {
            1e-3 * model.validity_radius()
        } else {
            trusted_radius(&jet, degree)
        };
        Ok(ManifoldChart {
            model: model.clone(),
            plus,
            jet,
            jet_degree: degree,
            r_jet,
            opts,
        })
    }

    pub fn jet(&self) -> &Poly {
        &self.jet
    }

    pub fn trusted_radius(&self) -> f64 {
        self.r_jet
    }

    fn jet_point(&self, x: &[f64]) -> ChartPoint {
        PolyChart(self.jet.clone()).eval(x).unwrap()
    }

    fn shoot(&self, x: &[f64]) -> Result<ChartPoint> {
        let d = self.model.dim();
        let lam = self.model.lambdas();
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rs = 0.5 * self.r_jet;
        let t = (r / rs).ln() / lam[0];
        let st = if self.plus { t } else { -t };
        let mut x0: Vec<f64> = x
            .iter()
            .zip(lam)
            .map(|(v, l)| v * (-l * t).exp())
            .collect();
        let scale = r.max(1.0);
        // last iterate whose flow stayed inside, for backtracking
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..80 {
            let (v0, g0, h0) = self.jet.eval_all(&x0);
            let mut frame = DMatrix::zeros(2 * d, d);
            for i in 0..d {
                frame[(i, i)] = 1.0;
                for j in 0..d {
                    frame[(d + i, j)] = h0[i][j];
                }
            }
            let out = match flow_general(
                &self.model,
                &PhasePoint::new(x0.clone(), g0),
                st,
                Some(&frame),
                &self.opts,
            ) {
                Ok(o) => o,
                Err(Error::DomainEscape { .. }) => {
                    // overshoot: pull the seed back toward the last good one
                    match &prev {
                        Some(p) => x0.iter_mut().zip(p).for_each(|(a, b)| *a = 0.5 * (*a + b)),
                        None => x0.iter_mut().for_each(|a| *a *= 0.7),
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let fr = out.frame.unwrap();
            let xm = fr.rows(0, d).into_owned();
            let xim = fr.rows(d, d).into_owned();
            let g: Vec<f64> = out.point.x.iter().zip(x).map(|(a, b)| a - b).collect();
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = xm.try_inverse().ok_or_else(|| Error::Fold { point: x.to_vec() })?;
            if gn <= 1e-13 * scale {
                return Ok(ChartPoint {
                    value: v0 + out.action,
                    grad: out.point.xi,
                    hess: {
                        let h = &xim * &inv;
                        (&h + h.transpose()) * 0.5
                    },
                });
            }
            prev = Some(x0.clone());
            let step = -(&inv * DVector::from_vec(g));
            for i in 0..d {
                x0[i] += step[i];
            }
            if x0.iter().map(|v| v * v).sum::<f64>().sqrt() > self.r_jet {
                return Err(Error::numerical(
                    "manifold_generating_function",
                    format!("shooting for x = {x:?} left the jet ball"),
                ));
            }
        }
        Err(Error::numerical(
            "manifold_generating_function",
            format!("shooting for x = {x:?} did not converge (insufficient coverage)"),
        ))
    }
}

/// Radius on which the neglected jet tail stays below 1e-12 in the
/// Hessian, from the decay of the top computed degrees.
fn trusted_radius(jet: &Poly, degree: u32) -> f64 {
    let a: Vec<f64> = (0..=degree)
        .map(|k| jet.homogeneous(k).terms.values().map(|c| c.abs()).sum())
        .collect();
    let top = &a[(degree as usize).saturating_sub(3).max(3).min(degree as usize + 1)..];
    if top.iter().all(|v| *v == 0.0) {
        return f64::INFINITY;
    }
    // a_k ~ C q^k
    let mut q = 0.0f64;
    for (i, v) in top.iter().enumerate() {
        let k = degree as usize - (top.len() - 1 - i);
        if *v > 0.0 {
            q = q.max(v.powf(1.0 / k as f64));
        }
    }
    let n = degree as f64 + 1.0;
    let tail = |r: f64| {
        let qr = q * r;
        if qr >= 1.0 {
            return f64::INFINITY;
        }
        qr.powf(n) * n * n / (r * r) / (1.0 - qr)
    };
    let (mut lo, mut hi) = (0.0, 1.0 / q);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) <= 1e-12 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

impl ChartEval for ManifoldChart {
    fn eval(&self, x: &[f64]) -> Result<ChartPoint> {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r <= self.r_jet {
            Ok(self.jet_point(x))
        } else {
            self.shoot(x)
        }
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r <= self.r_jet {
            Ok(self.jet.eval_grad(x).1)
        } else {
            Ok(self.shoot(x)?.grad)
        }
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "sign": if self.plus { "+" } else { "-" },
            "jet_degree": self.jet_degree,
            "trusted_radius": if self.r_jet.is_finite() { serde_json::json!(self.r_jet) } else { serde_json::json!("inf") },
            "jet": poly_json(&self.jet),
        })
    }
}

pub const DEFAULT_JET_DEGREE: u32 = 24;

/// phi_+ (plus = true) or phi_- on `domain`, with the eikonal residual
/// checked against `tol`.
pub fn manifold_generating_function(
    model: &HamiltonianModel,
    plus: bool,
    domain: &BoxDomain,
    tol: f64,
) -> Result<LagrangianChart> {
    let d = model.dim();
    if domain.dim() != d {
        return Err(Error::validation("domain", "dimension mismatch"));
    }
    let degree = match model.kind() {
        ModelKind::ExactQuadratic => 2,
        ModelKind::SchrodingerBarrier if model.perturbation().is_zero() => 2,
        _ => DEFAULT_JET_DEGREE,
    };
    let opts = OdeOptions::with_tol(1e-12);
    let mc = ManifoldChart::build(model, plus, degree, opts)?;
    let zero = vec![0.0; d];
    let p0 = mc.eval(&zero)?;
    let b = linearize(model)?.graph_matrix(plus)?;
    let hdef = (&p0.hess - &b).amax();
    if p0.value.abs() > 1e-14 || p0.grad.iter().any(|g| g.abs() > 1e-14) || hdef > 1e-6 {
        return Err(Error::with_residual(
            "manifold_generating_function",
            "normalization at 0 failed",
            hdef,
        ));
    }
    let chart = LagrangianChart::new(
        if plus { ChartKind::PhiPlus } else { ChartKind::PhiMinus },
        domain.clone(),
        Some(PhasePoint::new(zero.clone(), zero)),
        Arc::new(mc),
    );
    let res = invariance_residual(model, &chart)?;
    if res > tol {
        return Err(Error::with_residual(
            "manifold_generating_function",
            format!("eikonal residual {res:.3e} exceeds tolerance {tol:.3e}"),
            res,
        ));
    }
    Ok(chart)
}

/// sup over a grid on the chart domain of |p0(x, grad phi(x))|.
pub fn invariance_residual(model: &HamiltonianModel, chart: &LagrangianChart) -> Result<f64> {
    let d = chart.domain.dim();
    let n = match d {
        1 => 201,
        2 => 21,
        3 => 9,
        _ => 5,
    };
    let mut worst = 0.0f64;
    for x in chart.domain.grid(n) {
        let g = chart.gradient(&x)?;
        worst = worst.max(model.p0(&x, &g).abs());
    }
    Ok(worst)
}

/// Path of the reduced flow x' = dp/dxi(x, grad phi(x)) on the manifold
/// of `chart`, sampled at `times` (monotone, first entry may be 0).
pub fn manifold_path(
    model: &HamiltonianModel,
    chart: &LagrangianChart,
    x0: &[f64],
    times: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<Vec<f64>>> {
    let d = model.dim();
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| match chart.gradient(x) {
        Ok(g) => {
            let f = model.grad_p0(x, &g);
            dx.copy_from_slice(&f[d..]);
        }
        Err(e) => {
            *failure.lock().unwrap() = Some(e);
            dx.iter_mut().for_each(|v| *v = f64::NAN);
        }
    };
    let guard = |x: &[f64]| x.iter().all(|v| v.is_finite() && v.abs() <= model.validity_radius());
    let r = solve_at(rhs, 0.0, x0, times, opts, guard);
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    r
}

/// Leading coefficient g_1 of x(t) along Lambda_- (t -> +inf, chart
/// phi_-) or Lambda_+ (t -> -inf, chart phi_+), from a fit over a late
/// window of the reduced flow.
pub fn manifold_leading(
    model: &HamiltonianModel,
    chart: &LagrangianChart,
    x0: &[f64],
) -> Result<(LeadingTerm, ExpandiblePolySeries)> {
    let plus = match chart.kind {
        ChartKind::PhiPlus => true,
        ChartKind::PhiMinus => false,
        _ => return Err(Error::validation("chart", "need a phi_+ or phi_- chart")),
    };
    let lam = model.lambdas();
    let l1 = lam[0];
    let tau_b = 24.0 / l1;
    let tau_a = 12.0 / l1;
    let ladder = mu_ladder(lam, l1 + 28.0 / tau_a)?;
    let exps: Vec<f64> = ladder.exponents[1..].to_vec();
    let deg = if ladder.is_resonant() { 1 } else { 0 };
    let n = (2 * exps.len() * (deg + 1)).max(24) * 2;
    let taus: Vec<f64> = (0..n)
        .map(|k| tau_a + (tau_b - tau_a) * k as f64 / (n - 1) as f64)
        .collect();
    let times: Vec<f64> = taus.iter().map(|t| if plus { -t } else { *t }).collect();
    // components that start at 0 need an absolute floor matched to the
    // size of x at the far end of the window
    let x_scale: f64 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let opts = OdeOptions {
        rtol: 1e-13,
        atol: 1e-15 * x_scale * (-l1 * tau_b).exp(),
        ..Default::default()
    };
    let xs = manifold_path(model, chart, x0, &times, &opts)?;
    let samples: Vec<(f64, Vec<f64>)> = taus.iter().cloned().zip(xs).collect();
    let mut series = fit_expandible(&samples, &exps, deg)?;
    series.spatial_dim = Some(model.dim());
    let lt = leading_term(&series)?;
    Ok((lt, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_barrier_model, make_quadratic_model};

    fn pp(x: &[f64], xi: &[f64]) -> PhasePoint {
        PhasePoint::new(x.to_vec(), xi.to_vec())
    }

    #[test]
    fn quadratic_flow_examples() {
        let m = make_quadratic_model(&[1.0]).unwrap();
        let p = flow(&m, &pp(&[1.0], &[-1.0]), 2f64.ln(), 1e-12).unwrap();
        assert!((p.x[0] - 0.5).abs() < 1e-11 && (p.xi[0] + 0.5).abs() < 1e-11);
        let p = flow(&m, &pp(&[1.0], &[1.0]), -(2f64.ln()), 1e-12).unwrap();
        assert!((p.x[0] - 0.5).abs() < 1e-11 && (p.xi[0] - 0.5).abs() < 1e-11);
    }

    #[test]
    fn quadratic_jacobian_is_hyperbolic_rotation() {
        let m = make_quadratic_model(&[1.0]).unwrap();
        let t = 0.7f64;
        let (_, j) = flow_with_jacobian(&m, &pp(&[0.2], &[0.1]), t, 1e-12).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[t.cosh(), t.sinh(), t.sinh(), t.cosh()]);
        assert!((j - want).amax() < 1e-10);
        let (_, j0) = flow_with_jacobian(&m, &pp(&[0.2], &[0.1]), 0.0, 1e-12).unwrap();
        assert_eq!(j0, DMatrix::identity(2, 2));
    }

    #[test]
    fn jacobian_cocycle() {
        let m = make_barrier_model(&[1.0], &Poly::monomial(vec![3], 0.1)).unwrap();
        let p = pp(&[0.2], &[-0.05]);
        let (q, j_half) = flow_with_jacobian(&m, &p, 0.5, 1e-12).unwrap();
        let (_, j_half2) = flow_with_jacobian(&m, &q, 0.5, 1e-12).unwrap();
        let (_, j1) = flow_with_jacobian(&m, &p, 1.0, 1e-12).unwrap();
        assert!((j_half2 * j_half - &j1).amax() < 1e-8);
        assert!(symplectic_defect(&j1) < 1e-8);
    }

    #[test]
    fn escape_is_reported() {
        let m = make_quadratic_model(&[1.0]).unwrap();
        match flow(&m, &pp(&[0.5], &[0.5]), 3.0, 1e-10) {
            Err(Error::DomainEscape { time, .. }) => assert!(time > 0.6 && time < 0.75),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jets_of_exact_models() {
        let b = make_barrier_model(&[1.0, 2.0], &Poly::zero(2)).unwrap();
        let j = eikonal_jet(&b, true, 6).unwrap();
        assert_eq!(j.terms.len(), 2);
        assert!((j.terms[&vec![2, 0]] - 0.25).abs() < 1e-15);
        assert!((j.terms[&vec![0, 2]] - 0.5).abs() < 1e-15);
        let q = make_quadratic_model(&[1.0, 3.0]).unwrap();
        let j = eikonal_jet(&q, false, 4).unwrap();
        assert!((j.terms[&vec![0, 2]] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn cubic_jet_matches_closed_form() {
        // phi_+' = (x/2) sqrt(1 - 0.4 x) for V = -x^2/4 + 0.1 x^3
        let m = make_barrier_model(&[1.0], &Poly::monomial(vec![3], 0.1)).unwrap();
        let dom = BoxDomain::cube(1, 0.4);
        let c = manifold_generating_function(&m, true, &dom, 1e-8).unwrap();
        for &x in &[-0.4, -0.1, 0.25, 0.4] {
            let g = c.gradient(&[x]).unwrap()[0];
            assert!((g - 0.5 * x * (1.0 - 0.4 * x).sqrt()).abs() < 1e-12, "{x}");
        }
        let third = c.describe();
        assert!(third.to_string().contains("jet"));
        let j = eikonal_jet(&m, true, 8).unwrap();
        assert!((j.terms[&vec![3]] + 0.1 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shooting_extends_a_short_jet() {
        let m = make_barrier_model(&[1.0], &Poly::monomial(vec![3], 0.1)).unwrap();
        let mc = ManifoldChart::build(&m, false, 6, OdeOptions::with_tol(1e-12)).unwrap();
        assert!(mc.trusted_radius() < 0.3);
        for &x in &[-0.4, 0.35] {
            let p = mc.eval(&[x]).unwrap_or_else(|e| panic!("{e:?} r_jet={}", mc.trusted_radius()));
            let want = -0.5 * x * (1.0 - 0.4 * x).sqrt();
            assert!((p.grad[0] - want).abs() < 1e-9, "{x}: {} vs {want}", p.grad[0]);
            // phi'' from differentiating the closed form
            let u = (1.0 - 0.4 * x).sqrt();
            let h = -0.5 * u + 0.1 * x / u;
            assert!((p.hess[(0, 0)] - h).abs() < 1e-7);
        }
    }

    #[test]
    fn leading_coefficient_on_stable_manifold() {
        let m = make_barrier_model(&[1.0], &Poly::monomial(vec![3], 0.1)).unwrap();
        let c = manifold_generating_function(&m, false, &BoxDomain::cube(1, 0.4), 1e-8).unwrap();
        let (lt, _) = manifold_leading(&m, &c, &[0.3]).unwrap();
        // x' = -x sqrt(1 - 0.4 x) integrates to ln((u-1)/(u+1)) = -t + C
        let u0 = (1.0 - 0.4 * 0.3f64).sqrt();
        let g1 = -10.0 * (u0 - 1.0) / (u0 + 1.0);
        assert!((lt.g1[0] - g1).abs() < 1e-8, "{} vs {g1}", lt.g1[0]);

        let b = make_barrier_model(&[1.0, 2.0], &Poly::zero(2)).unwrap();
        let c = manifold_generating_function(&b, false, &BoxDomain::cube(2, 1.0), 1e-12).unwrap();
        let (lt, _) = manifold_leading(&b, &c, &[0.6, -0.5]).unwrap();
        assert!((lt.g1[0] - 0.6).abs() < 1e-9 && lt.g1[1].abs() < 1e-9);
    }
}
