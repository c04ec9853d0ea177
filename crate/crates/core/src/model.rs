//! Hamiltonian models with a hyperbolic fixed point at the origin, their
//! linearization, branch roots, spectral parameters and the lattice.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Poly;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ExactQuadratic,
    SchrodingerBarrier,
    Custom,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::ExactQuadratic => "exact_quadratic",
            ModelKind::SchrodingerBarrier => "schrodinger_barrier",
            ModelKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// User supplied symbol. Derivatives are the caller's job.
pub trait Symbol: Send + Sync {
    fn p0(&self, x: &[f64], xi: &[f64]) -> f64;
    /// (dp/dx, dp/dxi) stacked, length 2d.
    fn grad(&self, x: &[f64], xi: &[f64]) -> Vec<f64>;
    /// Full 2d x 2d Hessian in (x, xi) ordering.
    fn hess(&self, x: &[f64], xi: &[f64]) -> DMatrix<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, xi: Vec<f64>) -> Self {
        PhasePoint { x, xi }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        v.extend_from_slice(&self.xi);
        v
    }

    pub fn from_slice(z: &[f64]) -> Self {
        let d = z.len() / 2;
        PhasePoint {
            x: z[..d].to_vec(),
            xi: z[d..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.xi).all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.x.iter().chain(&self.xi).map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone)]
enum SymbolImpl {
    Quadratic,
    /// p0 = |xi|^2 + v, v the full potential including -|L x|^2/4.
    Barrier { v: Poly },
    Custom(Arc<dyn Symbol>),
}

#[derive(Clone)]
pub struct HamiltonianModel {
    dim: usize,
    lambdas: Vec<f64>,
    kind: ModelKind,
    perturbation: Poly,
    perturbation_scale: f64,
    p1: Option<Poly>,
    validity_radius: f64,
    imp: SymbolImpl,
}

impl fmt::Debug for HamiltonianModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianModel")
            .field("dim", &self.dim)
            .field("lambdas", &self.lambdas)
            .field("kind", &self.kind)
            .field("perturbation_scale", &self.perturbation_scale)
            .field("validity_radius", &self.validity_radius)
            .finish()
    }
}

fn check_lambdas(lambdas: &[f64]) -> Result<Vec<f64>> {
    if lambdas.is_empty() {
        return Err(Error::validation("lambdas", "must be nonempty"));
    }
    for (i, &l) in lambdas.iter().enumerate() {
        if !l.is_finite() || l <= 0.0 {
            return Err(Error::validation(
                format!("lambdas[{i}]"),
                format!("must be a positive finite number, got {l}"),
            ));
        }
    }
    let mut out = lambdas.to_vec();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Exact quadratic model p0 = sum_j lambda_j/2 (xi_j^2 - x_j^2).
pub fn make_quadratic_model(lambdas: &[f64]) -> Result<HamiltonianModel> {
    let lambdas = check_lambdas(lambdas)?;
    let d = lambdas.len();
    Ok(HamiltonianModel {
        dim: d,
        lambdas,
        kind: ModelKind::ExactQuadratic,
        perturbation: Poly::zero(d),
        perturbation_scale: 0.0,
        p1: None,
        validity_radius: 1.0,
        imp: SymbolImpl::Quadratic,
    })
}

/// Barrier model p0 = xi^2 - sum lambda_j^2 x_j^2 / 4 + W(x), W a polynomial
/// of degree 3..=6 (no terms of degree below 3).
pub fn make_barrier_model(lambdas: &[f64], perturbation: &Poly) -> Result<HamiltonianModel> {
    let lambdas = check_lambdas(lambdas)?;
    let d = lambdas.len();
    if !perturbation.is_zero() && perturbation.dim != d {
        return Err(Error::validation(
            "perturbation",
            format!("exponent tuples have length {}, expected {d}", perturbation.dim),
        ));
    }
    for (e, c) in &perturbation.terms {
        let deg: u32 = e.iter().sum();
        if !c.is_finite() {
            return Err(Error::validation("perturbation", "non-finite coefficient"));
        }
        if deg < 3 {
            return Err(Error::validation(
                "perturbation",
                format!("term {e:?} has degree {deg}; terms must vanish to order 3 at 0"),
            ));
        }
        if deg > 6 {
            return Err(Error::validation(
                "perturbation",
                format!("term {e:?} has degree {deg}; at most 6 is supported"),
            ));
        }
    }
    let w = if perturbation.is_zero() {
        Poly::zero(d)
    } else {
        perturbation.clone()
    };
    let mut v = w.clone();
    for (j, l) in lambdas.iter().enumerate() {
        let mut e = vec![0; d];
        e[j] = 2;
        v.add_term(e, -0.25 * l * l);
    }
    let scale: f64 = w.terms.values().map(|c| c.abs()).sum();
    let radius = barrier_validity_radius(&w, lambdas[0]);
    Ok(HamiltonianModel {
        dim: d,
        lambdas,
        kind: ModelKind::SchrodingerBarrier,
        perturbation: w,
        perturbation_scale: scale,
        p1: None,
        validity_radius: radius,
        imp: SymbolImpl::Barrier { v },
    })
}

/// Largest r <= 1 on which the crude bound for the perturbation Hessian,
/// sum |c| k(k-1) r^(k-2), stays below lambda_1^2/4.
fn barrier_validity_radius(w: &Poly, lambda1: f64) -> f64 {
    if w.is_zero() {
        return 1.0;
    }
    let bound = |r: f64| -> f64 {
        w.terms
            .iter()
            .map(|(e, c)| {
                let k = e.iter().sum::<u32>() as f64;
                c.abs() * k * (k - 1.0) * r.powf(k - 2.0)
            })
            .sum()
    };
    let target = 0.25 * lambda1 * lambda1;
    if bound(1.0) <= target {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bound(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Model from a user symbol. The origin must be a hyperbolic fixed point
/// with exponents `lambdas`.
pub fn make_custom_model(
    lambdas: &[f64],
    symbol: Arc<dyn Symbol>,
    validity_radius: f64,
) -> Result<HamiltonianModel> {
    let lambdas = check_lambdas(lambdas)?;
    let d = lambdas.len();
    let m = HamiltonianModel {
        dim: d,
        lambdas,
        kind: ModelKind::Custom,
        perturbation: Poly::zero(d),
        perturbation_scale: 0.0,
        p1: None,
        validity_radius,
        imp: SymbolImpl::Custom(symbol),
    };
    let zero = vec![0.0; d];
    if m.p0(&zero, &zero).abs() > 1e-12 {
        return Err(Error::validation("symbol", "p0(0,0) must vanish"));
    }
    let g = m.grad_p0(&zero, &zero);
    if g.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-12 {
        return Err(Error::validation("symbol", "grad p0(0,0) must vanish"));
    }
    let lin = linearize(&m)?;
    let mut eig: Vec<f64> = lin.eigenvalues.iter().filter(|v| **v > 0.0).cloned().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if eig.len() != d || eig.iter().zip(&m.lambdas).any(|(a, b)| (a - b).abs() > 1e-10) {
        return Err(Error::validation(
            "lambdas",
            format!("linearization has positive exponents {eig:?}"),
        ));
    }
    Ok(m)
}

impl HamiltonianModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambda1(&self) -> f64 {
        self.lambdas[0]
    }

    pub fn lambda_sum(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn perturbation(&self) -> &Poly {
        &self.perturbation
    }

    pub fn perturbation_scale(&self) -> f64 {
        self.perturbation_scale
    }

    pub fn validity_radius(&self) -> f64 {
        self.validity_radius
    }

    pub fn with_validity_radius(mut self, r: f64) -> Self {
        self.validity_radius = r;
        self
    }

    pub fn p1(&self) -> Option<&Poly> {
        self.p1.as_ref()
    }

    /// Subprincipal term, a function of x only.
    pub fn with_p1(mut self, p1: Poly) -> Self {
        self.p1 = Some(p1);
        self
    }

    /// Full potential V when p0 = xi^2 + V(x).
    pub fn potential(&self) -> Option<&Poly> {
        match &self.imp {
            SymbolImpl::Barrier { v } => Some(v),
            _ => None,
        }
    }

    /// True when the quadratic part is xi^2 - |Lx|^2/4.
    pub fn is_schrodinger(&self) -> bool {
        matches!(self.imp, SymbolImpl::Barrier { .. })
    }

    pub fn p0(&self, x: &[f64], xi: &[f64]) -> f64 {
        match &self.imp {
            SymbolImpl::Quadratic => self
                .lambdas
                .iter()
                .zip(x.iter().zip(xi))
                .map(|(l, (a, b))| 0.5 * l * (b * b - a * a))
                .sum(),
            SymbolImpl::Barrier { v } => xi.iter().map(|b| b * b).sum::<f64>() + v.eval(x),
            SymbolImpl::Custom(s) => s.p0(x, xi),
        }
    }

    /// (dp/dx, dp/dxi), length 2d.
    pub fn grad_p0(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        let d = self.dim;
        match &self.imp {
            SymbolImpl::Quadratic => {
                let mut g = vec![0.0; 2 * d];
                for j in 0..d {
                    g[j] = -self.lambdas[j] * x[j];
                    g[d + j] = self.lambdas[j] * xi[j];
                }
                g
            }
            SymbolImpl::Barrier { v } => {
                let (_, gv, _) = v.eval_all(x);
                let mut g = gv;
                g.extend(xi.iter().map(|b| 2.0 * b));
                g
            }
            SymbolImpl::Custom(s) => s.grad(x, xi),
        }
    }

    pub fn hess_p0(&self, x: &[f64], xi: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        match &self.imp {
            SymbolImpl::Quadratic => {
                let mut h = DMatrix::zeros(2 * d, 2 * d);
                for j in 0..d {
                    h[(j, j)] = -self.lambdas[j];
                    h[(d + j, d + j)] = self.lambdas[j];
                }
                h
            }
            SymbolImpl::Barrier { v } => {
                let (_, _, hv) = v.eval_all(x);
                let mut h = DMatrix::zeros(2 * d, 2 * d);
                for i in 0..d {
                    for j in 0..d {
                        h[(i, j)] = hv[i][j];
                    }
                    h[(d + i, d + i)] = 2.0;
                }
                h
            }
            SymbolImpl::Custom(s) => s.hess(x, xi),
        }
    }

    /// Hamilton field (dp/dxi, -dp/dx).
    pub fn hamilton_field(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let g = self.grad_p0(x, xi);
        let mut f = vec![0.0; 2 * d];
        for j in 0..d {
            f[j] = g[d + j];
            f[d + j] = -g[j];
        }
        f
    }

    /// dp/dxi at (x, xi).
    pub fn dp_dxi(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        self.grad_p0(x, xi)[self.dim..].to_vec()
    }

    /// The xi-xi block of the Hessian.
    pub fn hess_xixi(&self, x: &[f64], xi: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        match &self.imp {
            SymbolImpl::Quadratic => DMatrix::from_diagonal(&DVector::from_vec(self.lambdas.clone())),
            SymbolImpl::Barrier { .. } => DMatrix::identity(d, d) * 2.0,
            SymbolImpl::Custom(_) => self.hess_p0(x, xi).view((d, d), (d, d)).into_owned(),
        }
    }

    /// True if (x, xi) is inside the box where the model is trusted.
    pub fn in_validity(&self, x: &[f64], xi: &[f64]) -> bool {
        let r = self.validity_radius * (1.0 + 1e-9);
        let rxi = r * self.lambdas[self.dim - 1].max(1.0);
        x.iter().all(|v| v.is_finite() && v.abs() <= r)
            && xi.iter().all(|v| v.is_finite() && v.abs() <= rxi)
    }
}

#[derive(Debug, Clone)]
pub struct Linearization {
    pub f_p: DMatrix<f64>,
    /// Sorted ascending.
    pub eigenvalues: Vec<f64>,
    /// Columns span the stable space (2d x d).
    pub stable_frame: DMatrix<f64>,
    pub unstable_frame: DMatrix<f64>,
    pub max_eigen_residual: f64,
}

impl Linearization {
    /// Matrix B with Lambda^0 = { xi = B x } for the chosen frame.
    pub fn graph_matrix(&self, unstable: bool) -> Result<DMatrix<f64>> {
        let fr = if unstable {
            &self.unstable_frame
        } else {
            &self.stable_frame
        };
        let d = fr.ncols();
        let x = fr.rows(0, d).into_owned();
        let xi = fr.rows(d, d).into_owned();
        let inv = x
            .try_inverse()
            .ok_or_else(|| Error::numerical("linearize", "invariant subspace does not project onto x"))?;
        Ok(xi * inv)
    }
}

/// Linearized Hamilton field at the origin and its invariant frames.
pub fn linearize(model: &HamiltonianModel) -> Result<Linearization> {
    let d = model.dim;
    let zero = vec![0.0; d];
    let h = model.hess_p0(&zero, &zero);
    let mut f = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            f[(i, j)] = h[(d + i, j)];
            f[(i, d + j)] = h[(d + i, d + j)];
            f[(d + i, j)] = -h[(i, j)];
            f[(d + i, d + j)] = -h[(i, d + j)];
        }
    }
    let schur = f.clone().schur();
    let ev = schur.complex_eigenvalues();
    let mut eig = Vec::with_capacity(2 * d);
    for c in ev.iter() {
        if c.im.abs() > 1e-10 * (1.0 + c.re.abs()) {
            return Err(Error::numerical(
                "linearize",
                format!("complex eigenvalue {c}: origin is not hyperbolic"),
            ));
        }
        eig.push(c.re);
    }
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // snap clusters to their mean so repeated exponents give one null space
    let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for &e in &eig {
        match groups.last_mut() {
            Some((v, n)) if (e - *v / *n as f64).abs() <= 1e-8 * scale => {
                *v += e;
                *n += 1;
            }
            _ => groups.push((e, 1)),
        }
    }
    let mut stable = Vec::new();
    let mut unstable = Vec::new();
    let mut max_res = 0.0f64;
    for (sum, n) in groups {
        let mu = sum / n as f64;
        let a = &f - DMatrix::identity(2 * d, 2 * d) * mu;
        let svd = a.clone().svd(false, true);
        let vt = svd.v_t.as_ref().unwrap();
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&i, &j| {
            svd.singular_values[i]
                .partial_cmp(&svd.singular_values[j])
                .unwrap()
        });
        for &k in idx.iter().take(n) {
            let v: DVector<f64> = vt.row(k).transpose();
            let r = (&f * &v - &v * mu).norm();
            max_res = max_res.max(r);
            if r > 1e-10 * (1.0 + scale) {
                return Err(Error::with_residual(
                    "linearize",
                    "defective eigenvalue: not enough eigenvectors",
                    r,
                ));
            }
            if mu < 0.0 {
                stable.push(v);
            } else {
                unstable.push(v);
            }
        }
    }
    if stable.len() != d || unstable.len() != d {
        return Err(Error::numerical(
            "linearize",
            "stable/unstable dimensions do not split evenly",
        ));
    }
    Ok(Linearization {
        f_p: f,
        eigenvalues: eig,
        stable_frame: DMatrix::from_columns(&stable),
        unstable_frame: DMatrix::from_columns(&unstable),
        max_eigen_residual: max_res,
    })
}

/// The two roots xi_1 = f_-, f_+ of p0(x, xi_1, xi') = 0, f_- <= f_+.
///
/// Complex (principal branch) when the radicand is negative.
pub fn branch_roots(
    model: &HamiltonianModel,
    x: &[f64],
    xi_prime: &[f64],
) -> Result<(Complex64, Complex64)> {
    let d = model.dim;
    if x.len() != d || xi_prime.len() + 1 != d {
        return Err(Error::validation("x", "dimension mismatch"));
    }
    let radicand_root = |r: f64| {
        let s = Complex64::new(r, 0.0).sqrt();
        (-s, s)
    };
    match &model.imp {
        SymbolImpl::Quadratic => {
            let l = &model.lambdas;
            let mut num: f64 = x.iter().zip(l).map(|(a, lj)| lj * a * a).sum();
            for j in 1..d {
                num -= l[j] * xi_prime[j - 1] * xi_prime[j - 1];
            }
            Ok(radicand_root(num / l[0]))
        }
        SymbolImpl::Barrier { v } => {
            let r = -xi_prime.iter().map(|b| b * b).sum::<f64>() - v.eval(x);
            Ok(radicand_root(r))
        }
        SymbolImpl::Custom(_) => {
            let lin = linearize(model)?;
            let mut out = [Complex64::new(0.0, 0.0); 2];
            for (k, unstable) in [false, true].into_iter().enumerate() {
                let b = lin.graph_matrix(unstable)?;
                let mut s: f64 = (0..d).map(|j| b[(0, j)] * x[j]).sum();
                let mut xi = vec![0.0; d];
                xi[1..].copy_from_slice(xi_prime);
                let mut ok = false;
                let mut res = f64::INFINITY;
                for _ in 0..50 {
                    xi[0] = s;
                    res = model.p0(x, &xi);
                    if res.abs() <= 1e-13 {
                        ok = true;
                        break;
                    }
                    let g = model.grad_p0(x, &xi)[d];
                    if g == 0.0 {
                        break;
                    }
                    s -= res / g;
                }
                if !ok {
                    return Err(Error::with_residual(
                        "branch_roots",
                        "Newton iteration for xi_1 did not converge",
                        res.abs(),
                    ));
                }
                out[k] = Complex64::new(s, 0.0);
            }
            Ok((out[0], out[1]))
        }
    }
}

/// f_- as a real number, or an error if the root is complex.
pub fn real_branch(
    model: &HamiltonianModel,
    x: &[f64],
    xi_prime: &[f64],
    plus: bool,
) -> Result<f64> {
    let (m, p) = branch_roots(model, x, xi_prime)?;
    let r = if plus { p } else { m };
    if r.im != 0.0 {
        return Err(Error::numerical(
            "branch_roots",
            format!("no real root at x = {x:?}, xi' = {xi_prime:?}"),
        ));
    }
    Ok(r.re)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralParams {
    pub h: f64,
    pub z: Complex64,
    pub c0: f64,
    pub c1: f64,
    pub nu: f64,
    pub s: Complex64,
    pub k1: i64,
}

/// S = sum(lambda)/2 - i z/h and the truncation depth K1.
pub fn spectral_params(
    z: Complex64,
    h: f64,
    c0: f64,
    c1: f64,
    nu: f64,
    lambdas: &[f64],
) -> Result<SpectralParams> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::validation("h", "must be positive"));
    }
    for (name, v) in [("C0", c0), ("C1", c1), ("nu", nu)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::validation(name, "must be positive"));
        }
    }
    let lambdas = check_lambdas(lambdas)?;
    let slack = 1e-12 * h;
    if z.re.abs() > c0 * h + slack {
        return Err(Error::validation("z", format!("|Re z| = {} exceeds C0 h", z.re.abs())));
    }
    if z.im.abs() > c1 * h + slack {
        return Err(Error::validation("z", format!("|Im z| = {} exceeds C1 h", z.im.abs())));
    }
    let sum: f64 = lambdas.iter().sum();
    // -i z/h = (Im z - i Re z)/h
    let s = Complex64::new(0.5 * sum + z.im / h, -z.re / h);
    let k1 = (c1 / lambdas[0] - sum / (2.0 * lambdas[0])).floor() as i64 + 1;
    Ok(SpectralParams {
        h,
        z,
        c0,
        c1,
        nu,
        s,
        k1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceLattice {
    pub points: Vec<Complex64>,
    pub multi_indices: Vec<Vec<u32>>,
    pub h: f64,
    pub lambdas: Vec<f64>,
    pub modulus_bound: f64,
}

/// Points -i h sum lambda_j (alpha_j + 1/2) of modulus <= bound, sorted by
/// modulus; resonant values appear once per generating multi-index.
pub fn gamma0_lattice(lambdas: &[f64], h: f64, modulus_bound: f64) -> Result<ResonanceLattice> {
    let lambdas = check_lambdas(lambdas)?;
    if !(h > 0.0) {
        return Err(Error::validation("h", "must be positive"));
    }
    if !(modulus_bound > 0.0) {
        return Err(Error::validation("modulus_bound", "must be positive"));
    }
    let d = lambdas.len();
    let half: f64 = 0.5 * lambdas.iter().sum::<f64>();
    let budget = modulus_bound / h - half;
    let mut found: Vec<(f64, Vec<u32>)> = Vec::new();
    // walk multi-indices in the positive orthant, growing the last nonzero
    // coordinate onwards so each index is visited once
    let mut stack: Vec<(Vec<u32>, f64, usize)> = Vec::new();
    if budget >= -1e-12 {
        stack.push((vec![0; d], 0.0, 0));
    }
    while let Some((alpha, w, from)) = stack.pop() {
        found.push((w, alpha.clone()));
        for j in from..d {
            let w2 = w + lambdas[j];
            if w2 <= budget + 1e-12 * (1.0 + budget.abs()) {
                let mut a = alpha.clone();
                a[j] += 1;
                stack.push((a, w2, j));
            }
        }
    }
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    let points = found
        .iter()
        .map(|(w, _)| Complex64::new(0.0, -h * (w + half)))
        .collect();
    Ok(ResonanceLattice {
        points,
        multi_indices: found.into_iter().map(|(_, a)| a).collect(),
        h,
        lambdas,
        modulus_bound,
    })
}

/// min |z - point| over the lattice.
pub fn distance_to_lattice(z: Complex64, lattice: &ResonanceLattice) -> Result<f64> {
    let need = z.norm() + lattice.lambdas.iter().sum::<f64>() * lattice.h;
    if lattice.modulus_bound < need {
        return Err(Error::validation(
            "modulus_bound",
            format!("lattice bound {} is below |z| + h sum(lambda) = {need}", lattice.modulus_bound),
        ));
    }
    Ok(lattice
        .points
        .iter()
        .map(|p| (z - p).norm())
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTerm {
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

/// Model specification file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    pub lambdas: Vec<f64>,
    pub kind: ModelKind,
    #[serde(default)]
    pub perturbation: Vec<PerturbationTerm>,
    #[serde(default)]
    pub validity_radius: Option<f64>,
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation("model", e.to_string()))
    }

    pub fn build(&self) -> Result<HamiltonianModel> {
        if self.dim == 0 {
            return Err(Error::validation("dim", "must be positive"));
        }
        if self.lambdas.len() != self.dim {
            return Err(Error::validation(
                "lambdas",
                format!("expected {} entries, got {}", self.dim, self.lambdas.len()),
            ));
        }
        let mut poly = Poly::zero(self.dim);
        for (k, t) in self.perturbation.iter().enumerate() {
            if t.exponents.len() != self.dim {
                return Err(Error::validation(
                    format!("perturbation[{k}].exponents"),
                    format!("expected {} entries", self.dim),
                ));
            }
            poly.add_term(t.exponents.clone(), t.coeff);
        }
        let m = match self.kind {
            ModelKind::ExactQuadratic => {
                if !poly.is_zero() {
                    return Err(Error::validation(
                        "perturbation",
                        "exact_quadratic models take no perturbation",
                    ));
                }
                make_quadratic_model(&self.lambdas)?
            }
            ModelKind::SchrodingerBarrier => make_barrier_model(&self.lambdas, &poly)?,
            ModelKind::Custom => {
                return Err(Error::validation(
                    "kind",
                    "custom models cannot be described in a spec file",
                ))
            }
        };
        match self.validity_radius {
            Some(r) if !(r > 0.0) => Err(Error::validation("validity_radius", "must be positive")),
            Some(r) => Ok(m.with_validity_radius(r)),
            None => Ok(m),
        }
    }
}
