//! Phase-space diagnostics on grids: the FBI transform, frequency-set
//! masses, Weyl quantization and PDE residuals.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::flow::{BoxDomain, LagrangianChart};
use crate::model::{HamiltonianModel, ModelKind};
use crate::poly::Poly;

/// Complex samples on a uniform tensor grid, row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<Complex64>,
    pub h: f64,
}

fn check_axis(name: &str, ax: &[f64]) -> Result<f64> {
    if ax.len() < 2 {
        return Err(Error::validation(name, "need at least 2 nodes"));
    }
    let step = ax[1] - ax[0];
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::validation(name, "must be increasing"));
    }
    if ax.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step) {
        return Err(Error::validation(name, "must be uniform"));
    }
    Ok(step)
}

/// n uniform nodes from lo to hi inclusive.
pub fn uniform_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

impl GridFunction {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<Complex64>, h: f64) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::validation("axes", "need at least one axis"));
        }
        for (k, ax) in axes.iter().enumerate() {
            check_axis(&format!("axes[{k}]"), ax)?;
        }
        let n: usize = axes.iter().map(|a| a.len()).product();
        if values.len() != n {
            return Err(Error::validation("values", format!("expected {n} samples, got {}", values.len())));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::validation("values", "non-finite sample"));
        }
        if !(h > 0.0) {
            return Err(Error::validation("h", "must be positive"));
        }
        Ok(GridFunction { axes, values, h })
    }

    /// Samples f on the tensor grid.
    pub fn sample<F>(axes: Vec<Vec<f64>>, h: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Complex64 + Sync,
    {
        let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let n: usize = shape.iter().product();
        let values = (0..n)
            .into_par_iter()
            .map(|i| {
                let idx = unravel(i, &shape);
                let x: Vec<f64> = idx.iter().zip(&axes).map(|(&k, a)| a[k]).collect();
                f(&x)
            })
            .collect();
        GridFunction::new(axes, values, h)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    pub fn spacing(&self, k: usize) -> f64 {
        self.axes[k][1] - self.axes[k][0]
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).product()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        unravel(i, &self.shape())
            .iter()
            .zip(&self.axes)
            .map(|(&k, a)| a[k])
            .collect()
    }

    pub fn norm_l2(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.cell_volume()).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Max modulus on the outermost 5% shell relative to the peak.
    pub fn boundary_decay(&self) -> f64 {
        let shape = self.shape();
        let widths: Vec<usize> = shape.iter().map(|&n| ((n as f64 * 0.05).ceil() as usize).max(1)).collect();
        let mut m: f64 = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            let idx = unravel(i, &shape);
            let edge = idx
                .iter()
                .zip(&shape)
                .zip(&widths)
                .any(|((&k, &n), &w)| k < w || k + w >= n);
            if edge {
                m = m.max(v.norm());
            }
        }
        let p = self.peak();
        if p == 0.0 {
            0.0
        } else {
            m / p
        }
    }

    pub fn map<F: FnMut(&[f64], Complex64) -> Complex64>(&self, mut f: F) -> GridFunction {
        let values = self.values.iter().enumerate().map(|(i, v)| f(&self.point(i), *v)).collect();
        GridFunction {
            axes: self.axes.clone(),
            values,
            h: self.h,
        }
    }

    /// Columns x_1..x_d, re, im.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for k in 0..self.dim() {
            let _ = write!(s, "x{},", k + 1);
        }
        s.push_str("re,im\n");
        for (i, v) in self.values.iter().enumerate() {
            for x in self.point(i) {
                let _ = write!(s, "{},", crate::io::fmt_num(x));
            }
            let _ = writeln!(s, "{},{}", crate::io::fmt_num(v.re), crate::io::fmt_num(v.im));
        }
        s
    }

    /// Inverse of `to_csv` for the given axis count.
    pub fn from_csv(text: &str, dim: usize, h: f64) -> Result<Self> {
        let mut coords: Vec<Vec<f64>> = vec![Vec::new(); dim];
        let mut values = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::validation(format!("line {}", ln + 1), e.to_string()))?;
            if f.len() != dim + 2 {
                return Err(Error::validation(format!("line {}", ln + 1), "wrong column count"));
            }
            for k in 0..dim {
                coords[k].push(f[k]);
            }
            values.push(Complex64::new(f[dim], f[dim + 1]));
        }
        let axes = coords
            .into_iter()
            .map(|mut c| {
                c.sort_by(|a, b| a.partial_cmp(b).unwrap());
                c.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
                c
            })
            .collect();
        GridFunction::new(axes, values, h)
    }
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for k in (0..shape.len()).rev() {
        idx[k] = i % shape[k];
        i /= shape[k];
    }
    idx
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Output nodes of the FBI transform.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceGrid {
    pub x_axes: Vec<Vec<f64>>,
    pub xi_axes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FbiTransform {
    /// Over (x_1..x_d, xi_1..xi_d).
    pub tu: GridFunction,
    pub u_norm: f64,
}

impl FbiTransform {
    pub fn dim(&self) -> usize {
        self.tu.dim() / 2
    }

    /// | ||T'u|| / ||u|| - 1 | over the sampled phase-space box.
    pub fn plancherel_defect(&self) -> f64 {
        (self.tu.norm_l2() / self.u_norm - 1.0).abs()
    }
}

/// T'u(x, xi) = c_d(h) int e^{i(x-y)xi/h - (x-y)^2/2h} u(y) dy with
/// c_d(h) = 2^{-d/2} (pi h)^{-3d/4}; the window is cut at 8 sqrt(h).
pub fn fbi(u: &GridFunction, grid: &PhaseSpaceGrid, h: f64) -> Result<FbiTransform> {
    let d = u.dim();
    if grid.x_axes.len() != d || grid.xi_axes.len() != d {
        return Err(Error::validation("grid", format!("need {d} x axes and {d} xi axes")));
    }
    if !(h > 0.0) {
        return Err(Error::validation("h", "must be positive"));
    }
    let decay = u.boundary_decay();
    if decay > 1e-8 {
        return Err(Error::validation(
            "u",
            format!("does not decay at the grid boundary (shell/peak = {decay:.2e})"),
        ));
    }
    let shape = u.shape();
    let cut = 8.0 * h.sqrt();
    let norm_c = 2f64.powf(-(d as f64) / 2.0) * (PI * h).powf(-3.0 * d as f64 / 4.0);
    let dy = u.cell_volume();
    let x_shape: Vec<usize> = grid.x_axes.iter().map(|a| a.len()).collect();
    let xi_shape: Vec<usize> = grid.xi_axes.iter().map(|a| a.len()).collect();
    let nx: usize = x_shape.iter().product();
    let nxi: usize = xi_shape.iter().product();
    let xis: Vec<Vec<f64>> = (0..nxi)
        .map(|j| unravel(j, &xi_shape).iter().zip(&grid.xi_axes).map(|(&k, a)| a[k]).collect())
        .collect();
    let rows: Vec<Vec<Complex64>> = (0..nx)
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = unravel(i, &x_shape).iter().zip(&grid.x_axes).map(|(&k, a)| a[k]).collect();
            // index ranges of the window on each axis
            let ranges: Vec<(usize, usize)> = (0..d)
                .map(|k| {
                    let ax = &u.axes[k];
                    let s = u.spacing(k);
                    let lo = (((x[k] - cut - ax[0]) / s).ceil().max(0.0)) as usize;
                    let hi = (((x[k] + cut - ax[0]) / s).floor()).min((ax.len() - 1) as f64);
                    if hi < lo as f64 {
                        (1, 0)
                    } else {
                        (lo, hi as usize)
                    }
                })
                .collect();
            let mut win: Vec<(Vec<f64>, Complex64)> = Vec::new();
            if ranges.iter().all(|(a, b)| a <= b) {
                let wshape: Vec<usize> = ranges.iter().map(|(a, b)| b - a + 1).collect();
                let nw: usize = wshape.iter().product();
                for m in 0..nw {
                    let off = unravel(m, &wshape);
                    let idx: Vec<usize> = off.iter().zip(&ranges).map(|(o, (a, _))| o + a).collect();
                    let uv = u.values[ravel(&idx, &shape)];
                    if uv == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let diff: Vec<f64> = idx.iter().enumerate().map(|(k, &j)| x[k] - u.axes[k][j]).collect();
                    let r2: f64 = diff.iter().map(|v| v * v).sum();
                    win.push((diff, uv * (-r2 / (2.0 * h)).exp()));
                }
            }
            xis.iter()
                .map(|xi| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (diff, w) in &win {
                        let ph: f64 = diff.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() / h;
                        acc += w * Complex64::from_polar(1.0, ph);
                    }
                    acc * norm_c * dy
                })
                .collect()
        })
        .collect();
    let mut axes = grid.x_axes.clone();
    axes.extend(grid.xi_axes.iter().cloned());
    let tu = GridFunction::new(axes, rows.into_iter().flatten().collect(), h)?;
    Ok(FbiTransform { tu, u_norm: u.norm_l2() })
}

/// Subsets of phase space, tested pointwise on (x, xi).
#[derive(Clone)]
pub enum PhaseSpaceRegion {
    Ball { center: Vec<f64>, radius: f64 },
    /// Points with |xi - grad phi(x)| <= thickness for some chart whose
    /// domain contains x.
    Tube { charts: Vec<LagrangianChart>, thickness: f64 },
    Complement(Box<PhaseSpaceRegion>),
    /// The inner region intersected with {|x|_inf <= x_max}.
    XWindow { x_max: f64, inner: Box<PhaseSpaceRegion> },
    Empty,
}

impl std::fmt::Debug for PhaseSpaceRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhaseSpaceRegion::Ball { center, radius } => write!(f, "Ball({center:?}, {radius})"),
            PhaseSpaceRegion::Tube { charts, thickness } => write!(f, "Tube({} charts, {thickness})", charts.len()),
            PhaseSpaceRegion::Complement(r) => write!(f, "Complement({r:?})"),
            PhaseSpaceRegion::XWindow { x_max, inner } => write!(f, "XWindow({x_max}, {inner:?})"),
            PhaseSpaceRegion::Empty => write!(f, "Empty"),
        }
    }
}

impl PhaseSpaceRegion {
    pub fn complement(self) -> Self {
        PhaseSpaceRegion::Complement(Box::new(self))
    }

    pub fn within(self, x_max: f64) -> Self {
        PhaseSpaceRegion::XWindow {
            x_max,
            inner: Box::new(self),
        }
    }

    fn check(&self, lo: &[f64], hi: &[f64]) -> Result<()> {
        let d = lo.len() / 2;
        match self {
            PhaseSpaceRegion::Ball { center, radius } => {
                if center.len() != 2 * d {
                    return Err(Error::validation("region.center", format!("need {} entries", 2 * d)));
                }
                if !(*radius >= 0.0) {
                    return Err(Error::validation("region.radius", "must be nonnegative"));
                }
                for k in 0..2 * d {
                    if center[k] - radius < lo[k] - 1e-12 || center[k] + radius > hi[k] + 1e-12 {
                        return Err(Error::validation("region", "ball exceeds the transform grid"));
                    }
                }
                Ok(())
            }
            PhaseSpaceRegion::Tube { charts, thickness } => {
                if !(*thickness > 0.0) {
                    return Err(Error::validation("region.thickness", "must be positive"));
                }
                if charts.iter().any(|c| c.domain.dim() != d) {
                    return Err(Error::validation("region.charts", "dimension mismatch"));
                }
                Ok(())
            }
            PhaseSpaceRegion::Complement(r) => r.check(lo, hi),
            PhaseSpaceRegion::XWindow { x_max, inner } => {
                for k in 0..d {
                    if -x_max < lo[k] - 1e-12 || *x_max > hi[k] + 1e-12 {
                        return Err(Error::validation("region.x_max", "window exceeds the transform grid"));
                    }
                }
                inner.check(lo, hi)
            }
            PhaseSpaceRegion::Empty => Ok(()),
        }
    }

    /// Membership for every node of a (x, xi) grid, row-major.
    pub fn mask(&self, x_axes: &[Vec<f64>], xi_axes: &[Vec<f64>]) -> Result<Vec<bool>> {
        let x_shape: Vec<usize> = x_axes.iter().map(|a| a.len()).collect();
        let xi_shape: Vec<usize> = xi_axes.iter().map(|a| a.len()).collect();
        let nx: usize = x_shape.iter().product();
        let nxi: usize = xi_shape.iter().product();
        let xis: Vec<Vec<f64>> = (0..nxi)
            .map(|j| unravel(j, &xi_shape).iter().zip(xi_axes).map(|(&k, a)| a[k]).collect())
            .collect();
        let rows: Vec<Vec<bool>> = (0..nx)
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = unravel(i, &x_shape).iter().zip(x_axes).map(|(&k, a)| a[k]).collect();
                self.row(&x, &xis)
            })
            .collect::<Result<_>>()?;
        Ok(rows.into_iter().flatten().collect())
    }

    fn row(&self, x: &[f64], xis: &[Vec<f64>]) -> Result<Vec<bool>> {
        Ok(match self {
            PhaseSpaceRegion::Ball { center, radius } => {
                let d = x.len();
                let rx: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                xis.iter()
                    .map(|xi| {
                        let r: f64 = xi.iter().zip(&center[d..]).map(|(a, b)| (a - b) * (a - b)).sum();
                        (rx + r).sqrt() <= *radius
                    })
                    .collect()
            }
            PhaseSpaceRegion::Tube { charts, thickness } => {
                let grads = charts
                    .iter()
                    .filter(|c| c.domain.contains(x))
                    .map(|c| c.gradient(x))
                    .collect::<Result<Vec<_>>>()?;
                xis.iter()
                    .map(|xi| {
                        grads.iter().any(|g| {
                            let r: f64 = xi.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
                            r.sqrt() <= *thickness
                        })
                    })
                    .collect()
            }
            PhaseSpaceRegion::Complement(r) => r.row(x, xis)?.into_iter().map(|b| !b).collect(),
            PhaseSpaceRegion::XWindow { x_max, inner } => {
                if x.iter().all(|v| v.abs() <= *x_max) {
                    inner.row(x, xis)?
                } else {
                    vec![false; xis.len()]
                }
            }
            PhaseSpaceRegion::Empty => vec![false; xis.len()],
        })
    }
}

/// Squared L^2 mass of T'u over the region.
pub fn frequency_mass(t: &FbiTransform, region: &PhaseSpaceRegion) -> Result<f64> {
    let d = t.dim();
    let lo: Vec<f64> = t.tu.axes.iter().map(|a| a[0]).collect();
    let hi: Vec<f64> = t.tu.axes.iter().map(|a| *a.last().unwrap()).collect();
    region.check(&lo, &hi)?;
    let mask = region.mask(&t.tu.axes[..d], &t.tu.axes[d..])?;
    let s: f64 = t
        .tu
        .values
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| v.norm_sqr())
        .sum();
    Ok(s * t.tu.cell_volume())
}

type Coeff = Arc<dyn Fn(&[f64]) -> Complex64 + Send + Sync>;

/// a(x) xi_{j_1} ... xi_{j_k}, k <= 2.
#[derive(Clone)]
pub struct SymbolTerm {
    pub xi: Vec<usize>,
    pub coeff: Coeff,
}

impl SymbolTerm {
    pub fn new<F>(xi: Vec<usize>, coeff: F) -> Self
    where
        F: Fn(&[f64]) -> Complex64 + Send + Sync + 'static,
    {
        SymbolTerm {
            xi,
            coeff: Arc::new(coeff),
        }
    }

    pub fn constant(xi: Vec<usize>, c: f64) -> Self {
        SymbolTerm::new(xi, move |_| Complex64::new(c, 0.0))
    }

    pub fn poly(xi: Vec<usize>, p: Poly) -> Self {
        SymbolTerm::new(xi, move |x| Complex64::new(p.eval(x), 0.0))
    }
}

/// A symbol polynomial of degree at most 2 in xi.
#[derive(Clone)]
pub struct WeylSymbol {
    pub dim: usize,
    pub terms: Vec<SymbolTerm>,
}

impl WeylSymbol {
    pub fn new(dim: usize, terms: Vec<SymbolTerm>) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::validation("dim", "Weyl quantization supports d = 1, 2"));
        }
        for t in &terms {
            if t.xi.len() > 2 {
                return Err(Error::validation("symbol", "degree in xi above 2 is not supported"));
            }
            if t.xi.iter().any(|&j| j >= dim) {
                return Err(Error::validation("symbol", "xi index out of range"));
            }
        }
        Ok(WeylSymbol { dim, terms })
    }

    /// p_0 + h p_1 of a built-in model.
    pub fn from_model(model: &HamiltonianModel, h: f64) -> Result<Self> {
        let d = model.dim();
        let mut terms = Vec::new();
        let mut v = match model.kind() {
            ModelKind::ExactQuadratic => {
                let mut v = Poly::zero(d);
                for (j, l) in model.lambdas().iter().enumerate() {
                    terms.push(SymbolTerm::constant(vec![j, j], 0.5 * l));
                    let mut e = vec![0; d];
                    e[j] = 2;
                    v.add_term(e, -0.5 * l);
                }
                v
            }
            ModelKind::SchrodingerBarrier => {
                for j in 0..d {
                    terms.push(SymbolTerm::constant(vec![j, j], 1.0));
                }
                model.potential().cloned().unwrap_or_else(|| Poly::zero(d))
            }
            _ => {
                return Err(Error::validation(
                    "symbol",
                    "custom symbols are not supported by weyl_apply",
                ))
            }
        };
        if let Some(p1) = model.p1() {
            v = v.add(&p1.scale(h));
        }
        terms.push(SymbolTerm::poly(vec![], v));
        WeylSymbol::new(d, terms)
    }
}

/// D_k = (h/i) d/dx_k by FFT along axis k.
fn deriv(u: &[Complex64], shape: &[usize], steps: &[f64], k: usize, h: f64, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let n = shape[k];
    let stride: usize = shape[k + 1..].iter().product();
    let outer: usize = shape[..k].iter().product();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let len = n as f64 * steps[k];
    let wav: Vec<f64> = (0..n)
        .map(|m| {
            if 2 * m == n {
                0.0
            } else if 2 * m < n {
                2.0 * PI * m as f64 / len
            } else {
                2.0 * PI * (m as f64 - n as f64) / len
            }
        })
        .collect();
    let mut out = vec![Complex64::new(0.0, 0.0); u.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for m in 0..n {
                buf[m] = u[base + m * stride];
            }
            fwd.process(&mut buf);
            for m in 0..n {
                buf[m] *= h * wav[m] / n as f64;
            }
            inv.process(&mut buf);
            for m in 0..n {
                out[base + m * stride] = buf[m];
            }
        }
    }
    out
}

/// Op_h^w(p) u with spectral derivatives (u is treated as periodic on its
/// grid, so it should decay at the boundary). a(x) xi_j xi_k is quantized
/// as (a D_j D_k + D_j a D_k + D_k a D_j + D_j D_k a) / 4.
pub fn weyl_apply(p: &WeylSymbol, u: &GridFunction, h: f64) -> Result<GridFunction> {
    if u.dim() != p.dim {
        return Err(Error::validation("u", "dimension differs from the symbol"));
    }
    let shape = u.shape();
    let steps: Vec<f64> = (0..u.dim()).map(|k| u.spacing(k)).collect();
    let pts: Vec<Vec<f64>> = (0..u.values.len()).map(|i| u.point(i)).collect();
    let mut planner = FftPlanner::new();
    let mut out = vec![Complex64::new(0.0, 0.0); u.values.len()];
    let mut du: Vec<Option<Vec<Complex64>>> = vec![None; u.dim()];
    for t in &p.terms {
        let a: Vec<Complex64> = pts.iter().map(|x| (t.coeff)(x)).collect();
        let mul = |f: &[Complex64]| -> Vec<Complex64> { f.iter().zip(&a).map(|(x, y)| x * y).collect() };
        let au = mul(&u.values);
        let contrib: Vec<Complex64> = match t.xi.as_slice() {
            [] => au,
            [j] => {
                let j = *j;
                if du[j].is_none() {
                    du[j] = Some(deriv(&u.values, &shape, &steps, j, h, &mut planner));
                }
                let a_du = mul(du[j].as_ref().unwrap());
                let d_au = deriv(&au, &shape, &steps, j, h, &mut planner);
                a_du.iter().zip(&d_au).map(|(x, y)| 0.5 * (x + y)).collect()
            }
            [j, k] => {
                let (j, k) = (*j, *k);
                for m in [j, k] {
                    if du[m].is_none() {
                        du[m] = Some(deriv(&u.values, &shape, &steps, m, h, &mut planner));
                    }
                }
                let djk = deriv(du[k].as_ref().unwrap(), &shape, &steps, j, h, &mut planner);
                let t1 = mul(&djk);
                let t2 = deriv(&mul(du[k].as_ref().unwrap()), &shape, &steps, j, h, &mut planner);
                let t3 = deriv(&mul(du[j].as_ref().unwrap()), &shape, &steps, k, h, &mut planner);
                let dk_au = deriv(&au, &shape, &steps, k, h, &mut planner);
                let t4 = deriv(&dk_au, &shape, &steps, j, h, &mut planner);
                (0..au.len()).map(|i| 0.25 * (t1[i] + t2[i] + t3[i] + t4[i])).collect()
            }
            _ => unreachable!("checked in WeylSymbol::new"),
        };
        for (o, c) in out.iter_mut().zip(contrib) {
            *o += c;
        }
    }
    GridFunction::new(u.axes.clone(), out, h)
}

/// ||(Op_h(p) - z) u||_{L^2(interior)} / ||u||_{L^2(interior)}.
pub fn residual_with(p: &WeylSymbol, z: Complex64, u: &GridFunction, interior: &BoxDomain) -> Result<f64> {
    if interior.dim() != u.dim() {
        return Err(Error::validation("interior", "dimension mismatch"));
    }
    let pu = weyl_apply(p, u, u.h)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (a, b)) in pu.values.iter().zip(&u.values).enumerate() {
        if interior.contains(&u.point(i)) {
            num += (a - z * b).norm_sqr();
            den += b.norm_sqr();
        }
    }
    if den == 0.0 {
        return Err(Error::validation("interior", "u vanishes on the interior region"));
    }
    Ok((num / den).sqrt())
}

/// Residual of (Op_h(p_0) + h Op_h(p_1) - z) u for a built-in model.
pub fn residual(model: &HamiltonianModel, z: Complex64, h: f64, u: &GridFunction, interior: &BoxDomain) -> Result<f64> {
    if (u.h - h).abs() > 1e-15 * h {
        return Err(Error::validation("h", "differs from the grid function's h"));
    }
    residual_with(&WeylSymbol::from_model(model, h)?, z, u, interior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::manifold_generating_function;
    use crate::model::{make_barrier_model, make_quadratic_model};
    use rand::{Rng, SeedableRng};

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    fn gaussian(h: f64, n: usize) -> GridFunction {
        GridFunction::sample(vec![uniform_axis(-2.0, 2.0, n)], h, |y| c((-y[0] * y[0] / (2.0 * h)).exp())).unwrap()
    }

    /// Smooth cutoff: 1 on [-a, a], 0 outside [-b, b].
    fn plateau(x: f64, a: f64, b: f64) -> f64 {
        let f = |t: f64| if t > 0.0 { (-1.0 / t).exp() } else { 0.0 };
        let s = (x.abs() - a) / (b - a);
        f(1.0 - s) / (f(1.0 - s) + f(s))
    }

    #[test]
    fn fbi_of_a_gaussian() {
        let h = 0.05;
        let u = gaussian(h, 161);
        let grid = PhaseSpaceGrid {
            x_axes: vec![uniform_axis(-1.5, 1.5, 61)],
            xi_axes: vec![uniform_axis(-1.5, 1.5, 61)],
        };
        let t = fbi(&u, &grid, h).unwrap();
        let cn = 0.5f64.sqrt() * (PI * h).powf(-0.75);
        let mut best = (0.0, 0);
        for (i, v) in t.tu.values.iter().enumerate() {
            let p = t.tu.point(i);
            let (x, xi) = (p[0], p[1]);
            let want = cn * (PI * h).sqrt() * Complex64::new(-(x * x + xi * xi) / (4.0 * h), x * xi / (2.0 * h)).exp();
            assert!((v - want).norm() < 1e-8, "{x} {xi}: {v} vs {want}");
            if v.norm() > best.0 {
                best = (v.norm(), i);
            }
        }
        assert_eq!(t.tu.point(best.1), vec![0.0, 0.0]);
        assert!(t.plancherel_defect() < 1e-3);
        let full = frequency_mass(&t, &PhaseSpaceRegion::Ball { center: vec![0.0, 0.0], radius: 1.5 }).unwrap();
        assert!((full / u.norm_l2().powi(2) - 1.0).abs() < 1e-3);
        assert_eq!(frequency_mass(&t, &PhaseSpaceRegion::Empty).unwrap(), 0.0);
        let far = PhaseSpaceRegion::Ball { center: vec![1.0, 1.0], radius: 1.0 };
        assert!(frequency_mass(&t, &far).is_err());
    }

    #[test]
    fn plane_wave_ridge() {
        let h = 0.05;
        let xi0 = 0.7;
        let u = GridFunction::sample(vec![uniform_axis(-3.0, 3.0, 241)], h, |y| {
            Complex64::from_polar(plateau(y[0], 0.8, 2.2), y[0] * xi0 / h)
        })
        .unwrap();
        let grid = PhaseSpaceGrid {
            x_axes: vec![uniform_axis(-0.1, 0.1, 3)],
            xi_axes: vec![uniform_axis(-2.0, 2.0, 401)],
        };
        let t = fbi(&u, &grid, h).unwrap();
        let (i, _) = t.tu.values[401..802].iter().enumerate().max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap()).unwrap();
        assert!((grid.xi_axes[0][i] - xi0).abs() <= 0.01);
    }

    #[test]
    fn fbi_needs_boundary_decay() {
        let u = GridFunction::sample(vec![uniform_axis(-1.0, 1.0, 41)], 0.1, |_| c(1.0)).unwrap();
        let grid = PhaseSpaceGrid { x_axes: vec![vec![0.0, 0.1]], xi_axes: vec![vec![0.0, 0.1]] };
        assert!(matches!(fbi(&u, &grid, 0.1), Err(Error::Validation { .. })));
    }

    #[test]
    fn coherent_state_concentrates_as_h_shrinks() {
        let ratio = |h: f64| {
            let u = gaussian(h, 321);
            let grid = PhaseSpaceGrid {
                x_axes: vec![uniform_axis(-1.5, 1.5, 121)],
                xi_axes: vec![uniform_axis(-1.5, 1.5, 121)],
            };
            let t = fbi(&u, &grid, h).unwrap();
            let ball = PhaseSpaceRegion::Ball { center: vec![0.0, 0.0], radius: 0.5 };
            frequency_mass(&t, &ball.complement()).unwrap() / t.tu.norm_l2().powi(2)
        };
        let (r1, r2) = (ratio(0.02), ratio(0.01));
        assert!(r1 <= 1e-2, "{r1}");
        // the exact ratio is e^{-r^2/2h}, so halving h squares it; allow
        // for the staircase boundary of the ball on the grid
        assert!(r2 <= 1.05 * r1 * r1, "{r1} {r2}");
    }

    #[test]
    fn tube_around_graphs() {
        let m = make_quadratic_model(&[1.0]).unwrap();
        let dom = BoxDomain::cube(1, 1.0);
        let plus = manifold_generating_function(&m, true, &dom, 1e-8).unwrap();
        let tube = PhaseSpaceRegion::Tube { charts: vec![plus], thickness: 0.1 };
        let mask = tube.mask(&[vec![0.5]], &[vec![0.3, 0.45, 0.5, 0.55, 0.7]]).unwrap();
        assert_eq!(mask, vec![false, true, true, true, false]);
        let w = tube.within(0.4);
        assert_eq!(w.mask(&[vec![0.5]], &[vec![0.5]]).unwrap(), vec![false]);
    }

    #[test]
    fn weyl_examples() {
        let h = 0.1;
        let xi0 = 1.3;
        let ax = uniform_axis(-4.0, 4.0, 512);
        let u = GridFunction::sample(vec![ax.clone()], h, |y| {
            Complex64::from_polar(plateau(y[0], 1.0, 3.0), y[0] * xi0 / h)
        })
        .unwrap();
        let p = WeylSymbol::new(1, vec![SymbolTerm::constant(vec![0, 0], 1.0)]).unwrap();
        let pu = weyl_apply(&p, &u, h).unwrap();
        for (i, (a, b)) in pu.values.iter().zip(&u.values).enumerate() {
            if ax[i].abs() < 0.9 {
                assert!((a - xi0 * xi0 * b).norm() < 1e-8, "{}", ax[i]);
            }
        }
        let v = WeylSymbol::new(1, vec![SymbolTerm::new(vec![], |x| c(x[0].sin()))]).unwrap();
        let vu = weyl_apply(&v, &u, h).unwrap();
        for (i, (a, b)) in vu.values.iter().zip(&u.values).enumerate() {
            assert_eq!(*a, b * ax[i].sin());
        }
        let g = GridFunction::sample(vec![uniform_axis(-3.0, 3.0, 384)], h, |y| c((-y[0] * y[0] / (2.0 * h)).exp())).unwrap();
        let xxi = WeylSymbol::new(1, vec![SymbolTerm::new(vec![0], |x| c(x[0]))]).unwrap();
        let r = weyl_apply(&xxi, &g, h).unwrap();
        for (i, (a, b)) in r.values.iter().zip(&g.values).enumerate() {
            let x = g.axes[0][i];
            let want = Complex64::new(0.0, -h) * (-x * x / h + 0.5) * b;
            assert!((a - want).norm() < 1e-9, "{x}");
        }
    }

    #[test]
    fn weyl_of_real_symbol_is_symmetric() {
        let h = 0.1;
        let m = make_barrier_model(&[1.0, 1.5], &Poly::monomial(vec![2, 1], 0.2)).unwrap();
        let p = WeylSymbol::from_model(&m, h).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut phases = vec![0.0; 6];
        rng.fill(&mut phases[..]);
        let ax = uniform_axis(-3.0, 3.0, 48);
        let u = GridFunction::sample(vec![ax.clone(), ax], h, |x| {
            let env = (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp();
            Complex64::from_polar(env, phases[0] * x[0] / h + phases[1] * x[1] * x[0] / h)
        })
        .unwrap();
        let pu = weyl_apply(&p, &u, h).unwrap();
        let ip: Complex64 = pu.values.iter().zip(&u.values).map(|(a, b)| a * b.conj()).sum();
        assert!(ip.im.abs() <= 1e-8 * ip.norm(), "{ip}");
        // mixed term: a(x) xi_1 xi_2 stays symmetric as well
        let q = WeylSymbol::new(2, vec![SymbolTerm::new(vec![0, 1], |x| c(1.0 + x[0] * x[1]))]).unwrap();
        let qu = weyl_apply(&q, &u, h).unwrap();
        let iq: Complex64 = qu.values.iter().zip(&u.values).map(|(a, b)| a * b.conj()).sum();
        assert!(iq.im.abs() <= 1e-8 * iq.norm(), "{iq}");
    }

    #[test]
    fn custom_symbols_are_rejected() {
        let w = WeylSymbol::new(1, vec![SymbolTerm::constant(vec![0, 0, 0], 1.0)]);
        assert!(matches!(w, Err(Error::Validation { .. })));
    }

    /// Eikonal-only WKB state e^{i phi_-/h} on x > 0 of the 1-D barrier.
    fn wkb_residual(h: f64) -> f64 {
        let lam = 1.0;
        let m = make_barrier_model(&[lam], &Poly::zero(1)).unwrap();
        let u = GridFunction::sample(vec![uniform_axis(-1.0, 3.0, 1024)], h, |x| {
            let cut = plateau(x[0] - 1.0, 0.4, 0.9);
            Complex64::from_polar(cut, -lam * x[0] * x[0] / (4.0 * h))
        })
        .unwrap();
        let interior = BoxDomain::new(vec![0.7], vec![1.3]).unwrap();
        residual(&m, c(0.0), h, &u, &interior).unwrap()
    }

    #[test]
    fn residual_examples() {
        let (r1, r2) = (wkb_residual(0.1), wkb_residual(0.05));
        let slope = (r1 / r2).log2();
        assert!((slope - 1.0).abs() < 0.1, "{r1} {r2} {slope}");
        // e^{-x^2/2h} is an exact eigenfunction of xi^2 + x^2 with eigenvalue h
        let h = 0.1;
        let osc = WeylSymbol::new(
            1,
            vec![SymbolTerm::constant(vec![0, 0], 1.0), SymbolTerm::poly(vec![], Poly::monomial(vec![2], 1.0))],
        )
        .unwrap();
        let g = gaussian(h, 256);
        let interior = BoxDomain::new(vec![-1.0], vec![1.0]).unwrap();
        assert!(residual_with(&osc, c(h), &g, &interior).unwrap() < 1e-10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise = GridFunction::sample(vec![uniform_axis(-2.0, 2.0, 256)], h, |_| c(0.0)).unwrap();
        let noise = noise.map(|_, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        assert!(residual_with(&osc, c(h), &noise, &interior).unwrap() > 0.1);
    }

    #[test]
    fn csv_round_trip() {
        let u = gaussian(0.1, 11).map(|x, v| v * Complex64::new(1.0, x[0]));
        let back = GridFunction::from_csv(&u.to_csv(), 1, 0.1).unwrap();
        for (a, b) in back.axes[0].iter().zip(&u.axes[0]) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in back.values.iter().zip(&u.values) {
            assert!((a - b).norm() < 1e-14);
        }
    }
}
