//! Exponent ladders, expandible series sum_j P_j(t) e^{-mu_j t}, and the
//! split / resolvent primitives.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentLadder {
    /// Strictly increasing, starts at 0.
    pub exponents: Vec<f64>,
    pub generators: Vec<f64>,
    pub cutoff: f64,
    /// For each exponent, the multi-indices over `generators` producing it.
    /// Only kept for ladders built directly from lambdas.
    pub provenance: Option<Vec<Vec<Vec<u32>>>>,
}

impl ExponentLadder {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    /// True if some exponent arises from two different multi-indices.
    pub fn is_resonant(&self) -> bool {
        self.provenance
            .as_ref()
            .map(|p| p.iter().any(|v| v.len() > 1))
            .unwrap_or(false)
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Exponents e with e * t_max below `noise` in log terms, i.e. the part
    /// of the ladder that is still visible on [0, t_max].
    pub fn visible(&self, t_max: f64, noise: f64) -> Vec<f64> {
        self.exponents
            .iter()
            .cloned()
            .filter(|m| (-m * t_max).exp() > noise)
            .collect()
    }
}

fn sort_dedupe(mut vals: Vec<(f64, Vec<u32>)>, tol: f64) -> (Vec<f64>, Vec<Vec<Vec<u32>>>) {
    vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    let mut ex: Vec<f64> = Vec::new();
    let mut prov: Vec<Vec<Vec<u32>>> = Vec::new();
    for (v, a) in vals {
        match ex.last() {
            Some(&last) if (v - last).abs() <= tol => prov.last_mut().unwrap().push(a),
            _ => {
                ex.push(v);
                prov.push(vec![a]);
            }
        }
    }
    (ex, prov)
}

/// All N-combinations sum n_j lambda_j <= cutoff, sorted, merged within
/// 1e-12 * lambda_d.
pub fn mu_ladder(lambdas: &[f64], cutoff: f64) -> Result<ExponentLadder> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::validation("lambdas", "must be nonempty and positive"));
    }
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(Error::validation("cutoff", "must be positive"));
    }
    let d = lambdas.len();
    let lmax = lambdas.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-12 * lmax;
    let mut vals = Vec::new();
    let mut stack = vec![(vec![0u32; d], 0.0f64, 0usize)];
    while let Some((n, w, from)) = stack.pop() {
        vals.push((w, n.clone()));
        for j in from..d {
            let w2 = w + lambdas[j];
            if w2 <= cutoff + tol {
                let mut m = n.clone();
                m[j] += 1;
                stack.push((m, w2, j));
            }
        }
    }
    let (exponents, prov) = sort_dedupe(vals, tol);
    Ok(ExponentLadder {
        exponents,
        generators: lambdas.to_vec(),
        cutoff,
        provenance: Some(prov),
    })
}

/// Closure of a set of positive generators under addition, up to cutoff.
fn additive_closure(gens: &[f64], cutoff: f64, tol: f64) -> Vec<f64> {
    let mut set = vec![0.0f64];
    let mut frontier = vec![0.0f64];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &s in &frontier {
            for &g in gens {
                let v = s + g;
                if v <= cutoff + tol {
                    next.push(v);
                }
            }
        }
        next.sort_by(|a, b| a.partial_cmp(b).unwrap());
        next.dedup_by(|a, b| (*a - *b).abs() <= tol);
        let mut fresh = Vec::new();
        for v in next {
            if !set.iter().any(|s| (s - v).abs() <= tol) {
                set.push(v);
                fresh.push(v);
            }
        }
        frontier = fresh;
    }
    set.sort_by(|a, b| a.partial_cmp(b).unwrap());
    set
}

/// Ladder generated by mu_k - mu_1, k >= 2, up to the input's cutoff.
pub fn muhat_ladder(mu: &ExponentLadder) -> Result<ExponentLadder> {
    if mu.exponents.len() < 3 {
        return Err(Error::validation(
            "ladder",
            "needs at least two exponents beyond 0",
        ));
    }
    let mu1 = mu.exponents[1];
    // mu_k up to cutoff + mu_1 so that every generator below the cutoff is seen
    let ext = if mu.provenance.is_some() {
        mu_ladder(&mu.generators, mu.cutoff + mu1)?.exponents
    } else {
        mu.exponents.clone()
    };
    let lmax = mu.generators.iter().cloned().fold(0.0, f64::max).max(mu1);
    let tol = 1e-12 * lmax;
    let gens: Vec<f64> = ext
        .iter()
        .skip(2)
        .map(|m| m - mu1)
        .filter(|g| *g <= mu.cutoff + tol)
        .collect();
    if gens.is_empty() {
        return Err(Error::validation("ladder", "no generators below the cutoff"));
    }
    Ok(ExponentLadder {
        exponents: additive_closure(&gens, mu.cutoff, tol),
        generators: gens,
        cutoff: mu.cutoff,
        provenance: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTerm {
    /// Position of mu in the ladder the series was fitted against.
    pub index: usize,
    pub mu: f64,
    /// coeffs[l] multiplies t^l; each entry has length value_dim.
    pub coeffs: Vec<Vec<f64>>,
}

impl SeriesTerm {
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    fn norm(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandiblePolySeries {
    pub terms: Vec<SeriesTerm>,
    pub value_dim: usize,
    pub tail_bound: f64,
    pub residual_rms: f64,
    /// If set, the first `spatial_dim` value components are x.
    pub spatial_dim: Option<usize>,
}

impl ExpandiblePolySeries {
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.value_dim];
        for term in &self.terms {
            let e = (-term.mu * t).exp();
            let mut tl = 1.0;
            for c in &term.coeffs {
                for (o, v) in out.iter_mut().zip(c) {
                    *o += v * tl * e;
                }
                tl *= t;
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let recs: Vec<_> = self
            .terms
            .iter()
            .map(|t| {
                serde_json::json!({
                    "mu": t.mu,
                    "degree": t.degree(),
                    "coeffs": t.coeffs,
                })
            })
            .collect();
        serde_json::Value::Array(recs)
    }
}

/// n log-spaced times on [t_min, t_max] (dense near t_min).
pub fn log_times(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let span = t_max - t_min;
    let t0 = span / 100.0;
    (0..n)
        .map(|k| {
            let s = k as f64 / (n - 1) as f64;
            t_min + t0 * ((1.0 + span / t0).powf(s) - 1.0)
        })
        .collect()
}

/// Least squares fit of sum_j sum_l c_{j,l} t^l e^{-mu_j t}.
pub fn fit_expandible(
    samples: &[(f64, Vec<f64>)],
    ladder: &[f64],
    max_poly_degree: usize,
) -> Result<ExpandiblePolySeries> {
    if samples.is_empty() || ladder.is_empty() {
        return Err(Error::validation("samples", "need samples and a nonempty ladder"));
    }
    let m = samples[0].1.len();
    if samples.iter().any(|s| s.1.len() != m || !s.0.is_finite()) {
        return Err(Error::validation("samples", "inconsistent value dimension"));
    }
    let nb = ladder.len() * (max_poly_degree + 1);
    let mut times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    if times.len() < 2 * nb {
        return Err(Error::validation(
            "samples",
            format!("{} distinct times for {nb} basis functions; need at least {}", times.len(), 2 * nb),
        ));
    }
    let n = samples.len();
    let mut a = DMatrix::zeros(n, nb);
    for (i, (t, _)) in samples.iter().enumerate() {
        for (j, mu) in ladder.iter().enumerate() {
            let e = (-mu * t).exp();
            let mut tl = 1.0;
            for l in 0..=max_poly_degree {
                a[(i, j * (max_poly_degree + 1) + l)] = tl * e;
                tl *= t;
            }
        }
    }
    let mut scale = vec![0.0; nb];
    for c in 0..nb {
        let s = a.column(c).norm();
        if s == 0.0 {
            return Err(Error::numerical("fit_expandible", "basis function vanishes on the samples"));
        }
        scale[c] = s;
        a.column_mut(c).scale_mut(1.0 / s);
    }
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = smax / smin;
    if !(cond <= 1e12) {
        return Err(Error::with_residual(
            "fit_expandible",
            format!("design matrix condition {cond:.3e} > 1e12; use a shorter ladder"),
            cond,
        ));
    }
    let mut b = DMatrix::zeros(n, m);
    for (i, (_, v)) in samples.iter().enumerate() {
        for k in 0..m {
            b[(i, k)] = v[k];
        }
    }
    let x = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::numerical("fit_expandible", e.to_string()))?;
    let resid = &a * &x - &b;
    let residual_rms = (resid.iter().map(|r| r * r).sum::<f64>() / (n * m) as f64).sqrt();

    let mut terms = Vec::new();
    for (j, mu) in ladder.iter().enumerate() {
        let coeffs: Vec<Vec<f64>> = (0..=max_poly_degree)
            .map(|l| {
                let c = j * (max_poly_degree + 1) + l;
                (0..m).map(|k| x[(c, k)] / scale[c]).collect()
            })
            .collect();
        terms.push(SeriesTerm {
            index: j,
            mu: *mu,
            coeffs,
        });
    }
    let lead = terms.iter().map(|t| t.norm()).fold(0.0, f64::max);
    let floor = 1e-10 * lead;
    for t in terms.iter_mut() {
        while t.coeffs.len() > 1 {
            let last = t.coeffs.last().unwrap();
            if last.iter().map(|v| v * v).sum::<f64>().sqrt() < floor {
                t.coeffs.pop();
            } else {
                break;
            }
        }
    }
    terms.retain(|t| t.norm() >= floor && t.norm() > 0.0);

    let mu_last = *ladder.last().unwrap();
    let gap = if ladder.len() >= 2 {
        mu_last - ladder[ladder.len() - 2]
    } else {
        mu_last.max(1.0)
    };
    let rate = (mu_last + gap) * 0.99;
    let mut tail_bound = 0.0f64;
    for (i, (t, _)) in samples.iter().enumerate() {
        let r = (0..m).map(|k| resid[(i, k)].powi(2)).sum::<f64>().sqrt();
        tail_bound = tail_bound.max(r * (rate * t).exp());
    }
    Ok(ExpandiblePolySeries {
        terms,
        value_dim: m,
        tail_bound,
        residual_rms,
        spatial_dim: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadingTerm {
    pub mu1: f64,
    pub gamma1: Vec<f64>,
    pub g1: Vec<f64>,
}

/// First term of the series; it must be constant in t.
pub fn leading_term(series: &ExpandiblePolySeries) -> Result<LeadingTerm> {
    let first = series
        .terms
        .first()
        .ok_or_else(|| Error::numerical("leading_term", "empty series"))?;
    let c0 = &first.coeffs[0];
    let n0 = c0.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (l, c) in first.coeffs.iter().enumerate().skip(1) {
        let nl = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nl > 1e-8 * n0.max(1e-300) {
            return Err(Error::with_residual(
                "leading_term",
                format!("resonant leading term: t^{l} coefficient does not vanish"),
                nl,
            ));
        }
    }
    let g1 = match series.spatial_dim {
        Some(d) => c0[..d].to_vec(),
        None => c0.clone(),
    };
    Ok(LeadingTerm {
        mu1: first.mu,
        gamma1: c0.clone(),
        g1,
    })
}

/// Default truncation depth: first ladder index with mu > C1 + sum(lambda)/2.
pub fn default_j1(ladder: &ExponentLadder, c1: f64, lambdas: &[f64]) -> usize {
    let thr = c1 + 0.5 * lambdas.iter().sum::<f64>();
    ladder
        .exponents
        .iter()
        .position(|m| *m > thr)
        .unwrap_or(ladder.exponents.len())
}

/// Terms with ladder index < J1, carried as sum P_j(t) e^{-(S + mu_j) t}.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedSeries {
    pub s: Complex64,
    pub terms: Vec<SeriesTerm>,
    pub value_dim: usize,
}

impl ShiftedSeries {
    pub fn eval(&self, t: f64) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.value_dim];
        for term in &self.terms {
            let e = (-(self.s + term.mu) * t).exp();
            let mut tl = 1.0;
            for c in &term.coeffs {
                for (o, v) in out.iter_mut().zip(c) {
                    *o += e * (v * tl);
                }
                tl *= t;
            }
        }
        out
    }
}

pub fn split_series(
    series: &ExpandiblePolySeries,
    s: Complex64,
    j1: usize,
) -> (ShiftedSeries, ExpandiblePolySeries) {
    let (lo, hi): (Vec<_>, Vec<_>) = series.terms.iter().cloned().partition(|t| t.index < j1);
    (
        ShiftedSeries {
            s,
            terms: lo,
            value_dim: series.value_dim,
        },
        ExpandiblePolySeries {
            terms: hi,
            ..series.clone()
        },
    )
}

/// Closed form of int_0^inf sum b_{j,l} t^l e^{-(S + mu_j) t} dt.
pub fn resolvent_integral(minus: &ShiftedSeries, s: Complex64) -> Result<Vec<Complex64>> {
    let mut out = vec![Complex64::new(0.0, 0.0); minus.value_dim];
    for term in &minus.terms {
        let w = s + term.mu;
        if w.norm() <= 1e-8 {
            return Err(Error::ResolventPole {
                index: term.index,
                value: w,
            });
        }
        let mut fact = 1.0;
        let mut pw = w;
        for (l, c) in term.coeffs.iter().enumerate() {
            if l > 0 {
                fact *= l as f64;
                pw *= w;
            }
            let k = fact / pw;
            for (o, v) in out.iter_mut().zip(c) {
                *o += k * v;
            }
        }
    }
    Ok(out)
}
