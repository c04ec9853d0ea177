//! Sparse real polynomials in d variables.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Poly {
    pub dim: usize,
    pub terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(dim: usize) -> Self {
        Poly {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn monomial(exps: Vec<u32>, coeff: f64) -> Self {
        let mut p = Poly::zero(exps.len());
        p.add_term(exps, coeff);
        p
    }

    pub fn add_term(&mut self, exps: Vec<u32>, coeff: f64) {
        debug_assert_eq!(exps.len(), self.dim);
        if coeff == 0.0 {
            return;
        }
        // keep the map free of explicit zeros
        match self.terms.entry(exps) {
            Entry::Occupied(mut o) => {
                *o.get_mut() += coeff;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
            Entry::Vacant(v) => {
                v.insert(coeff);
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn min_degree(&self) -> Option<u32> {
        self.terms.keys().map(|e| e.iter().sum::<u32>()).min()
    }

    /// Homogeneous part of total degree k.
    pub fn homogeneous(&self, k: u32) -> Poly {
        let mut out = Poly::zero(self.dim);
        for (e, c) in &self.terms {
            if e.iter().sum::<u32>() == k {
                out.terms.insert(e.clone(), *c);
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut out = Poly::zero(self.dim);
        if s != 0.0 {
            for (e, c) in &self.terms {
                out.terms.insert(e.clone(), c * s);
            }
        }
        out
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut acc: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (a, ca) in &self.terms {
            for (b, cb) in &other.terms {
                let e: Vec<u32> = a.iter().zip(b).map(|(i, j)| i + j).collect();
                *acc.entry(e).or_insert(0.0) += ca * cb;
            }
        }
        acc.retain(|_, c| *c != 0.0);
        Poly {
            dim: self.dim,
            terms: acc,
        }
    }

    pub fn deriv(&self, var: usize) -> Poly {
        let mut out = Poly::zero(self.dim);
        for (e, c) in &self.terms {
            if e[var] > 0 {
                let mut f = e.clone();
                f[var] -= 1;
                out.add_term(f, c * e[var] as f64);
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let pw = Powers::new(x, self.degree());
        self.terms.iter().map(|(e, c)| c * pw.mono(e)).sum()
    }

    /// Value and gradient.
    pub fn eval_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let pw = Powers::new(x, self.degree());
        let mut v = 0.0;
        let mut g = vec![0.0; d];
        let mut e2 = vec![0u32; d];
        for (e, c) in &self.terms {
            v += c * pw.mono(e);
            for i in 0..d {
                if e[i] == 0 {
                    continue;
                }
                e2.copy_from_slice(e);
                e2[i] -= 1;
                g[i] += c * e[i] as f64 * pw.mono(&e2);
            }
        }
        (v, g)
    }

    /// Value, gradient and Hessian in one pass.
    pub fn eval_all(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
        let d = self.dim;
        let pw = Powers::new(x, self.degree());
        let mut v = 0.0;
        let mut g = vec![0.0; d];
        let mut hs = vec![vec![0.0; d]; d];
        let mut e2 = vec![0u32; d];
        for (e, c) in &self.terms {
            v += c * pw.mono(e);
            for i in 0..d {
                if e[i] == 0 {
                    continue;
                }
                e2.copy_from_slice(e);
                e2[i] -= 1;
                let ci = c * e[i] as f64;
                g[i] += ci * pw.mono(&e2);
                for j in i..d {
                    if e2[j] == 0 {
                        continue;
                    }
                    let cij = ci * e2[j] as f64;
                    e2[j] -= 1;
                    let val = cij * pw.mono(&e2);
                    e2[j] += 1;
                    hs[i][j] += val;
                    if i != j {
                        hs[j][i] += val;
                    }
                }
            }
        }
        (v, g, hs)
    }

    /// Largest |coefficient| among the terms of total degree k.
    pub fn max_coeff_of_degree(&self, k: u32) -> f64 {
        self.terms
            .iter()
            .filter(|(e, _)| e.iter().sum::<u32>() == k)
            .map(|(_, c)| c.abs())
            .fold(0.0, f64::max)
    }
}

struct Powers {
    table: Vec<Vec<f64>>,
}

impl Powers {
    fn new(x: &[f64], deg: u32) -> Self {
        let table = x
            .iter()
            .map(|&xi| {
                let mut row = Vec::with_capacity(deg as usize + 1);
                let mut p = 1.0;
                for _ in 0..=deg {
                    row.push(p);
                    p *= xi;
                }
                row
            })
            .collect();
        Powers { table }
    }

    #[inline]
    fn mono(&self, e: &[u32]) -> f64 {
        let mut m = 1.0;
        for (row, &k) in self.table.iter().zip(e) {
            m *= row[k as usize];
        }
        m
    }
}

/// All exponent vectors of total degree exactly k in d variables.
pub fn exponents_of_degree(d: usize, k: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; d];
    fill(d, 0, k, &mut cur, &mut out);
    out
}

fn fill(d: usize, i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if i == d - 1 {
        cur[i] = left;
        out.push(cur.clone());
        return;
    }
    for k in (0..=left).rev() {
        cur[i] = k;
        fill(d, i + 1, left - k, cur, out);
    }
}
