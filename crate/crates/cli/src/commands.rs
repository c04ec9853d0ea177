use std::path::PathBuf;

use hyperloc::asymptotics::mu_ladder;
use hyperloc::flow::{manifold_generating_function, manifold_leading, trajectory, BoxDomain};
use hyperloc::io::{csv_row, fmt_num};
use hyperloc::microlocal::{fbi as fbi_transform, frequency_mass, uniform_axis, GridFunction, PhaseSpaceGrid, PhaseSpaceRegion};
use hyperloc::model::{distance_to_lattice, gamma0_lattice, linearize, spectral_params, HamiltonianModel, ModelKind, PhasePoint, SpectralParams};
use hyperloc::oracle::{compare_transition, outside_tube_masses, scaled_resonances, weber_connection, CompareConfig};
use hyperloc::phase::{evolve_phase, PhaseOptions, TransitionScenario};
use hyperloc::transition::{apply_j_prepared, incoming_data, outgoing_data, CauchyData, TransitionKernel};
use hyperloc::{Error, Result};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{RegionCfg, RunConfig};
use crate::report::Reporter;

pub struct Ctx {
    pub cfg: RunConfig,
    pub base_dir: PathBuf,
    pub verbose: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[hyperloc] {}", msg.as_ref());
        }
    }

    fn model(&self) -> Result<HamiltonianModel> {
        self.cfg.build_model()
    }

    fn spectral(&self, h: f64, z: Complex64) -> Result<SpectralParams> {
        let s = &self.cfg.spectral;
        spectral_params(z, h, s.c0, s.c1, s.nu, &self.cfg.model.lambdas)
    }

    /// Scenario at the first sweep point; geometry does not depend on it.
    fn scenario(&self, model: &HamiltonianModel) -> Result<TransitionScenario> {
        let (h, z) = self.cfg.sweep.points()[0];
        self.say("building scenario charts");
        TransitionScenario::new(model, &self.cfg.scenario, self.spectral(h, z)?)
    }
}

fn indexed(prefix: &str, n: usize) -> String {
    (0..n).map(|j| format!(",{prefix}_{j}")).collect()
}

/// File name for per-h output: plain when the sweep has one h.
fn per_h(stem: &str, k: usize, n: usize) -> String {
    if n == 1 {
        format!("{stem}.csv")
    } else {
        format!("{stem}_h{k}.csv")
    }
}

/// Errors that mark a sweep point as excluded rather than failed.
fn excluded_kind(e: &Error) -> Option<&'static str> {
    match e {
        Error::Pole { .. } => Some("pole"),
        Error::NearLattice { .. } => Some("near_lattice"),
        Error::BadSet { .. } => Some("bad_set"),
        _ => None,
    }
}

pub fn model(ctx: &Ctx, rep: &mut Reporter, out: &mut Value) -> Result<()> {
    let m = ctx.model()?;
    let lin = linearize(&m)?;
    let gm = lin.graph_matrix(false)?;
    let gp = lin.graph_matrix(true)?;
    let graph_minus: Vec<Vec<f64>> = gm.row_iter().map(|r| r.iter().cloned().collect()).collect();
    let graph_plus: Vec<Vec<f64>> = gp.row_iter().map(|r| r.iter().cloned().collect()).collect();
    let lam = m.lambdas();
    let cutoff = ctx.cfg.spectral.c1 + 0.5 * m.lambda_sum() + lam[0];
    let ladder = mu_ladder(lam, cutoff)?;
    let mut body = String::from("index,eigenvalue\n");
    for (k, e) in lin.eigenvalues.iter().enumerate() {
        body.push_str(&format!("{k},{}\n", fmt_num(*e)));
    }
    rep.csv("eigenvalues.csv", &body)?;
    *out = json!({
        "dim": m.dim(),
        "kind": m.kind().to_string(),
        "lambdas": lam,
        "validity_radius": m.validity_radius(),
        "eigenvalues": lin.eigenvalues,
        "max_eigen_residual": lin.max_eigen_residual,
        "graph_minus": graph_minus,
        "graph_plus": graph_plus,
        "ladder": { "cutoff": cutoff, "exponents": ladder.exponents, "resonant": ladder.is_resonant() },
    });
    Ok(())
}

pub fn lattice(ctx: &Ctx, rep: &mut Reporter, out: &mut Value) -> Result<()> {
    let lams = &ctx.cfg.model.lambdas;
    let hs = &ctx.cfg.sweep.h;
    let mut counts = Vec::new();
    for (k, &h) in hs.iter().enumerate() {
        let lat = gamma0_lattice(lams, h, ctx.cfg.lattice.bound)?;
        let mut body = format!("z_re,z_im{}\n", indexed("alpha", lams.len()).as_str());
        for (p, a) in lat.points.iter().zip(&lat.multi_indices) {
            body.push_str(&csv_row(&[p.re, p.im]));
            for v in a {
                body.push_str(&format!(",{v}"));
            }
            body.push('\n');
        }
        rep.csv(&per_h("lattice", k, hs.len()), &body)?;
        counts.push(json!({ "h": h, "points": lat.points.len() }));
    }
    *out = json!({ "bound": ctx.cfg.lattice.bound, "lattices": counts });
    Ok(())
}

pub fn flow(ctx: &Ctx, rep: &mut Reporter, out: &mut Value) -> Result<()> {
    let m = ctx.model()?;
    let d = m.dim();
    let fc = &ctx.cfg.flow;
    let x = match &fc.x {
        Some(x) => x.clone(),
        None => ctx.scenario(&m)?.rho_minus.x,
    };
    if x.len() != d {
        return Err(Error::validation("flow.x", format!("need {d} entries")));
    }
    let chart = if fc.xi.is_none() {
        let dom = BoxDomain::cube(d, 0.9 * m.validity_radius());
        Some(manifold_generating_function(&m, false, &dom, ctx.cfg.tolerances.eikonal)?)
    } else {
        None
    };
    let xi = match (&fc.xi, &chart) {
        (Some(xi), _) => xi.clone(),
        (None, Some(c)) => c.gradient(&x)?,
        _ => unreachable!(),
    };
    if xi.len() != d {
        return Err(Error::validation("flow.xi", format!("need {d} entries")));
    }
    let t_end = fc.t_end.unwrap_or(8.0 / m.lambda1());
    let n = fc.samples.unwrap_or(81);
    if !(t_end != 0.0 && t_end.is_finite()) || n < 2 {
        return Err(Error::validation("flow.t_end", "need t_end != 0 and at least 2 samples"));
    }
    let times: Vec<f64> = (0..n).map(|k| t_end * k as f64 / (n - 1) as f64).collect();
    ctx.say("integrating trajectory");
    let tr = trajectory(&m, &PhasePoint::new(x.clone(), xi.clone()), &times, ctx.cfg.tolerances.flow, true)?;
    rep.csv("trajectory.csv", &tr.to_csv())?;
    *out = json!({
        "start_x": x,
        "start_xi": xi,
        "on_incoming_manifold": chart.is_some(),
        "energy_drift": tr.energy_drift(),
        "max_symplectic_defect": tr.max_symplectic_defect(),
    });
    if let Some(c) = &chart {
        ctx.say("fitting the expandible expansion");
        let (lt, series) = manifold_leading(&m, c, &x)?;
        out["leading"] = json!({ "mu1": lt.mu1, "g1": lt.g1, "gamma1": lt.gamma1 });
        out["expansion"] = json!({
            "terms": series.to_json(),
            "residual_rms": series.residual_rms,
            "tail_bound": series.tail_bound,
        });
    }
    Ok(())
}

pub fn phase(ctx: &Ctx, rep: &mut Reporter, out: &mut Value) -> Result<()> {
    let m = ctx.model()?;
    let sc = ctx.scenario(&m)?;
    let eta = ctx.cfg.phase.eta.clone().unwrap_or_else(|| sc.xi_minus_prime());
    let mut opts = PhaseOptions::default_for(&sc, &eta)?;
    if let Some(t) = ctx.cfg.phase.t_max {
        opts.t_max = t;
    }
    if let Some(n) = ctx.cfg.phase.n_t {
        opts.n_t = n;
    }
    ctx.say("evolving the phase family");
    let fam = evolve_phase(&sc, &eta, &opts)?;
    let d = sc.dim();
    let mut body = format!("t{},phi{}\n", indexed("x", d), indexed("dphi", d));
    for (i, t) in fam.t_grid.iter().enumerate() {
        for (k, x) in fam.x_grid.iter().enumerate() {
            let mut row = vec![*t];
            row.extend(x);
            row.push(fam.values[i][k]);
            row.extend(&fam.gradients[i][k]);
            body.push_str(&csv_row(&row));
            body.push('\n');
        }
    }
    rep.csv("phase.csv", &body)?;
    *out = json!({
        "eta_prime": eta,
        "options": opts,
        "psi_tilde": fam.psi_tilde,
        "lambda0_angle_deg": fam.lambda0.angle_deg,
        "eikonal_residual": fam.eikonal_residual,
        "normalization_residual": fam.normalization_residual,
        "expansion": fam.expansion.to_json(),
    });
    Ok(())
}

struct Pair {
    x: Vec<f64>,
    y: Vec<f64>,
}

pub fn transition(ctx: &Ctx, rep: &mut Reporter, out: &mut Value) -> Result<()> {
    let m = ctx.model()?;
    let d = m.dim();
    let sc = ctx.scenario(&m)?;
    let tc = &ctx.cfg.transition;
    let mut pairs: Vec<Pair> = Vec::new();
    for (k, t) in tc.targets.iter().enumerate() {
        if t.x.len() != d || t.y_prime.len() + 1 != d {
            return Err(Error::validation(
                format!("transition.targets[{k}]"),
                format!("x needs {d} entries and y_prime {}", d - 1),
            ));
        }
        pairs.push(Pair {
            x: t.x.clone(),
            y: t.y_prime.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let xb = tc.x_box.unwrap_or(0.5 * sc.chart_radius);
    let yp = sc.x_minus_prime();
    let yw = 0.25 * sc.epsilon;
    for _ in 0..tc.random_targets {
        let x = (0..d).map(|_| rng.gen_range(-xb..=xb)).collect();
        let y = yp.iter().map(|c| c + rng.gen_range(-yw..=yw)).collect();
        pairs.push(Pair { x, y });
    }
    if pairs.is_empty() {
        return Err(Error::validation("transition.targets", "give targets or random_targets"));
    }
    ctx.say(format!("geometry at {} (x, y') pairs", pairs.len()));
    let kernels: Vec<Result<TransitionKernel>> = pairs.par_iter().map(|p| TransitionKernel::new(&sc, &p.x, &p.y)).collect();
    let points = ctx.cfg.sweep.points();
    let lams = &ctx.cfg.model.lambdas;
    let sps: Vec<SpectralParams> = points.iter().map(|&(h, z)| ctx.spectral(h, z)).collect::<Result<_>>()?;
    let mut failure: Option<Error> = None;
    let mut body = format!(
        "h,z_re,z_im{}{},d0_re,d0_im,gamma_re,gamma_im,bracket_re,bracket_im,geom_re,geom_im,action_re,action_im,jac_re,jac_im,badset_margin,excluded,status\n",
        indexed("x", d),
        (1..d).map(|j| format!(",y_{j}")).collect::<String>(),
    );
    let mut rows = 0usize;
    for sp in &sps {
        let lat = gamma0_lattice(lams, sp.h, sp.z.norm() + 2.0 * sp.h * lams.iter().sum::<f64>())?;
        let excluded = distance_to_lattice(sp.z, &lat)? <= sp.nu * sp.h;
        let evals: Vec<_> = kernels
            .par_iter()
            .map(|k| k.as_ref().map_err(Clone::clone).and_then(|k| k.evaluate(sp)))
            .collect();
        for (p, ev) in pairs.iter().zip(evals) {
            let mut row = vec![sp.h, sp.z.re, sp.z.im];
            row.extend(&p.x);
            row.extend(&p.y);
            let status = match ev {
                Ok(ev) => {
                    for f in [ev.d0, ev.f_gamma, ev.f_bracket, ev.f_geom, ev.f_action, ev.f_jac] {
                        row.push(f.re);
                        row.push(f.im);
                    }
                    row.push(ev.badset_margin);
                    "ok".to_string()
                }
                Err(e) => {
                    row.extend(std::iter::repeat(f64::NAN).take(13));
                    match excluded_kind(&e) {
                        Some(k) => k.to_string(),
                        None => {
                            failure.get_or_insert(e);
                            "error".to_string()
                        }
                    }
                }
            };
            body.push_str(&format!("{},{},{}\n", csv_row(&row), excluded, status));
            rows += 1;
        }
    }
    rep.csv("d0.csv", &body)?;

    // J(z) applied to Gaussian Cauchy data, at the distinct target x
    let mut targets: Vec<Vec<f64>> = Vec::new();
    for p in &pairs {
        if !targets.contains(&p.x) {
            targets.push(p.x.clone());
        }
    }
    let w = tc.cauchy_width;
    let axes: Vec<Vec<f64>> = yp.iter().map(|c| uniform_axis(c - 4.0 * w, c + 4.0 * w, tc.cauchy_nodes.max(2))).collect();
    let mut nodes: Vec<Vec<f64>> = vec![Vec::new()];
    for ax in &axes {
        nodes = nodes
            .iter()
            .flat_map(|p| {
                ax.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    ctx.say(format!("J geometry: {} Cauchy nodes, {} targets", nodes.len(), targets.len()));
    let incoming = nodes.par_iter().map(|y| incoming_data(&sc, y)).collect::<Result<Vec<_>>>();
    let outgoing: Vec<Result<_>> = targets.par_iter().map(|x| outgoing_data(&sc, x)).collect();
    let mut jbody = format!("h,z_re,z_im{},ju_re,ju_im,status\n", indexed("x", d));
    match incoming {
        Err(e) => {
            failure.get_or_insert(e);
        }
        Ok(incoming) => {
            let live: Vec<usize> = (0..targets.len()).filter(|&i| outgoing[i].is_ok()).collect();
            let outs: Vec<_> = live.iter().map(|&i| outgoing[i].clone().unwrap()).collect();
            let sweep: Vec<Result<Vec<Complex64>>> = sps
                .par_iter()
                .map(|sp| {
                    let values = incoming
                        .iter()
                        .zip(&nodes)
                        .map(|(inc, y)| {
                            let g: f64 = y.iter().zip(&yp).map(|(a, b)| (a - b) * (a - b)).sum();
                            Complex64::from_polar((-0.5 * g / (w * w)).exp(), inc.phi_minus / sp.h)
                        })
                        .collect();
                    let u0 = CauchyData {
                        axes: axes.clone(),
                        values,
                    };
                    apply_j_prepared(&sc.with_spectral(*sp), &u0, &incoming, &outs)
                })
                .collect();
            for (sp, res) in sps.iter().zip(sweep) {
                let (vals, status): (Vec<Option<Complex64>>, String) = match res {
                    Ok(v) => {
                        let mut it = v.into_iter();
                        (
                            (0..targets.len()).map(|i| if outgoing[i].is_ok() { it.next() } else { None }).collect(),
                            "ok".into(),
                        )
                    }
                    Err(e) => {
                        let s = excluded_kind(&e).map(str::to_string).unwrap_or_else(|| "error".into());
                        if s == "error" {
                            failure.get_or_insert(e);
                        }
                        (vec![None; targets.len()], s)
                    }
                };
                for (i, x) in targets.iter().enumerate() {
                    let mut row = vec![sp.h, sp.z.re, sp.z.im];
                    row.extend(x);
                    let st = match (&vals[i], &outgoing[i]) {
                        (Some(v), _) => {
                            row.push(v.re);
                            row.push(v.im);
                            status.clone()
                        }
                        (None, Err(e)) => {
                            row.extend([f64::NAN, f64::NAN]);
                            match excluded_kind(e) {
                                Some(k) => k.to_string(),
                                None => {
                                    failure.get_or_insert(e.clone());
                                    "error".into()
                                }
                            }
                        }
                        (None, Ok(_)) => {
                            row.extend([f64::NAN, f64::NAN]);
                            status.clone()
                        }
                    };
                    jbody.push_str(&format!("{},{}\n", csv_row(&row), st));
                }
            }
        }
    }
    rep.csv("j.csv", &jbody)?;
    *out = json!({
        "pairs": pairs.len(),
        "sweep_points": sps.len(),
        "d0_rows": rows,
        "cauchy_nodes": nodes.len(),
        "j_targets": targets.len(),
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn verify(ctx: &Ctx, rep: &mut Reporter, out: &mut Value) -> Result<()> {
    let cfg = &ctx.cfg;
    let m = ctx.model()?;
    if m.dim() != 1 || m.kind() != ModelKind::SchrodingerBarrier || !m.perturbation().is_zero() {
        return Err(Error::validation("model", "verify needs the unperturbed 1-D schrodinger_barrier model"));
    }
    let lam = m.lambda1();
    let eps = cfg.scenario.epsilon.unwrap_or(0.1);
    let vc = &cfg.verify;
    let tol = cfg.tolerances.oracle;
    let hs = &cfg.sweep.h;

    ctx.say("oracle connection coefficients");
    let mut pts = cfg.sweep.points();
    for &h in hs {
        if !pts.iter().any(|(h2, z)| *h2 == h && z.norm() == 0.0) {
            pts.push((h, Complex64::new(0.0, 0.0)));
        }
    }
    let conns: Vec<_> = pts
        .par_iter()
        .map(|&(h, z)| {
            let x0 = vc.matching_radius.max(5.0 * h.sqrt().max(eps));
            weber_connection(lam, z, h, eps, x0, tol)
        })
        .collect::<Result<_>>()?;
    let mut body = String::from("h,z_re,z_im,T2,R2,unitarity_defect,estimated_error\n");
    let mut lines = Vec::new();
    for (&(h, z), c) in pts.iter().zip(&conns) {
        let t2 = c.transmission().norm_sqr();
        body.push_str(&csv_row(&[h, z.re, z.im, t2, c.reflection().norm_sqr(), c.unitarity_defect(), c.estimated_error]));
        body.push('\n');
        if z.norm() == 0.0 {
            let line = format!(
                "|T|^2(z=0) = {t2:.9} at h = {h} (|T|^2 - 1/2 = {:.2e}, estimated error {:.1e})",
                t2 - 0.5,
                c.estimated_error
            );
            println!("{line}");
            lines.push(line);
        }
    }
    rep.csv("connection.csv", &body)?;

    ctx.say("J against the oracle");
    let cc = CompareConfig {
        lambda: lam,
        epsilon: eps,
        x_target: vc.x_target,
        z_over_h: cfg.sweep.z_over_h.iter().map(|z| Complex64::new(z[0], z[1])).collect(),
        h_list: hs.clone(),
        c0: cfg.spectral.c0,
        c1: cfg.spectral.c1,
        nu: cfg.spectral.nu,
        tol,
    };
    let cmp = compare_transition(&cc)?;
    rep.csv("compare.csv", &cmp.to_csv())?;
    let slopes: Vec<Value> = cmp
        .slopes
        .iter()
        .map(|(w, s)| json!({ "z_over_h": [w.re, w.im], "slope": if s.is_finite() { json!(s) } else { Value::Null } }))
        .collect();

    ctx.say("complex-scaled resonances");
    let count = vc.resonance_count;
    let res: Vec<_> = hs
        .par_iter()
        .map(|&h| -> Result<_> {
            let r = scaled_resonances(lam, h, count, vc.resonance_grid)?;
            let lat = gamma0_lattice(&[lam], h, h * lam * (count as f64 + 0.5) * 1.001)?;
            Ok((h, r, lat.points))
        })
        .collect::<Result<_>>()?;
    let mut rbody = String::from("h,n,res_re,res_im,lattice_re,lattice_im,rel_err\n");
    let mut worst = 0.0f64;
    for (h, r, lat) in &res {
        for (n, (a, b)) in r.iter().zip(lat).enumerate() {
            let e = (a - b).norm() / b.norm();
            worst = worst.max(e);
            rbody.push_str(&format!("{},{n},{}\n", fmt_num(*h), csv_row(&[a.re, a.im, b.re, b.im, e])));
        }
    }
    rep.csv("resonances.csv", &rbody)?;

    ctx.say("microlocalization of the assembled solution");
    let masses = outside_tube_masses(lam, eps, Complex64::new(0.0, 0.0), hs, vc.tube, vc.window)?;
    let mut mbody = String::from("h,outside_mass,total_mass,drop_factor\n");
    let mut prev: Option<f64> = None;
    for tm in &masses {
        let drop = prev.map(|p| p / tm.outside).unwrap_or(f64::NAN);
        mbody.push_str(&csv_row(&[tm.h, tm.outside, tm.total, drop]));
        mbody.push('\n');
        prev = Some(tm.outside);
    }
    rep.csv("microlocal.csv", &mbody)?;

    *out = json!({
        "lines": lines,
        "compare": { "slopes": slopes, "phase_constant": cmp.phase_constant },
        "resonances": { "count": count, "max_rel_err": worst },
        "microlocal": { "tube": vc.tube, "window": vc.window, "masses": masses },
    });
    Ok(())
}

fn region(ctx: &Ctx, m: &HamiltonianModel, k: usize, r: &RegionCfg) -> Result<(String, PhaseSpaceRegion)> {
    let d = m.dim();
    match r {
        RegionCfg::Ball { name, center, radius } => Ok((
            name.clone(),
            PhaseSpaceRegion::Ball {
                center: center.clone(),
                radius: *radius,
            },
        )),
        RegionCfg::Tube {
            name,
            thickness,
            manifolds,
            x_max,
            complement,
        } => {
            let dom = BoxDomain::cube(d, 0.9 * m.validity_radius());
            let mut charts = Vec::new();
            for s in manifolds {
                let plus = match s.as_str() {
                    "plus" => true,
                    "minus" => false,
                    _ => {
                        return Err(Error::validation(
                            format!("fbi.regions[{k}].manifolds"),
                            format!("unknown manifold {s:?}; use \"minus\" or \"plus\""),
                        ))
                    }
                };
                charts.push(manifold_generating_function(m, plus, &dom, ctx.cfg.tolerances.eikonal)?);
            }
            let mut reg = PhaseSpaceRegion::Tube {
                charts,
                thickness: *thickness,
            };
            if *complement {
                reg = reg.complement();
            }
            if let Some(x) = x_max {
                reg = reg.within(*x);
            }
            Ok((name.clone(), reg))
        }
    }
}

pub fn fbi(ctx: &Ctx, rep: &mut Reporter, out: &mut Value) -> Result<()> {
    let m = ctx.model()?;
    let d = m.dim();
    let fc = &ctx.cfg.fbi;
    let regions: Vec<(String, PhaseSpaceRegion)> = fc
        .regions
        .iter()
        .enumerate()
        .map(|(k, r)| region(ctx, &m, k, r))
        .collect::<Result<_>>()?;
    let input = match &fc.input {
        Some(p) => {
            let p = if p.is_absolute() { p.clone() } else { ctx.base_dir.join(p) };
            Some(std::fs::read_to_string(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let cx = if fc.center_x.is_empty() { vec![0.0; d] } else { fc.center_x.clone() };
    let cxi = if fc.center_xi.is_empty() { vec![0.0; d] } else { fc.center_xi.clone() };
    if cx.len() != d || cxi.len() != d {
        return Err(Error::validation("fbi.center_x", format!("centers need {d} entries")));
    }
    let x_axes: Vec<Vec<f64>> = (0..d).map(|_| uniform_axis(fc.x_range[0], fc.x_range[1], fc.nodes)).collect();
    let xi_axes: Vec<Vec<f64>> = (0..d).map(|_| uniform_axis(fc.xi_range[0], fc.xi_range[1], fc.nodes)).collect();
    let grid = PhaseSpaceGrid {
        x_axes: x_axes.clone(),
        xi_axes,
    };
    let hs = &ctx.cfg.sweep.h;
    let mut mbody = String::from("h,region,mass,fraction\n");
    let mut summary = Vec::new();
    for (k, &h) in hs.iter().enumerate() {
        let u = match &input {
            Some(text) => GridFunction::from_csv(text, d, h)?,
            None => {
                let kmax = cxi.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                let dx = (0.25 * h.sqrt()).min(0.5 * h / kmax);
                let pad = 10.0 * h.sqrt();
                let axes: Vec<Vec<f64>> = (0..d)
                    .map(|_| {
                        let (lo, hi) = (fc.x_range[0].min(cx.iter().cloned().fold(f64::INFINITY, f64::min)) - pad,
                            fc.x_range[1].max(cx.iter().cloned().fold(f64::NEG_INFINITY, f64::max)) + pad);
                        let n = ((hi - lo) / dx).ceil() as usize + 1;
                        uniform_axis(lo, hi, n)
                    })
                    .collect();
                let norm = (std::f64::consts::PI * h).powf(-0.25 * d as f64);
                GridFunction::sample(axes, h, |y| {
                    let mut ph = 0.0;
                    let mut g = 0.0;
                    for j in 0..d {
                        ph += (y[j] - cx[j]) * cxi[j];
                        g += (y[j] - cx[j]).powi(2);
                    }
                    Complex64::from_polar(norm * (-0.5 * g / h).exp(), ph / h)
                })?
            }
        };
        ctx.say(format!("FBI transform at h = {h}"));
        let t = fbi_transform(&u, &grid, h)?;
        let total = frequency_mass(&t, &PhaseSpaceRegion::Empty.complement())?;
        let mut masses = Vec::new();
        for (name, reg) in &regions {
            let mass = frequency_mass(&t, reg)?;
            mbody.push_str(&format!("{},{name},{},{}\n", fmt_num(h), fmt_num(mass), fmt_num(mass / total)));
            masses.push(json!({ "region": name, "mass": mass }));
        }
        let mut body = format!("{},{},abs2\n", indexed("x", d).trim_start_matches(','), indexed("xi", d).trim_start_matches(','));
        let shape = t.tu.shape();
        let n: usize = shape.iter().product();
        for i in 0..n {
            let mut row = t.tu.point(i);
            row.push(t.tu.values[i].norm_sqr());
            body.push_str(&csv_row(&row));
            body.push('\n');
        }
        rep.csv(&per_h("fbi", k, hs.len()), &body)?;
        summary.push(json!({
            "h": h,
            "total_mass": total,
            "input_norm": t.u_norm,
            "plancherel_defect": t.plancherel_defect(),
            "regions": masses,
        }));
    }
    rep.csv("masses.csv", &mbody)?;
    *out = json!({ "transforms": summary });
    Ok(())
}
