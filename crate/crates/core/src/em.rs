//! Regularized EM for the mixture models (`ivm`, `svmc`, `svmp`), used as
//! MCMC starting points.
//!
//! Each iteration runs an E-step followed by block-wise maximization of the
//! expected complete log posterior. The recorded trace is that objective plus
//! the entropy of the responsibilities, which equals the marginal log posterior
//! right after an E-step and therefore never decreases.

use crate::circular::{a1, a1_inv, arctan_star, circ_dist, vm_norm_ratio, Angle};
use crate::error::{domain, Error, Result};
use crate::models::{generalized_inverse_logit, Dataset, ModelContext, ModelKind, ModelSpec, ParamState};
use crate::numeric::{log_sum_exp, stream_rng};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the objective changes by less than this.
    pub tol: f64,
    /// Gradient-ascent steps per block and M-step.
    pub inner_iters: usize,
    /// Initial gradient-ascent step; adapted by backtracking.
    pub step_size: f64,
    /// Independent starts; the best final objective wins.
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iters: 500, tol: 1e-6, inner_iters: 25, step_size: 0.05, restarts: 4 }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.restarts == 0 || !(self.tol > 0.0) || !(self.step_size > 0.0) {
            return domain("EM needs max_iters >= 1, restarts >= 1 and positive tol and step size");
        }
        Ok(())
    }
}

/// `r[k][ℓ]`: probability that observation `ℓ` belongs to component `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    pub r: Vec<Vec<f64>>,
}

impl Responsibilities {
    fn one_hot(labels: &[usize], k: usize) -> Self {
        let mut r = vec![vec![0.0; labels.len()]; k];
        for (l, &c) in labels.iter().enumerate() {
            r[c][l] = 1.0;
        }
        Responsibilities { r }
    }

    /// Posterior label probabilities from per-location component log terms.
    fn from_terms(terms: impl Fn(usize) -> Vec<f64>, n: usize, k: usize) -> Self {
        let mut r = vec![vec![0.0; n]; k];
        for l in 0..n {
            let t = terms(l);
            let z = log_sum_exp(&t);
            for c in 0..k {
                r[c][l] = (t[c] - z).exp();
            }
        }
        Responsibilities { r }
    }

    pub fn k(&self) -> usize {
        self.r.len()
    }

    pub fn n(&self) -> usize {
        self.r.first().map_or(0, |v| v.len())
    }

    /// Largest deviation of a column sum from one.
    pub fn max_column_error(&self) -> f64 {
        (0..self.n())
            .map(|l| ((0..self.k()).map(|c| self.r[c][l]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n())
            .map(|l| (0..self.k()).max_by(|&a, &b| self.r[a][l].total_cmp(&self.r[b][l])).unwrap())
            .collect()
    }

    fn totals(&self) -> Vec<f64> {
        self.r.iter().map(|v| v.iter().sum()).collect()
    }

    fn entropy(&self) -> f64 {
        -self.r.iter().flatten().map(|&p| xlogy(p, p)).sum::<f64>()
    }
}

/// `x ln y` with `0 ln 0 = 0`.
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmResult {
    pub state: ParamState,
    /// Whitened latents `L⁻¹ z`, one per field (spatial models only).
    pub whitened: Vec<Vec<f64>>,
    pub resp: Responsibilities,
    /// Objective after every iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Component indices in increasing order of mean direction.
    pub order: Vec<usize>,
}

impl EmResult {
    pub fn objective(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

fn best_of(runs: Vec<Result<EmResult>>) -> Result<EmResult> {
    let mut best: Option<EmResult> = None;
    let mut last_err = None;
    for r in runs {
        match r {
            Ok(r) if best.as_ref().is_none_or(|b| r.objective() > b.objective()) => best = Some(r),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Numeric("EM produced no result".into())))
}

fn restarts<R, F>(cfg: &EmConfig, rng: &mut R, run: F) -> Result<EmResult>
where
    R: Rng + ?Sized,
    F: Fn(&mut crate::numeric::Rng) -> Result<EmResult> + Sync,
{
    cfg.validate()?;
    let base: u64 = rng.random();
    let runs: Vec<Result<EmResult>> =
        (0..cfg.restarts as u64).into_par_iter().map(|i| run(&mut stream_rng(base, i))).collect();
    best_of(runs)
}

/// Lloyd's algorithm on unit vectors with k-means++ seeding; returns labels
/// and cluster mean directions.
fn kmeans_circle<R: Rng + ?Sized>(ys: &[f64], k: usize, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    let pts: Vec<[f64; 2]> = ys.iter().map(|y| [y.cos(), y.sin()]).collect();
    let d2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centres = vec![pts[rng.random_range(0..pts.len())]];
    while centres.len() < k {
        let w: Vec<f64> = pts
            .iter()
            .map(|p| centres.iter().map(|c| d2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = w.iter().sum();
        let next = if total > 0.0 {
            crate::models::categorical(&w, rng)
        } else {
            rng.random_range(0..pts.len())
        };
        centres.push(pts[next]);
    }
    let mut labels = vec![0; pts.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (l, p) in pts.iter().enumerate() {
            let best = (0..k).min_by(|&a, &b| d2(p, &centres[a]).total_cmp(&d2(p, &centres[b]))).unwrap();
            changed |= best != labels[l];
            labels[l] = best;
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let mut s = [0.0, 0.0];
            let mut cnt = 0;
            for (l, p) in pts.iter().enumerate() {
                if labels[l] == c {
                    s[0] += p[0];
                    s[1] += p[1];
                    cnt += 1;
                }
            }
            if cnt > 0 {
                *centre = [s[0] / cnt as f64, s[1] / cnt as f64];
            }
        }
        if !changed {
            break;
        }
    }
    let angles = centres.iter().map(|c| arctan_star(c[0], c[1]).map(|a| a.value()).unwrap_or(0.0)).collect();
    (labels, angles)
}

/// Relabels clusters so that cluster `π(k)` sits closest to `targets[k]` overall.
fn align_clusters(labels: &mut [usize], centres: &[f64], targets: &[f64]) {
    let k = centres.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    // Heap's algorithm over all assignments; K is small in practice.
    fn visit(perm: &mut Vec<usize>, m: usize, f: &mut dyn FnMut(&[usize])) {
        if m == 1 {
            f(perm);
            return;
        }
        for i in 0..m {
            visit(perm, m - 1, f);
            let j = if m % 2 == 0 { i } else { 0 };
            perm.swap(j, m - 1);
        }
    }
    let mut score = |p: &[usize]| {
        let cost: f64 = (0..k).map(|c| circ_dist(centres[p[c]], targets[c])).sum();
        if cost < best_cost {
            best_cost = cost;
            best = p.to_vec();
        }
    };
    if k <= 7 {
        visit(&mut perm, k, &mut score);
    } else {
        best = perm.clone();
    }
    // best[c] is the cluster assigned to component c
    let mut to_comp = vec![0; k];
    for (c, &cl) in best.iter().enumerate() {
        to_comp[cl] = c;
    }
    labels.iter_mut().for_each(|l| *l = to_comp[*l]);
}

fn mean_direction(ys: &[f64], w: &[f64]) -> Option<f64> {
    let c: f64 = ys.iter().zip(w).map(|(y, w)| w * y.cos()).sum();
    let s: f64 = ys.iter().zip(w).map(|(y, w)| w * y.sin()).sum();
    if c.hypot(s) < 1e-12 {
        None
    } else {
        arctan_star(c, s).ok().map(|a| a.value())
    }
}

fn resultant(ys: &[f64], w: &[f64], m: f64) -> f64 {
    ys.iter().zip(w).map(|(y, w)| w * (y - m).cos()).sum()
}

/// Gradient ascent with backtracking; only accepts non-decreasing moves.
fn ascend<H, G>(x: &mut [f64], step: &mut f64, iters: usize, h: H, grad: G) -> Result<()>
where
    H: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut fx = h(x);
    let mut cand = x.to_vec();
    for _ in 0..iters {
        let g = grad(x);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite EM gradient".into()));
        }
        if g.iter().all(|v| v.abs() < 1e-12) {
            break;
        }
        let mut moved = false;
        for _ in 0..60 {
            for i in 0..x.len() {
                cand[i] = x[i] + *step * g[i];
            }
            let fc = h(&cand);
            if fc.is_finite() && fc >= fx {
                x.copy_from_slice(&cand);
                fx = fc;
                *step *= 1.5;
                moved = true;
                break;
            }
            *step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(())
}

fn finish_trace(trace: &mut Vec<f64>, f: f64, tol: f64) -> bool {
    trace.push(f);
    let n = trace.len();
    n > 1 && (trace[n - 1] - trace[n - 2]).abs() < tol
}

fn sort_order(m: &[f64]) -> Vec<usize> {
    let mut o: Vec<usize> = (0..m.len()).collect();
    o.sort_by(|&a, &b| Angle::new(m[a]).value().total_cmp(&Angle::new(m[b]).value()));
    o
}

/// EM for the independent mixture with a flat mean prior, a flat concentration
/// prior and symmetric Dirichlet(1) weights.
pub fn em_ivm<R: Rng + ?Sized>(data: &Dataset, k: usize, cfg: &EmConfig, rng: &mut R) -> Result<EmResult> {
    if data.is_empty() {
        return domain("EM needs data");
    }
    if k == 0 {
        return domain("EM needs at least one component");
    }
    let ys = data.ys();
    restarts(cfg, rng, |rng| ivm_run(&ys, k, cfg, rng))
}

fn ivm_objective(ys: &[f64], r: &Responsibilities, lam: &[f64], m: &[f64], rho: &[f64]) -> f64 {
    let mut f = r.entropy();
    for c in 0..lam.len() {
        let ln = vm_norm_ratio(rho[c]).0;
        for (l, y) in ys.iter().enumerate() {
            let p = r.r[c][l];
            f += xlogy(p, lam[c]) + p * (rho[c] * (y - m[c]).cos() - ln);
        }
    }
    f
}

fn ivm_run(ys: &[f64], k: usize, cfg: &EmConfig, rng: &mut crate::numeric::Rng) -> Result<EmResult> {
    let n = ys.len();
    let (labels, _) = kmeans_circle(ys, k, rng);
    let mut r = Responsibilities::one_hot(&labels, k);
    let mut lam = vec![1.0 / k as f64; k];
    let mut m = vec![0.0; k];
    let mut rho = vec![1.0; k];
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 0..cfg.max_iters {
        if it > 0 {
            r = Responsibilities::from_terms(
                |l| (0..k).map(|c| lam[c].ln() + rho[c] * (ys[l] - m[c]).cos() - vm_norm_ratio(rho[c]).0).collect(),
                n,
                k,
            );
        }
        let tot = r.totals();
        for c in 0..k {
            lam[c] = tot[c] / n as f64;
            if tot[c] > 0.0 {
                if let Some(mc) = mean_direction(ys, &r.r[c]) {
                    m[c] = mc;
                }
                rho[c] = a1_inv((resultant(ys, &r.r[c], m[c]) / tot[c]).max(0.0));
            }
        }
        if finish_trace(&mut trace, ivm_objective(ys, &r, &lam, &m, &rho), cfg.tol) {
            converged = true;
            break;
        }
    }
    // Components are exchangeable, so report them by increasing mean.
    let order = sort_order(&m);
    let state = ParamState {
        m: order.iter().map(|&c| vec![Angle::new(m[c]).value()]).collect(),
        phi: order.iter().map(|&c| vec![rho[c].ln()]).collect(),
        lambda: order.iter().map(|&c| lam[c]).collect(),
        ..Default::default()
    };
    let resp = Responsibilities { r: order.iter().map(|&c| r.r[c].clone()).collect() };
    let state = ParamState { zeta: resp.argmax(), ..state };
    Ok(EmResult { state, whitened: Vec::new(), resp, trace, converged, order: (0..k).collect() })
}

/// Angles of `μ + L z̃` per location, or `None` at the origin.
fn svmc_angles(ctx: &ModelContext, zt: &[f64], comp: usize) -> Option<Vec<f64>> {
    let n = ctx.n();
    let cov = ctx.cov.as_ref().unwrap();
    let z1 = cov.mul_l(&zt[2 * comp * n..(2 * comp + 1) * n]);
    let z2 = cov.mul_l(&zt[(2 * comp + 1) * n..(2 * comp + 2) * n]);
    let mut out = Vec::with_capacity(n);
    for l in 0..n {
        let (a, b) = (z1[l] + ctx.means[2 * comp][l], z2[l] + ctx.means[2 * comp + 1][l]);
        if a * a + b * b < 1e-300 {
            return None;
        }
        out.push(b.atan2(a));
    }
    Some(out)
}

/// Internal parameter set of the `svmc` EM.
struct SvmcParams {
    zt: Vec<f64>,
    phi: Vec<Vec<f64>>,
    nu: Vec<f64>,
    lam: Vec<f64>,
}

struct SvmcEm<'a> {
    ctx: &'a ModelContext,
}

impl SvmcEm<'_> {
    fn angles(&self, zt: &[f64]) -> Option<Vec<Vec<f64>>> {
        (0..self.ctx.k()).map(|c| svmc_angles(self.ctx, zt, c)).collect()
    }

    fn latent_term(&self, r: &Responsibilities, phi: &[Vec<f64>], zt: &[f64]) -> f64 {
        let Some(m) = self.angles(zt) else { return f64::NEG_INFINITY };
        let ys = self.ctx.ys();
        let mut f = -0.5 * zt.iter().map(|x| x * x).sum::<f64>();
        for c in 0..self.ctx.k() {
            for (l, y) in ys.iter().enumerate() {
                f += r.r[c][l] * phi[c][l].exp() * (y - m[c][l]).cos();
            }
        }
        f
    }

    fn latent_grad(&self, r: &Responsibilities, phi: &[Vec<f64>], zt: &[f64]) -> Vec<f64> {
        let ctx = self.ctx;
        let (n, cov, ys) = (ctx.n(), ctx.cov.as_ref().unwrap(), ctx.ys());
        let mut g = vec![0.0; zt.len()];
        for c in 0..ctx.k() {
            let z1 = cov.mul_l(&zt[2 * c * n..(2 * c + 1) * n]);
            let z2 = cov.mul_l(&zt[(2 * c + 1) * n..(2 * c + 2) * n]);
            let mut g1 = vec![0.0; n];
            let mut g2 = vec![0.0; n];
            for l in 0..n {
                let (a, b) = (z1[l] + ctx.means[2 * c][l], z2[l] + ctx.means[2 * c + 1][l]);
                let r2 = a * a + b * b;
                let d = r.r[c][l] * phi[c][l].exp() * (ys[l] - b.atan2(a)).sin();
                g1[l] = -d * b / r2;
                g2[l] = d * a / r2;
            }
            let h1 = cov.mul_lt(&g1);
            let h2 = cov.mul_lt(&g2);
            for l in 0..n {
                g[2 * c * n + l] = h1[l] - zt[2 * c * n + l];
                g[(2 * c + 1) * n + l] = h2[l] - zt[(2 * c + 1) * n + l];
            }
        }
        g
    }

    fn conc_term(&self, r: &Responsibilities, m: &[Vec<f64>], nu: &[f64], flat: &[f64]) -> f64 {
        let (n, ys) = (self.ctx.n(), self.ctx.ys());
        let vs2 = self.ctx.spec.hier.varsigma.powi(2);
        let mut f = 0.0;
        for c in 0..self.ctx.k() {
            for l in 0..n {
                let p = flat[c * n + l];
                let rho = p.exp();
                f += r.r[c][l] * (rho * (ys[l] - m[c][l]).cos() - vm_norm_ratio(rho).0)
                    - (p - nu[c]).powi(2) / (2.0 * vs2);
            }
        }
        f
    }

    fn conc_grad(&self, r: &Responsibilities, m: &[Vec<f64>], nu: &[f64], flat: &[f64]) -> Vec<f64> {
        let (n, ys) = (self.ctx.n(), self.ctx.ys());
        let vs2 = self.ctx.spec.hier.varsigma.powi(2);
        let mut g = vec![0.0; flat.len()];
        for c in 0..self.ctx.k() {
            for l in 0..n {
                let p = flat[c * n + l];
                let rho = p.exp();
                // I₋₁ = I₁, so the ratio term is I₁/I₀
                g[c * n + l] = r.r[c][l] * rho * ((ys[l] - m[c][l]).cos() - a1(rho)) - (p - nu[c]) / vs2;
            }
        }
        g
    }

    fn objective(&self, r: &Responsibilities, p: &SvmcParams) -> f64 {
        let ctx = self.ctx;
        let Some(m) = self.angles(&p.zt) else { return f64::NEG_INFINITY };
        let h = ctx.spec.hier;
        let alpha = ctx.spec.dirichlet_alpha;
        let ys = ctx.ys();
        let mut f = r.entropy() - 0.5 * p.zt.iter().map(|x| x * x).sum::<f64>();
        for c in 0..ctx.k() {
            f += xlogy(alpha - 1.0, p.lam[c]) - p.nu[c].powi(2) / (2.0 * h.tau * h.tau);
            for (l, y) in ys.iter().enumerate() {
                let rho = p.phi[c][l].exp();
                let w = r.r[c][l];
                f += xlogy(w, p.lam[c]) + w * (rho * (y - m[c][l]).cos() - vm_norm_ratio(rho).0);
                f -= (p.phi[c][l] - p.nu[c]).powi(2) / (2.0 * h.varsigma * h.varsigma);
            }
        }
        f
    }

    fn e_step(&self, p: &SvmcParams) -> Result<Responsibilities> {
        let m = self.angles(&p.zt).ok_or_else(|| Error::Numeric("latent pair at the origin".into()))?;
        let ys = self.ctx.ys();
        Ok(Responsibilities::from_terms(
            |l| {
                (0..self.ctx.k())
                    .map(|c| {
                        let rho = p.phi[c][l].exp();
                        p.lam[c].ln() + rho * (ys[l] - m[c][l]).cos() - vm_norm_ratio(rho).0
                    })
                    .collect()
            },
            self.ctx.n(),
            self.ctx.k(),
        ))
    }
}

/// Weights maximizing `Σ r ln λ + (α−1) Σ ln λ`.
fn weight_update(tot: &[f64], alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = tot.iter().map(|t| (t + alpha - 1.0).max(0.0)).collect();
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / tot.len() as f64; tot.len()]
    }
}

fn prior_mean_angles(ctx: &ModelContext) -> Vec<f64> {
    (0..ctx.k())
        .map(|c| {
            let (a, b) = (ctx.means[2 * c].iter().sum::<f64>(), ctx.means[2 * c + 1].iter().sum::<f64>());
            arctan_star(a, b).map(|x| x.value()).unwrap_or(TAU * c as f64 / ctx.k() as f64)
        })
        .collect()
}

/// EM for `svmc` on whitened latents.
pub fn em_svmc<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, cfg: &EmConfig, rng: &mut R) -> Result<EmResult> {
    if spec.kind != ModelKind::Svmc {
        return domain("em_svmc needs an svmc spec");
    }
    let ctx = ModelContext::new(spec, data)?;
    restarts(cfg, rng, |rng| svmc_run(&ctx, cfg, rng))
}

fn svmc_run(ctx: &ModelContext, cfg: &EmConfig, rng: &mut crate::numeric::Rng) -> Result<EmResult> {
    let (n, k) = (ctx.n(), ctx.k());
    let h = ctx.spec.hier;
    let em = SvmcEm { ctx };
    let (mut labels, centres) = kmeans_circle(ctx.ys(), k, rng);
    align_clusters(&mut labels, &centres, &prior_mean_angles(ctx));
    let mut r = Responsibilities::one_hot(&labels, k);
    let mut p = SvmcParams {
        zt: vec![0.0; 2 * k * n],
        phi: vec![vec![0.0; n]; k],
        nu: vec![0.0; k],
        lam: vec![1.0 / k as f64; k],
    };
    let (mut zstep, mut pstep) = (cfg.step_size, cfg.step_size);
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 0..cfg.max_iters {
        if it > 0 {
            r = em.e_step(&p)?;
        }
        p.lam = weight_update(&r.totals(), ctx.spec.dirichlet_alpha);
        let phi = p.phi.clone();
        ascend(
            &mut p.zt,
            &mut zstep,
            cfg.inner_iters,
            |z| em.latent_term(&r, &phi, z),
            |z| em.latent_grad(&r, &phi, z),
        )?;
        let m = em.angles(&p.zt).ok_or_else(|| Error::Numeric("latent pair at the origin".into()))?;
        let mut flat: Vec<f64> = p.phi.iter().flatten().copied().collect();
        let nu = p.nu.clone();
        ascend(
            &mut flat,
            &mut pstep,
            cfg.inner_iters,
            |f| em.conc_term(&r, &m, &nu, f),
            |f| em.conc_grad(&r, &m, &nu, f),
        )?;
        for c in 0..k {
            p.phi[c].copy_from_slice(&flat[c * n..(c + 1) * n]);
            let s: f64 = p.phi[c].iter().sum();
            let prec = n as f64 / (h.varsigma * h.varsigma) + 1.0 / (h.tau * h.tau);
            p.nu[c] = s / (h.varsigma * h.varsigma) / prec;
        }
        if finish_trace(&mut trace, em.objective(&r, &p), cfg.tol) {
            converged = true;
            break;
        }
    }
    let cov = ctx.cov.as_ref().unwrap();
    let whitened: Vec<Vec<f64>> = p.zt.chunks(n).map(|c| c.to_vec()).collect();
    let mut state = ParamState {
        z: whitened.iter().map(|w| cov.mul_l(w)).collect(),
        m: vec![vec![0.0; n]; k],
        phi: p.phi,
        nu: p.nu,
        lambda: p.lam,
        zeta: r.argmax(),
    };
    ctx.refresh_means(&mut state)?;
    let order = sort_order(&state.m.iter().map(|m| crate::circular::summary_of(m).map(|s| s.mean.value()).unwrap_or(0.0)).collect::<Vec<_>>());
    Ok(EmResult { state, whitened, resp: r, trace, converged, order })
}

struct SvmpEm<'a> {
    ctx: &'a ModelContext,
}

impl SvmpEm<'_> {
    fn weights(&self, zt: &[f64]) -> Vec<Vec<f64>> {
        let ctx = self.ctx;
        let (n, k, cov) = (ctx.n(), ctx.k(), ctx.cov.as_ref().unwrap());
        let logits: Vec<Vec<f64>> = (0..k - 1)
            .map(|j| cov.mul_l(&zt[j * n..(j + 1) * n]).iter().zip(&ctx.means[j]).map(|(a, b)| a + b).collect())
            .collect();
        (0..n)
            .map(|l| generalized_inverse_logit(&(0..k - 1).map(|j| logits[j][l]).collect::<Vec<_>>()))
            .collect()
    }

    fn latent_term(&self, r: &Responsibilities, zt: &[f64]) -> f64 {
        let w = self.weights(zt);
        let mut f = -0.5 * zt.iter().map(|x| x * x).sum::<f64>();
        for (l, wl) in w.iter().enumerate() {
            for c in 0..self.ctx.k() {
                f += xlogy(r.r[c][l], wl[c]);
            }
        }
        f
    }

    fn latent_grad(&self, r: &Responsibilities, zt: &[f64]) -> Vec<f64> {
        let (n, k, cov) = (self.ctx.n(), self.ctx.k(), self.ctx.cov.as_ref().unwrap());
        let w = self.weights(zt);
        let mut g = vec![0.0; zt.len()];
        for j in 0..k - 1 {
            let resid: Vec<f64> = (0..n).map(|l| r.r[j][l] - w[l][j]).collect();
            let h = cov.mul_lt(&resid);
            for l in 0..n {
                g[j * n + l] = h[l] - zt[j * n + l];
            }
        }
        g
    }

    fn objective(&self, r: &Responsibilities, zt: &[f64], m: &[f64], rho: &[f64]) -> f64 {
        let ys = self.ctx.ys();
        let mut f = r.entropy() + self.latent_term(r, zt);
        for c in 0..self.ctx.k() {
            let ln = vm_norm_ratio(rho[c]).0;
            f -= rho[c];
            for (l, y) in ys.iter().enumerate() {
                f += r.r[c][l] * (rho[c] * (y - m[c]).cos() - ln);
            }
        }
        f
    }
}

/// Maximizer over `ρ` of `Σ r (ρ cos(y−m) − ln I₀(ρ)) − ρ`: solves
/// `I₁/I₀(ρ) = (Σ r cos(y−m) − 1) / Σ r`.
fn svmp_rho_update(ys: &[f64], w: &[f64], m: f64) -> f64 {
    let tot: f64 = w.iter().sum();
    if tot <= 0.0 {
        return 1e-8;
    }
    a1_inv(((resultant(ys, w, m) - 1.0) / tot).max(0.0))
}

/// EM for `svmp` on whitened logit latents.
pub fn em_svmp<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, cfg: &EmConfig, rng: &mut R) -> Result<EmResult> {
    if spec.kind != ModelKind::Svmp {
        return domain("em_svmp needs an svmp spec");
    }
    let ctx = ModelContext::new(spec, data)?;
    restarts(cfg, rng, |rng| svmp_run(&ctx, cfg, rng))
}

fn svmp_run(ctx: &ModelContext, cfg: &EmConfig, rng: &mut crate::numeric::Rng) -> Result<EmResult> {
    let (n, k) = (ctx.n(), ctx.k());
    let em = SvmpEm { ctx };
    let ys = ctx.ys();
    let (mut labels, centres) = kmeans_circle(ys, k, rng);
    // Seed components in increasing order of mean direction.
    let mut sorted = centres.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    align_clusters(&mut labels, &centres, &sorted);
    let mut r = Responsibilities::one_hot(&labels, k);
    let mut zt = vec![0.0; (k - 1) * n];
    let mut m = sorted;
    let mut rho = vec![1.0; k];
    let mut step = cfg.step_size;
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 0..cfg.max_iters {
        if it > 0 {
            let w = em.weights(&zt);
            let ln: Vec<f64> = rho.iter().map(|r| vm_norm_ratio(*r).0).collect();
            r = Responsibilities::from_terms(
                |l| (0..k).map(|c| w[l][c].ln() + rho[c] * (ys[l] - m[c]).cos() - ln[c]).collect(),
                n,
                k,
            );
        }
        for c in 0..k {
            if let Some(mc) = mean_direction(ys, &r.r[c]) {
                m[c] = mc;
            }
            rho[c] = svmp_rho_update(ys, &r.r[c], m[c]);
        }
        ascend(&mut zt, &mut step, cfg.inner_iters, |z| em.latent_term(&r, z), |z| em.latent_grad(&r, z))?;
        if finish_trace(&mut trace, em.objective(&r, &zt, &m, &rho), cfg.tol) {
            converged = true;
            break;
        }
    }
    let cov = ctx.cov.as_ref().unwrap();
    let whitened: Vec<Vec<f64>> = zt.chunks(n).map(|c| c.to_vec()).collect();
    let state = ParamState {
        z: whitened.iter().map(|w| cov.mul_l(w)).collect(),
        m: m.iter().map(|v| vec![Angle::new(*v).value()]).collect(),
        phi: rho.iter().map(|r| vec![r.ln()]).collect(),
        zeta: r.argmax(),
        ..Default::default()
    };
    let order = sort_order(&m);
    Ok(EmResult { state, whitened, resp: r, trace, converged, order })
}

/// Runs the EM matching `spec.kind`; `iv` and `svm` have no EM.
pub fn em_for<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, cfg: &EmConfig, rng: &mut R) -> Result<EmResult> {
    match spec.kind {
        ModelKind::Ivm => em_ivm(data, spec.k, cfg, rng),
        ModelKind::Svmc => em_svmc(spec, data, cfg, rng),
        ModelKind::Svmp => em_svmp(spec, data, cfg, rng),
        k => domain(format!("no EM algorithm for {k}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circular::{bessel_i_ratio, summary_of, vm_draw};
    use crate::gp::{build_cov, GpSpec, SimplexPoint};
    use crate::models::categorical;
    use rand_distr::{Distribution, Gamma};
    use std::f64::consts::PI;

    fn locs<R: Rng>(n: usize, rng: &mut R) -> Vec<SimplexPoint> {
        let g = Gamma::new(1.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let v = [g.sample(rng), g.sample(rng), g.sample(rng)];
                let s: f64 = v.iter().sum();
                SimplexPoint::new([v[0] / s, v[1] / s, (1.0 - v[0] / s - v[1] / s).max(0.0)]).unwrap()
            })
            .collect()
    }

    fn mixture_data<R: Rng>(n: usize, rng: &mut R) -> Dataset {
        let ys = (0..n)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    vm_draw(PI / 2.0, 5.0, rng)
                } else {
                    vm_draw(1.5 * PI, 10.0, rng)
                }
            })
            .map(Angle::new)
            .collect();
        Dataset::new(locs(n, rng), ys).unwrap()
    }

    fn svmp_data<R: Rng>(n: usize, rng: &mut R) -> Dataset {
        let l = locs(n, rng);
        let cov = build_cov(&l, &GpSpec::default()).unwrap();
        let z = cov.draw(rng);
        let ys = z
            .iter()
            .map(|zl| {
                let w = generalized_inverse_logit(&[*zl]);
                let c = categorical(&w, rng);
                Angle::new(if c == 0 { vm_draw(PI / 2.0, 5.0, rng) } else { vm_draw(1.5 * PI, 10.0, rng) })
            })
            .collect();
        Dataset::new(l, ys).unwrap()
    }

    fn svmc_spec() -> ModelSpec {
        ModelSpec::new(ModelKind::Svmc, 2)
            .unwrap()
            .with_gp(GpSpec { omega: 0.1, sigma: 0.5, jitter: None })
            .unwrap()
            .with_means(vec![vec![0.0], vec![1.0], vec![0.0], vec![-1.0]])
            .unwrap()
    }

    fn monotone(trace: &[f64]) -> bool {
        trace.windows(2).all(|w| w[1] >= w[0] - 1e-8)
    }

    #[test]
    fn single_component_is_the_mle() {
        let mut rng = stream_rng(1, 0);
        let data = mixture_data(300, &mut rng);
        let res = em_ivm(&data, 1, &EmConfig::default(), &mut rng).unwrap();
        let s = summary_of(&data.ys()).unwrap();
        assert!(circ_dist(res.state.m[0][0], s.mean.value()) < 1e-12);
        let rho = res.state.phi[0][0].exp();
        assert!((a1(rho) - s.resultant_length).abs() < 1e-10);
        assert!(res.converged);
    }

    #[test]
    fn mixture_weights_recovered() {
        let mut rng = stream_rng(2, 0);
        let data = mixture_data(500, &mut rng);
        let res = em_ivm(&data, 2, &EmConfig::default(), &mut rng).unwrap();
        let s = &res.state;
        assert!((s.lambda[0] - 0.3).abs() < 0.07 && (s.lambda[1] - 0.7).abs() < 0.07, "{:?}", s.lambda);
        assert!(circ_dist(s.m[0][0], PI / 2.0) < 0.2 && circ_dist(s.m[1][0], 1.5 * PI) < 0.2);
        assert!(monotone(&res.trace));
        assert!(res.resp.max_column_error() < 1e-12);
    }

    #[test]
    fn traces_never_decrease() {
        for seed in 0..6 {
            let mut rng = stream_rng(100 + seed, 0);
            let cfg = EmConfig { restarts: 1, max_iters: 80, ..Default::default() };
            let data = mixture_data(60, &mut rng);
            let a = em_ivm(&data, 3, &cfg, &mut rng).unwrap();
            assert!(monotone(&a.trace), "ivm {seed}");
            let b = em_svmc(&svmc_spec(), &data, &cfg, &mut rng).unwrap();
            assert!(monotone(&b.trace), "svmc {seed}");
            let spec = ModelSpec::new(ModelKind::Svmp, 3).unwrap();
            let c = em_svmp(&spec, &svmp_data(60, &mut rng), &cfg, &mut rng).unwrap();
            assert!(monotone(&c.trace), "svmp {seed}");
            for r in [&a.resp, &b.resp, &c.resp] {
                assert!(r.max_column_error() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_are_valid_states() {
        let mut rng = stream_rng(3, 0);
        let data = mixture_data(40, &mut rng);
        let cfg = EmConfig { restarts: 2, max_iters: 50, ..Default::default() };
        let spec = svmc_spec();
        let res = em_svmc(&spec, &data, &cfg, &mut rng).unwrap();
        let ctx = ModelContext::new(&spec, &data).unwrap();
        assert!(ctx.log_posterior(&res.state).unwrap().is_finite());
        let spec = ModelSpec::new(ModelKind::Svmp, 2).unwrap();
        let res = em_svmp(&spec, &data, &cfg, &mut rng).unwrap();
        let ctx = ModelContext::new(&spec, &data).unwrap();
        assert!(ctx.log_posterior(&res.state).unwrap().is_finite());
        let res = em_ivm(&data, 2, &cfg, &mut rng).unwrap();
        let spec = ModelSpec::new(ModelKind::Ivm, 2).unwrap();
        assert!(ModelContext::new(&spec, &data).unwrap().log_posterior(&res.state).unwrap().is_finite());
    }

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        (0..x.len())
            .map(|i| {
                y[i] = x[i] + 1e-6;
                let up = f(&y);
                y[i] = x[i] - 1e-6;
                let dn = f(&y);
                y[i] = x[i];
                (up - dn) / 2e-6
            })
            .collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        crate::models::relative_error(a, b)
    }

    fn random_resp<R: Rng>(k: usize, n: usize, rng: &mut R) -> Responsibilities {
        let mut r = vec![vec![0.0; n]; k];
        for l in 0..n {
            let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = v.iter().sum();
            for c in 0..k {
                r[c][l] = v[c] / s;
            }
        }
        Responsibilities { r }
    }

    #[test]
    fn latent_gradients_match_finite_differences() {
        let mut rng = stream_rng(4, 0);
        for _ in 0..20 {
            let data = mixture_data(12, &mut rng);
            let ctx = ModelContext::new(&svmc_spec(), &data).unwrap();
            let em = SvmcEm { ctx: &ctx };
            let r = random_resp(2, 12, &mut rng);
            let phi: Vec<Vec<f64>> = (0..2).map(|_| (0..12).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
            let zt: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = em.latent_grad(&r, &phi, &zt);
            assert!(rel(&fd(|z| em.latent_term(&r, &phi, z), &zt), &g) < 1e-5);
            let m = em.angles(&zt).unwrap();
            let nu = vec![0.7, 1.1];
            let flat: Vec<f64> = phi.iter().flatten().copied().collect();
            let g = em.conc_grad(&r, &m, &nu, &flat);
            assert!(rel(&fd(|f| em.conc_term(&r, &m, &nu, f), &flat), &g) < 1e-5);

            let spec = ModelSpec::new(ModelKind::Svmp, 3).unwrap();
            let ctx = ModelContext::new(&spec, &data).unwrap();
            let em = SvmpEm { ctx: &ctx };
            let r = random_resp(3, 12, &mut rng);
            let zt: Vec<f64> = (0..24).map(|_| rng.random_range(-1.5..1.5)).collect();
            let g = em.latent_grad(&r, &zt);
            assert!(rel(&fd(|z| em.latent_term(&r, z), &zt), &g) < 1e-5);
        }
    }

    #[test]
    fn matching_weights_leave_pure_shrinkage() {
        let mut rng = stream_rng(5, 0);
        let data = mixture_data(10, &mut rng);
        let spec = ModelSpec::new(ModelKind::Svmp, 3).unwrap();
        let ctx = ModelContext::new(&spec, &data).unwrap();
        let em = SvmpEm { ctx: &ctx };
        let zt: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = em.weights(&zt);
        let r = Responsibilities { r: (0..3).map(|c| (0..10).map(|l| w[l][c]).collect()).collect() };
        let g = em.latent_grad(&r, &zt);
        for (a, b) in g.iter().zip(&zt) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn concentration_update_is_stationary() {
        let mut rng = stream_rng(6, 0);
        let data = mixture_data(200, &mut rng);
        let ys = data.ys();
        let w: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let m = mean_direction(&ys, &w).unwrap();
        let rho = svmp_rho_update(&ys, &w, m);
        let resid: f64 = ys.iter().zip(&w).map(|(y, r)| r * ((y - m).cos() - a1(rho))).sum::<f64>() - 1.0;
        assert!(resid.abs() < 1e-8, "{resid}");
        for rho in [0.3, 2.0, 17.0, 250.0] {
            assert!((bessel_i_ratio(-1, rho).unwrap() - bessel_i_ratio(1, rho).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn hierarchical_mean_update_maximizes() {
        let h = crate::models::HierPrior::default();
        let phi = [0.4, 1.2, 0.9, 1.7];
        let prec = phi.len() as f64 / (h.varsigma * h.varsigma) + 1.0 / (h.tau * h.tau);
        let nu = phi.iter().sum::<f64>() / (h.varsigma * h.varsigma) / prec;
        let f = |v: f64| {
            -phi.iter().map(|p| (p - v).powi(2)).sum::<f64>() / (2.0 * h.varsigma * h.varsigma) - v * v / (2.0 * h.tau * h.tau)
        };
        assert!(((f(nu + 1e-6) - f(nu - 1e-6)) / 2e-6).abs() < 1e-6);
        let sum = phi.iter().sum::<f64>();
        let closed = (sum / (h.varsigma * h.varsigma)) / (4.0 / (h.varsigma * h.varsigma) + 1.0 / (h.tau * h.tau));
        assert!((nu - closed).abs() < 1e-15);
    }

    #[test]
    fn svmp_means_recovered() {
        let mut rng = stream_rng(7, 0);
        let data = svmp_data(300, &mut rng);
        let spec = ModelSpec::new(ModelKind::Svmp, 2).unwrap();
        let res = em_svmp(&spec, &data, &EmConfig::default(), &mut rng).unwrap();
        let m: Vec<f64> = res.order.iter().map(|&c| res.state.m[c][0]).collect();
        assert!(circ_dist(m[0], PI / 2.0) < 0.3 && circ_dist(m[1], 1.5 * PI) < 0.3, "{m:?}");
        assert!(monotone(&res.trace));
    }

    #[test]
    fn bad_inputs_rejected() {
        let mut rng = stream_rng(8, 0);
        let cfg = EmConfig::default();
        assert!(em_ivm(&Dataset::default(), 2, &cfg, &mut rng).is_err());
        let data = mixture_data(10, &mut rng);
        assert!(em_svmc(&ModelSpec::new(ModelKind::Svmp, 2).unwrap(), &data, &cfg, &mut rng).is_err());
        assert!(em_for(&ModelSpec::new(ModelKind::Svm, 1).unwrap(), &data, &cfg, &mut rng).is_err());
        let bad = EmConfig { tol: 0.0, ..cfg };
        assert!(em_ivm(&data, 2, &bad, &mut rng).is_err());
    }
}
