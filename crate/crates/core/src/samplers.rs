//! Elliptical slice sampling, leapfrog HMC with warmup adaptation, and the
//! per-model fitting loops built from them.
//!
//! `svm` alternates ESS on the latent pair with HMC on the log-concentrations.
//! `svmc` adds an exact Gibbs step for the labels and a conjugate step for the
//! weights. `svmp`, `iv` and `ivm` are sampled jointly by HMC.

use crate::circular::{a1_inv, circ_diff, summary_of, vm_logpdf, Angle};
use crate::em::{em_for, EmConfig};
use crate::error::{domain, Error, Result};
use crate::gp::CovMatrix;
use crate::models::{
    categorical, ConcTarget, Dataset, IndepTarget, LikMode, ModelContext, ModelKind, ModelSpec, Param, ParamState,
    SvmpTarget, Target,
};
use crate::numeric::{log_sum_exp, stream_rng};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::{BufRead, Write};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EssConfig {
    pub max_shrink_iters: usize,
}

impl Default for EssConfig {
    fn default() -> Self {
        EssConfig { max_shrink_iters: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EssOutcome {
    pub state: Vec<f64>,
    pub loglik: f64,
    pub shrinks: usize,
    /// The bracket ran out; `state` is the input.
    pub exhausted: bool,
}

/// One elliptical slice move for `f ~ N(0, I_B ⊗ Σ)` where `f` stacks `B`
/// blocks of length `prior.n()`.
pub fn ess_step<R, F>(
    f: &[f64],
    cur_ll: f64,
    prior: &CovMatrix,
    mut loglik: F,
    cfg: &EssConfig,
    rng: &mut R,
) -> EssOutcome
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> f64,
{
    let n = prior.n();
    debug_assert_eq!(f.len() % n, 0);
    let nu: Vec<f64> = (0..f.len() / n).flat_map(|_| prior.draw(rng)).collect();
    let log_y = cur_ll + rng.random::<f64>().ln();
    let mut theta = rng.random::<f64>() * TAU;
    let (mut lo, mut hi) = (theta - TAU, theta);
    let mut prop = vec![0.0; f.len()];
    for shrinks in 0..cfg.max_shrink_iters {
        let (s, c) = theta.sin_cos();
        for i in 0..f.len() {
            prop[i] = f[i] * c + nu[i] * s;
        }
        let ll = loglik(&prop);
        if ll > log_y {
            return EssOutcome { state: prop, loglik: ll, shrinks, exhausted: false };
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        theta = lo + rng.random::<f64>() * (hi - lo);
    }
    EssOutcome { state: f.to_vec(), loglik: cur_ll, shrinks: cfg.max_shrink_iters, exhausted: true }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Diagonal of the momentum covariance.
    pub mass: Vec<f64>,
    /// Adapt step size and mass during warmup.
    pub adapt: bool,
}

impl HmcConfig {
    pub fn new(dim: usize) -> Self {
        HmcConfig { step_size: 0.1, leapfrog_steps: 16, mass: vec![1.0; dim], adapt: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.leapfrog_steps == 0 || self.mass.iter().any(|m| !(*m > 0.0)) {
            return domain("HMC needs a positive step size, at least one leapfrog step and a positive mass");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmcOutcome {
    pub accepted: bool,
    pub accept_prob: f64,
    /// `H(end) − H(start)`.
    pub energy_error: f64,
    pub divergent: bool,
}

/// Runs `steps` leapfrog steps in place and returns the final log density.
/// `grad` must hold the gradient at `q` on entry and holds it at the end point
/// on exit. Stops early at a non-finite density.
pub fn leapfrog<T: Target + ?Sized>(
    target: &T,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    steps: usize,
    mass: &[f64],
) -> f64 {
    let mut lp = f64::NAN;
    for i in 0..p.len() {
        p[i] += 0.5 * eps * grad[i];
    }
    for s in 0..steps {
        for i in 0..q.len() {
            q[i] += eps * p[i] / mass[i];
        }
        lp = target.log_density_grad(q, grad);
        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let w = if s + 1 == steps { 0.5 } else { 1.0 };
        for i in 0..p.len() {
            p[i] += w * eps * grad[i];
        }
    }
    lp
}

fn kinetic(p: &[f64], mass: &[f64]) -> f64 {
    p.iter().zip(mass).map(|(p, m)| 0.5 * p * p / m).sum()
}

/// One HMC transition; `q` is replaced when the proposal is accepted.
pub fn hmc_step<T: Target + ?Sized, R: Rng + ?Sized>(
    q: &mut Vec<f64>,
    target: &T,
    cfg: &HmcConfig,
    rng: &mut R,
) -> HmcOutcome {
    let d = q.len();
    let mut grad = vec![0.0; d];
    let lp0 = target.log_density_grad(q, &mut grad);
    let reject = HmcOutcome { accepted: false, accept_prob: 0.0, energy_error: f64::INFINITY, divergent: true };
    if !lp0.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return reject;
    }
    let mut p: Vec<f64> =
        cfg.mass.iter().map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let h0 = -lp0 + kinetic(&p, &cfg.mass);
    let mut qn = q.clone();
    let lp1 = leapfrog(target, &mut qn, &mut p, &mut grad, cfg.step_size, cfg.leapfrog_steps, &cfg.mass);
    let h1 = -lp1 + kinetic(&p, &cfg.mass);
    let dh = h1 - h0;
    if !dh.is_finite() {
        return reject;
    }
    let accept_prob = (-dh).exp().min(1.0);
    let accepted = rng.random::<f64>() < accept_prob;
    if accepted {
        *q = qn;
    }
    HmcOutcome { accepted, accept_prob, energy_error: dh, divergent: dh > 1000.0 }
}

#[derive(Clone, Debug)]
struct DualAverage {
    mu: f64,
    hbar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
    delta: f64,
}

impl DualAverage {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        DualAverage { mu: (10.0 * eps).ln(), hbar: 0.0, log_eps: eps.ln(), log_eps_bar: 0.0, t: 0.0, delta }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.t += 1.0;
        let eta = 1.0 / (self.t + Self::T0);
        self.hbar = (1.0 - eta) * self.hbar + eta * (self.delta - accept);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.hbar;
        let w = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
        self.log_eps.exp()
    }
}

#[derive(Clone, Debug, Default)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Shrunk variance estimate, toward `1e-3`.
    fn variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2.iter().map(|m| (n / (n + 5.0)) * m / (n - 1.0) + 1e-3 * 5.0 / (n + 5.0)).collect()
    }
}

/// HMC driver with dual-averaging step size and windowed diagonal mass
/// adaptation during the first `n_warmup` calls.
#[derive(Clone, Debug)]
pub struct HmcAdapter {
    pub cfg: HmcConfig,
    n_warmup: usize,
    iter: usize,
    da: DualAverage,
    welford: Welford,
    windows: Vec<(usize, usize)>,
    target_accept: f64,
    initialized: bool,
}

impl HmcAdapter {
    pub fn new(cfg: HmcConfig, n_warmup: usize, target_accept: f64) -> Self {
        let w = n_warmup;
        let windows = if cfg.adapt && w >= 100 {
            vec![(w * 15 / 100, w * 40 / 100), (w * 40 / 100, w * 85 / 100)]
        } else {
            Vec::new()
        };
        let da = DualAverage::new(cfg.step_size, target_accept);
        HmcAdapter { cfg, n_warmup, iter: 0, da, welford: Welford::default(), windows, target_accept, initialized: false }
    }

    pub fn step_size(&self) -> f64 {
        self.cfg.step_size
    }

    pub fn step<T: Target + ?Sized, R: Rng + ?Sized>(&mut self, q: &mut Vec<f64>, target: &T, rng: &mut R) -> HmcOutcome {
        let warm = self.cfg.adapt && self.iter < self.n_warmup;
        if warm && !self.initialized {
            self.cfg.step_size = reasonable_step(q, target, &self.cfg, rng);
            self.da = DualAverage::new(self.cfg.step_size, self.target_accept);
            self.initialized = true;
        }
        let base = self.cfg.step_size;
        if !warm {
            // Jitter the step to avoid resonant trajectory lengths.
            self.cfg.step_size = base * rng.random_range(0.9..1.1);
        }
        let out = hmc_step(q, target, &self.cfg, rng);
        self.cfg.step_size = base;
        if warm {
            self.cfg.step_size = self.da.update(out.accept_prob);
            if let Some(&(_, end)) = self.windows.iter().find(|(s, e)| (*s..*e).contains(&self.iter)) {
                self.welford.push(q);
                if self.iter + 1 == end {
                    self.cfg.mass = self.welford.variance().iter().map(|v| 1.0 / v).collect();
                    self.welford = Welford::default();
                    self.cfg.step_size = reasonable_step(q, target, &self.cfg, rng);
                    self.da = DualAverage::new(self.cfg.step_size, self.target_accept);
                }
            }
            if self.iter + 1 == self.n_warmup {
                self.cfg.step_size = self.da.log_eps_bar.exp();
            }
        }
        self.iter += 1;
        out
    }
}

/// Doubles or halves the step until one leapfrog step crosses acceptance ½.
fn reasonable_step<T: Target + ?Sized, R: Rng + ?Sized>(q: &[f64], target: &T, cfg: &HmcConfig, rng: &mut R) -> f64 {
    let d = q.len();
    let mut g0 = vec![0.0; d];
    let lp0 = target.log_density_grad(q, &mut g0);
    if !lp0.is_finite() {
        return cfg.step_size;
    }
    let p0: Vec<f64> = cfg.mass.iter().map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let h0 = -lp0 + kinetic(&p0, &cfg.mass);
    let log_accept = |eps: f64| {
        let (mut q1, mut p1, mut g1) = (q.to_vec(), p0.clone(), g0.clone());
        let lp = leapfrog(target, &mut q1, &mut p1, &mut g1, eps, 1, &cfg.mass);
        let h = -lp + kinetic(&p1, &cfg.mass);
        if h.is_finite() {
            h0 - h
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut eps = cfg.step_size;
    let up = log_accept(eps) > 0.5f64.ln();
    for _ in 0..50 {
        let next = if up { eps * 2.0 } else { eps * 0.5 };
        let crossed = (log_accept(next) > 0.5f64.ln()) != up;
        if crossed {
            return if up { eps } else { next };
        }
        eps = next;
    }
    eps
}

/// Where chains start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Regularized EM for mixtures, moment estimates otherwise.
    Em,
    Prior,
    Given(ParamState),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    /// Total iterations per chain, warmup included.
    pub n_iter: usize,
    pub n_warmup: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub param: Param,
    pub init: InitMode,
    pub ess: EssConfig,
    pub em: EmConfig,
}

impl SamplerSettings {
    /// Four chains; 10000 iterations with 5000 warmup, or 2000 with 1000 for `svmp`.
    pub fn for_kind(kind: ModelKind) -> Self {
        let (n_iter, n_warmup) = if kind == ModelKind::Svmp { (2000, 1000) } else { (10000, 5000) };
        SamplerSettings {
            n_iter,
            n_warmup,
            thin: 5,
            n_chains: 4,
            leapfrog_steps: 16,
            target_accept: 0.8,
            param: Param::NonCentered,
            init: InitMode::Em,
            ess: EssConfig::default(),
            em: EmConfig::default(),
        }
    }

    pub fn n_keep(&self) -> usize {
        self.n_iter.saturating_sub(self.n_warmup) / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.n_chains == 0 || self.leapfrog_steps == 0 || self.ess.max_shrink_iters == 0 {
            return domain("thin, n_chains, leapfrog_steps and max_shrink_iters must be at least 1");
        }
        if self.n_warmup >= self.n_iter {
            return domain("n_iter must exceed n_warmup");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return domain("target acceptance must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Split-R̂ and effective sample size of one scalar functional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub model: ModelKind,
    pub seed: u64,
    pub chain_id: u64,
    pub n_warmup: usize,
    pub n_keep: usize,
    pub thin: usize,
    pub draws: Vec<ParamState>,
    /// `ln p(θ | y)` of each kept draw.
    pub log_post: Vec<f64>,
    pub accept_rate: f64,
    pub step_size: f64,
    pub divergences: usize,
    pub ess_exhausted: usize,
    pub diagnostics: Vec<Diagnostic>,
    /// Set when the chain stopped early; `draws` then holds what was kept.
    pub aborted: Option<String>,
}

/// Several chains of one model.
#[derive(Clone, Debug)]
pub struct Fit {
    pub spec: ModelSpec,
    pub chains: Vec<Chain>,
    /// Pooled over chains.
    pub diagnostics: Vec<Diagnostic>,
}

impl Fit {
    pub fn draws(&self) -> impl Iterator<Item = &ParamState> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn max_rhat(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.rhat).fold(1.0, f64::max)
    }

    pub fn aborted(&self) -> Option<&str> {
        self.chains.iter().find_map(|c| c.aborted.as_deref())
    }
}

struct Recorder {
    chain: Chain,
    accepted: f64,
    steps: f64,
}

impl Recorder {
    fn new(spec: &ModelSpec, s: &SamplerSettings, seed: u64, chain_id: u64) -> Self {
        Recorder {
            chain: Chain {
                model: spec.kind,
                seed,
                chain_id,
                n_warmup: s.n_warmup,
                n_keep: 0,
                thin: s.thin,
                draws: Vec::with_capacity(s.n_keep()),
                log_post: Vec::with_capacity(s.n_keep()),
                accept_rate: 0.0,
                step_size: 0.0,
                divergences: 0,
                ess_exhausted: 0,
                diagnostics: Vec::new(),
                aborted: None,
            },
            accepted: 0.0,
            steps: 0.0,
        }
    }

    fn hmc(&mut self, it: usize, s: &SamplerSettings, out: &HmcOutcome) {
        if it >= s.n_warmup {
            self.accepted += out.accept_prob;
            self.steps += 1.0;
            self.chain.divergences += out.divergent as usize;
        }
    }

    fn keep(&mut self, ctx: &ModelContext, it: usize, s: &SamplerSettings, state: &ParamState) -> Result<()> {
        if it >= s.n_warmup && (it - s.n_warmup + 1) % s.thin == 0 && self.chain.draws.len() < s.n_keep() {
            self.chain.log_post.push(ctx.log_posterior(state)?);
            self.chain.draws.push(state.clone());
        }
        Ok(())
    }

    fn finish(mut self, ctx: &ModelContext, step_size: f64, err: Option<Error>) -> Chain {
        self.chain.n_keep = self.chain.draws.len();
        self.chain.accept_rate = if self.steps > 0.0 { self.accepted / self.steps } else { 0.0 };
        self.chain.step_size = step_size;
        self.chain.aborted = err.map(|e| e.to_string());
        self.chain.diagnostics = diagnostics(ctx, std::slice::from_ref(&self.chain));
        self.chain
    }
}

/// `Σ_ℓ w_ℓ ρ_ℓ cos(y_ℓ − atan2(f₂+μ₂, f₁+μ₁))` for one component's stacked
/// deviations; the normalizers do not depend on the latents.
fn latent_loglik(ys: &[f64], mu1: &[f64], mu2: &[f64], rho: &[f64], include: &dyn Fn(usize) -> bool, f: &[f64]) -> f64 {
    let n = ys.len();
    let mut ll = 0.0;
    for l in 0..n {
        if !include(l) {
            continue;
        }
        let (a, b) = (f[l] + mu1[l], f[n + l] + mu2[l]);
        let r = a.hypot(b);
        if !(r > 1e-300) {
            return f64::NEG_INFINITY;
        }
        ll += rho[l] * (ys[l].cos() * a + ys[l].sin() * b) / r;
    }
    ll
}

/// ESS on each component's latent pair, then refreshes the means.
fn ess_latents<R: Rng + ?Sized>(
    ctx: &ModelContext,
    s: &mut ParamState,
    cfg: &EssConfig,
    rng: &mut R,
) -> Result<usize> {
    let n = ctx.n();
    let cov = ctx.cov.as_ref().expect("spatial model");
    let mut exhausted = 0;
    for c in 0..ctx.k() {
        let rho: Vec<f64> = (0..n).map(|l| s.rho(c, l)).collect();
        let (mu1, mu2) = (&ctx.means[2 * c], &ctx.means[2 * c + 1]);
        let labels = s.zeta.clone();
        let include = |l: usize| labels.is_empty() || labels[l] == c;
        let ll = |f: &[f64]| latent_loglik(ctx.ys(), mu1, mu2, &rho, &include, f);
        let f: Vec<f64> = s.z[2 * c].iter().chain(&s.z[2 * c + 1]).copied().collect();
        let cur = ll(&f);
        let out = ess_step(&f, cur, cov, ll, cfg, rng);
        exhausted += out.exhausted as usize;
        s.z[2 * c] = out.state[..n].to_vec();
        s.z[2 * c + 1] = out.state[n..].to_vec();
    }
    ctx.refresh_means(s)?;
    Ok(exhausted)
}

/// Exact label draw; returns the largest deviation of the used probabilities from summing to one.
fn gibbs_labels<R: Rng + ?Sized>(ctx: &ModelContext, s: &mut ParamState, rng: &mut R) -> f64 {
    let (n, k) = (ctx.n(), ctx.k());
    let ys = ctx.ys();
    let mut worst: f64 = 0.0;
    s.zeta.resize(n, 0);
    for l in 0..n {
        let t: Vec<f64> = (0..k).map(|c| s.lambda[c].ln() + vm_logpdf(ys[l], s.mean(c, l), s.rho(c, l))).collect();
        let z = log_sum_exp(&t);
        let p: Vec<f64> = t.iter().map(|v| (v - z).exp()).collect();
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        s.zeta[l] = categorical(&p, rng);
    }
    worst
}

fn dirichlet_draw<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = alpha.iter().map(|a| Gamma::new(*a, 1.0).unwrap().sample(rng).max(1e-300)).collect();
    let t: f64 = g.iter().sum();
    g.into_iter().map(|v| v / t).collect()
}

fn moment_init(ctx: &ModelContext) -> (f64, f64) {
    match summary_of(ctx.ys()) {
        Ok(s) => (s.mean.value(), a1_inv(s.resultant_length).clamp(1e-3, 1e3)),
        Err(_) => (0.0, 1e-3),
    }
}

/// Starting state for one chain.
pub fn initial_state<R: Rng + ?Sized>(ctx: &ModelContext, init: &InitMode, em: &EmConfig, rng: &mut R) -> Result<ParamState> {
    let kind = ctx.spec.kind;
    let mut s = match init {
        InitMode::Given(s) => s.clone(),
        InitMode::Prior if !matches!(kind, ModelKind::Iv | ModelKind::Ivm) || ctx.spec.indep.b > 0.0 => {
            ctx.draw_prior(rng)?
        }
        InitMode::Em if kind.is_mixture() => em_for(&ctx.spec, &ctx.data, em, rng)?.state,
        _ => {
            let (m, rho) = moment_init(ctx);
            let k = ctx.k();
            match kind {
                ModelKind::Svm => {
                    let mut s = ctx.draw_prior(rng)?;
                    s.nu = vec![rho.ln()];
                    s.phi = vec![vec![rho.ln(); ctx.n()]];
                    s
                }
                _ => ParamState {
                    m: (0..k).map(|c| vec![Angle::new(m + TAU * c as f64 / k as f64).value()]).collect(),
                    phi: vec![vec![rho.ln()]; k],
                    lambda: if kind == ModelKind::Ivm { vec![1.0 / k as f64; k] } else { Vec::new() },
                    ..Default::default()
                },
            }
        }
    };
    if kind == ModelKind::Svmc {
        if s.zeta.len() != ctx.n() {
            s.zeta = (0..ctx.n()).map(|_| categorical(&s.lambda, rng)).collect();
        }
        // EM can drive a weight to zero; the sampler needs the interior.
        let floor = 1e-6;
        s.lambda.iter_mut().for_each(|l| *l = l.max(floor));
        let t: f64 = s.lambda.iter().sum();
        s.lambda.iter_mut().for_each(|l| *l /= t);
    }
    if kind.is_spatial() && kind != ModelKind::Svmp {
        ctx.refresh_means(&mut s)?;
        for c in 0..ctx.k() {
            let nu = s.nu[c];
            s.phi[c].iter_mut().for_each(|p| *p = p.clamp(nu - 10.0, nu + 10.0).clamp(-15.0, 8.0));
        }
    } else {
        s.zeta.clear();
        s.phi.iter_mut().flatten().for_each(|p| *p = p.clamp(-15.0, 8.0));
    }
    ctx.check_state(&s)?;
    Ok(s)
}

fn run_chain(ctx: &ModelContext, set: &SamplerSettings, seed: u64, chain_id: u64) -> Result<Chain> {
    let mut rng = stream_rng(seed, chain_id);
    let state = initial_state(ctx, &set.init, &set.em, &mut rng)?;
    let mut rec = Recorder::new(&ctx.spec, set, seed, chain_id);
    let (step, err) = match ctx.spec.kind {
        ModelKind::Svm | ModelKind::Svmc => blocked_loop(ctx, set, state, &mut rec, &mut rng),
        _ => joint_loop(ctx, set, state, &mut rec, &mut rng),
    };
    Ok(rec.finish(ctx, step, err))
}

fn blocked_loop(
    ctx: &ModelContext,
    set: &SamplerSettings,
    mut s: ParamState,
    rec: &mut Recorder,
    rng: &mut crate::numeric::Rng,
) -> (f64, Option<Error>) {
    let labels = ctx.spec.kind == ModelKind::Svmc;
    let mode = if labels { LikMode::Labels } else { LikMode::Marginal };
    let dim = ctx.k() * (ctx.n() + 1);
    let mut cfg = HmcConfig::new(dim);
    cfg.leapfrog_steps = set.leapfrog_steps;
    let mut adapter = HmcAdapter::new(cfg, set.n_warmup, set.target_accept);
    for it in 0..set.n_iter {
        let res = (|| -> Result<()> {
            if labels {
                gibbs_labels(ctx, &mut s, rng);
            }
            rec.chain.ess_exhausted += ess_latents(ctx, &mut s, &set.ess, rng)?;
            if labels {
                let mut alpha = vec![ctx.spec.dirichlet_alpha; ctx.k()];
                s.zeta.iter().for_each(|&c| alpha[c] += 1.0);
                s.lambda = dirichlet_draw(&alpha, rng);
            }
            let t = ConcTarget::new(ctx, &s, set.param, mode)?;
            let mut q = t.coords(&s);
            let out = adapter.step(&mut q, &t, rng);
            rec.hmc(it, set, &out);
            s = t.state_at(&q, &s);
            rec.keep(ctx, it, set, &s)
        })();
        if let Err(e) = res {
            return (adapter.step_size(), Some(Error::Numeric(format!("iteration {it}: {e}"))));
        }
    }
    (adapter.step_size(), None)
}

fn joint_loop(
    ctx: &ModelContext,
    set: &SamplerSettings,
    s: ParamState,
    rec: &mut Recorder,
    rng: &mut crate::numeric::Rng,
) -> (f64, Option<Error>) {
    enum Joint<'a> {
        P(SvmpTarget<'a>),
        I(IndepTarget<'a>),
    }
    let target = match ctx.spec.kind {
        ModelKind::Svmp => SvmpTarget::new(ctx, set.param).map(Joint::P),
        _ => IndepTarget::new(ctx).map(Joint::I),
    };
    let target = match target {
        Ok(t) => t,
        Err(e) => return (0.0, Some(e)),
    };
    let (mut q, t): (Vec<f64>, &dyn Target) = match &target {
        Joint::P(t) => (t.coords(&s), t),
        Joint::I(t) => (t.coords(&s), t),
    };
    let state_at = |q: &[f64]| match &target {
        Joint::P(t) => t.state_at(q),
        Joint::I(t) => t.state_at(q),
    };
    let mut cfg = HmcConfig::new(q.len());
    cfg.leapfrog_steps = set.leapfrog_steps;
    let mut adapter = HmcAdapter::new(cfg, set.n_warmup, set.target_accept);
    for it in 0..set.n_iter {
        let out = adapter.step(&mut q, t, rng);
        rec.hmc(it, set, &out);
        if let Err(e) = rec.keep(ctx, it, set, &state_at(&q)) {
            return (adapter.step_size(), Some(Error::Numeric(format!("iteration {it}: {e}"))));
        }
    }
    (adapter.step_size(), None)
}

fn check_kind(spec: &ModelSpec, kind: ModelKind) -> Result<()> {
    if spec.kind != kind {
        return domain(format!("expected a {kind} spec, got {}", spec.kind));
    }
    Ok(())
}

fn single_chain<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, set: &SamplerSettings, rng: &mut R) -> Result<Chain> {
    set.validate()?;
    let ctx = ModelContext::new(spec, data)?;
    run_chain(&ctx, set, rng.random(), 0)
}

/// One blocked-Gibbs chain for `svm`.
pub fn fit_svm<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, set: &SamplerSettings, rng: &mut R) -> Result<Chain> {
    check_kind(spec, ModelKind::Svm)?;
    single_chain(spec, data, set, rng)
}

/// One blocked-Gibbs chain for `svmc`.
pub fn fit_svmc<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, set: &SamplerSettings, rng: &mut R) -> Result<Chain> {
    check_kind(spec, ModelKind::Svmc)?;
    if spec.k < 2 {
        return domain("svmc needs at least two components");
    }
    single_chain(spec, data, set, rng)
}

/// One HMC chain for `svmp`.
pub fn fit_svmp<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, set: &SamplerSettings, rng: &mut R) -> Result<Chain> {
    check_kind(spec, ModelKind::Svmp)?;
    single_chain(spec, data, set, rng)
}

/// One HMC chain for `iv` or `ivm`.
pub fn fit_indep<R: Rng + ?Sized>(spec: &ModelSpec, data: &Dataset, set: &SamplerSettings, rng: &mut R) -> Result<Chain> {
    if spec.kind.is_spatial() {
        return domain("fit_indep needs an iv or ivm spec");
    }
    single_chain(spec, data, set, rng)
}

/// `set.n_chains` chains in parallel; chain `c` uses stream `c` of `seed`.
pub fn fit(spec: &ModelSpec, data: &Dataset, set: &SamplerSettings, seed: u64) -> Result<Fit> {
    set.validate()?;
    let ctx = ModelContext::new(spec, data)?;
    let chains = (0..set.n_chains as u64)
        .into_par_iter()
        .map(|c| run_chain(&ctx, set, seed, c))
        .collect::<Result<Vec<_>>>()?;
    let diagnostics = diagnostics(&ctx, &chains);
    Ok(Fit { spec: spec.clone(), chains, diagnostics })
}

/// A named scalar summary of a draw; angles are flagged circular.
#[derive(Clone, Debug, PartialEq)]
pub struct Functional {
    pub name: String,
    pub value: f64,
    pub circular: bool,
}

fn circ_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0.0), |(s, c), x| (s + x.sin(), c + x.cos()));
    Angle::new(s.atan2(c)).value()
}

/// Scalar functionals monitored for convergence.
pub fn functionals(ctx: &ModelContext, s: &ParamState) -> Vec<Functional> {
    let (n, k) = (ctx.n(), ctx.k());
    let lin = |name: String, value: f64| Functional { name, value, circular: false };
    let circ = |name: String, value: f64| Functional { name, value, circular: true };
    let mut out = Vec::new();
    for c in 0..k {
        let tag = if k == 1 { String::new() } else { format!("[{c}]") };
        match ctx.spec.kind {
            ModelKind::Iv | ModelKind::Ivm | ModelKind::Svmp => {
                out.push(circ(format!("m{tag}"), s.m[c][0]));
                out.push(lin(format!("rho{tag}"), s.phi[c][0].exp()));
            }
            ModelKind::Svm | ModelKind::Svmc => {
                out.push(circ(format!("m_bar{tag}"), circ_mean(s.m[c].iter().copied())));
                out.push(lin(format!("rho_bar{tag}"), s.phi[c].iter().map(|p| p.exp()).sum::<f64>() / n as f64));
                out.push(lin(format!("nu{tag}"), s.nu[c]));
            }
        }
        if matches!(ctx.spec.kind, ModelKind::Ivm | ModelKind::Svmc) {
            out.push(lin(format!("lambda{tag}"), s.lambda[c]));
        }
        if ctx.spec.kind == ModelKind::Svmp {
            let avg = (0..n).map(|l| ctx.weights_at(s, l)[c]).sum::<f64>() / n as f64;
            out.push(lin(format!("lambda_bar{tag}"), avg));
        }
    }
    out
}

/// Pooled split-R̂ and ESS over all chains for every functional and the log posterior.
pub fn diagnostics(ctx: &ModelContext, chains: &[Chain]) -> Vec<Diagnostic> {
    if chains.iter().any(|c| c.draws.len() < 4) {
        return Vec::new();
    }
    let per_chain: Vec<Vec<Vec<Functional>>> =
        chains.iter().map(|c| c.draws.iter().map(|s| functionals(ctx, s)).collect()).collect();
    let len = per_chain.iter().map(|c| c.len()).min().unwrap();
    let nf = per_chain[0][0].len();
    let mut out = Vec::new();
    for f in 0..nf {
        let first = &per_chain[0][0][f];
        let mut series: Vec<Vec<f64>> =
            per_chain.iter().map(|c| c[..len].iter().map(|d| d[f].value).collect()).collect();
        if first.circular {
            let centre = circ_mean(series.iter().flatten().copied());
            series.iter_mut().flatten().for_each(|x| *x = circ_diff(*x, centre));
        }
        let (rhat, ess) = split_rhat_ess(&series);
        out.push(Diagnostic { name: first.name.clone(), rhat, ess });
    }
    let lp: Vec<Vec<f64>> = chains.iter().map(|c| c.log_post[..len].to_vec()).collect();
    let (rhat, ess) = split_rhat_ess(&lp);
    out.push(Diagnostic { name: "log_post".into(), rhat, ess });
    out
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Split-R̂ and multi-chain effective sample size (Geyer initial positive
/// sequence) of equal-length chains.
pub fn split_rhat_ess(chains: &[Vec<f64>]) -> (f64, f64) {
    let half = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    if half < 2 {
        return (f64::NAN, f64::NAN);
    }
    let parts: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[half..2 * half]]).collect();
    let m = parts.len() as f64;
    let n = half as f64;
    let stats: Vec<(f64, f64)> = parts.iter().map(|p| mean_var(p)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let b = n * mean_var(&means).1;
    let var_plus = (n - 1.0) / n * w + b / n;
    if w <= 0.0 || !w.is_finite() {
        let constant = b == 0.0;
        return (if constant { 1.0 } else { f64::INFINITY }, if constant { m * n } else { 1.0 });
    }
    let rhat = (var_plus / w).sqrt();
    let acov = |p: &[f64], mean: f64, t: usize| {
        (0..p.len() - t).map(|i| (p[i] - mean) * (p[i + t] - mean)).sum::<f64>() / p.len() as f64
    };
    let rho_at = |t: usize| {
        let avg = parts.iter().zip(&means).map(|(p, mu)| acov(p, *mu, t)).sum::<f64>() / m;
        1.0 - (w - avg) / var_plus
    };
    let mut tau = -1.0;
    let mut t = 0;
    while t + 1 < half {
        let pair = rho_at(t) + rho_at(t + 1);
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        t += 2;
    }
    let tau = tau.max(1.0 / (m * n).log10());
    (rhat, m * n / tau)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn spec_hash(spec: &ModelSpec) -> String {
    format!("{:016x}", fnv1a(serde_json::to_string(spec).expect("spec serializes").as_bytes()))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Meta {
        model: ModelKind,
        seed: u64,
        chain: u64,
        n_warmup: usize,
        n_keep: usize,
        thin: usize,
        accept_rate: f64,
        step_size: f64,
        divergences: usize,
        ess_exhausted: usize,
        aborted: Option<String>,
        diagnostics: Vec<Diagnostic>,
        spec_hash: String,
        spec: ModelSpec,
    },
    Draw {
        index: usize,
        log_post: f64,
        #[serde(flatten)]
        state: ParamState,
    },
}

/// Writes a header record followed by one JSON line per draw.
pub fn write_chain_jsonl<W: Write>(chain: &Chain, spec: &ModelSpec, mut w: W) -> Result<()> {
    let meta = Record::Meta {
        model: chain.model,
        seed: chain.seed,
        chain: chain.chain_id,
        n_warmup: chain.n_warmup,
        n_keep: chain.n_keep,
        thin: chain.thin,
        accept_rate: chain.accept_rate,
        step_size: chain.step_size,
        divergences: chain.divergences,
        ess_exhausted: chain.ess_exhausted,
        aborted: chain.aborted.clone(),
        diagnostics: chain.diagnostics.clone(),
        spec_hash: spec_hash(spec),
        spec: spec.clone(),
    };
    serde_json::to_writer(&mut w, &meta)?;
    writeln!(w)?;
    for (i, (s, lp)) in chain.draws.iter().zip(&chain.log_post).enumerate() {
        serde_json::to_writer(&mut w, &Record::Draw { index: i, log_post: *lp, state: s.clone() })?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_chain_jsonl<R: BufRead>(r: R) -> Result<(ModelSpec, Chain)> {
    let mut spec_chain: Option<(ModelSpec, Chain)> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::Input { line: i + 1, msg: e.to_string() })?;
        match (rec, &mut spec_chain) {
            (
                Record::Meta {
                    model,
                    seed,
                    chain,
                    n_warmup,
                    n_keep,
                    thin,
                    accept_rate,
                    step_size,
                    divergences,
                    ess_exhausted,
                    aborted,
                    diagnostics,
                    spec_hash: h,
                    spec,
                },
                None,
            ) => {
                if h != spec_hash(&spec) {
                    return Err(Error::Input { line: i + 1, msg: "spec hash does not match the stored spec".into() });
                }
                let c = Chain {
                    model,
                    seed,
                    chain_id: chain,
                    n_warmup,
                    n_keep,
                    thin,
                    draws: Vec::with_capacity(n_keep),
                    log_post: Vec::with_capacity(n_keep),
                    accept_rate,
                    step_size,
                    divergences,
                    ess_exhausted,
                    diagnostics,
                    aborted,
                };
                spec_chain = Some((spec, c));
            }
            (Record::Draw { log_post, state, .. }, Some((_, c))) => {
                c.draws.push(state);
                c.log_post.push(log_post);
            }
            _ => return Err(Error::Input { line: i + 1, msg: "expected one header record first".into() }),
        }
    }
    let (spec, chain) = spec_chain.ok_or(Error::Input { line: 0, msg: "empty chain file".into() })?;
    if chain.draws.len() != chain.n_keep {
        return Err(Error::Input {
            line: 0,
            msg: format!("header announces {} draws, found {}", chain.n_keep, chain.draws.len()),
        });
    }
    Ok((spec, chain))
}

/// Posterior mean and central 95% interval of one parameter, averaged over locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: ModelKind,
    pub params: Vec<ParamSummary>,
    pub diagnostics: Vec<Diagnostic>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (i, frac) = (h.floor() as usize, h - h.floor());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// (center, low, high) of draws of one scalar; circular intervals are
/// expressed as offsets around the circular mean.
fn interval(xs: &[f64], circular: bool) -> (f64, f64, f64) {
    let (centre, mut dev): (f64, Vec<f64>) = if circular {
        let c = circ_mean(xs.iter().copied());
        (c, xs.iter().map(|x| circ_diff(*x, c)).collect())
    } else {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (m, xs.iter().map(|x| x - m).collect())
    };
    dev.sort_by(|a, b| a.total_cmp(b));
    (centre, quantile(&dev, 0.025), quantile(&dev, 0.975))
}

/// Per-location summaries averaged over locations. Circular centers are
/// averaged on the circle and the interval offsets arithmetically, so an
/// angular interval may extend past `[0, 2π)`.
fn location_average(per_loc: &[Vec<f64>], circular: bool, name: String) -> ParamSummary {
    let stats: Vec<(f64, f64, f64)> = per_loc.iter().map(|xs| interval(xs, circular)).collect();
    let n = stats.len() as f64;
    let lo = stats.iter().map(|s| s.1).sum::<f64>() / n;
    let hi = stats.iter().map(|s| s.2).sum::<f64>() / n;
    let mean = if circular {
        circ_mean(stats.iter().map(|s| s.0))
    } else {
        stats.iter().map(|s| s.0).sum::<f64>() / n
    };
    ParamSummary { name, mean, ci_low: mean + lo, ci_high: mean + hi }
}

/// Posterior summary with components ordered by the circular mean of their means.
pub fn summarize(spec: &ModelSpec, data: &Dataset, chains: &[Chain]) -> Result<FitSummary> {
    let ctx = ModelContext::new(spec, data)?;
    let draws: Vec<&ParamState> = chains.iter().flat_map(|c| c.draws.iter()).collect();
    if draws.is_empty() {
        return domain("no draws to summarize");
    }
    let (n, k, kind) = (ctx.n(), ctx.k(), spec.kind);
    let local = matches!(kind, ModelKind::Svm | ModelKind::Svmc);
    let order = {
        let centres: Vec<f64> =
            (0..k).map(|c| circ_mean(draws.iter().flat_map(|d| d.m[c].iter().copied()))).collect();
        let mut o: Vec<usize> = (0..k).collect();
        o.sort_by(|a, b| centres[*a].total_cmp(&centres[*b]));
        o
    };
    let n_loc = if local { n } else { 1 };
    let per_loc = |f: &dyn Fn(&ParamState, usize) -> f64| -> Vec<Vec<f64>> {
        (0..n_loc).map(|l| draws.iter().map(|d| f(d, l)).collect()).collect()
    };
    let bar = if local { "_bar" } else { "" };
    let mut params = Vec::new();
    for (rank, &c) in order.iter().enumerate() {
        let tag = if k == 1 { String::new() } else { format!("[{}]", rank + 1) };
        params.push(location_average(&per_loc(&|d, l| d.mean(c, l)), true, format!("m{bar}{tag}")));
        params.push(location_average(&per_loc(&|d, l| d.rho(c, l)), false, format!("rho{bar}{tag}")));
        if local {
            params.push(location_average(&per_loc(&|d, _| d.nu[c]), false, format!("nu{tag}")));
        }
        match kind {
            ModelKind::Ivm | ModelKind::Svmc => {
                params.push(location_average(&per_loc(&|d, _| d.lambda[c]), false, format!("lambda{tag}")));
            }
            ModelKind::Svmp => {
                let w: Vec<Vec<f64>> =
                    (0..n).map(|l| draws.iter().map(|d| ctx.weights_at(d, l)[c]).collect()).collect();
                params.push(location_average(&w, false, format!("lambda_bar{tag}")));
            }
            _ => {}
        }
    }
    Ok(FitSummary { model: kind, params, diagnostics: diagnostics(&ctx, chains) })
}
