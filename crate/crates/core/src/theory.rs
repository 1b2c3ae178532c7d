//! Prior circular moments of the spatial models, bounds on the expected
//! product of two correlated logistic weights, and Monte Carlo oracles.

use crate::circular::{
    a1, arctan_star, bessel_i_scaled, vm_draw, Angle, CircularSummary, Pn2Params, pn2_sample,
};
use crate::error::{domain, Result};
use crate::models::categorical;
use crate::numeric::{integrate, norm_cdf, norm_pdf, stream_rng};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Circular mean and variance; `degenerate` marks a vanishing resultant,
/// in which case the mean is reported as π.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Angle,
    pub variance: f64,
    pub degenerate: bool,
}

/// `I₂/I₀`.
fn a2(rho: f64) -> f64 {
    if rho == 0.0 {
        0.0
    } else {
        bessel_i_scaled(2, rho) / bessel_i_scaled(0, rho)
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Moments of `y ~ vM(m, ρ)` with `m` the angle of `N(μ₀(cos α, sin α), σ²I)`.
pub fn svm_prior_moments(mu0: f64, alpha_mu: f64, sigma: f64, rho: f64) -> Result<Moments> {
    if !(mu0 >= 0.0 && sigma > 0.0 && rho >= 0.0) {
        return domain("need mu0 >= 0, sigma > 0 and rho >= 0");
    }
    let beta = mu0 * mu0 / (4.0 * sigma * sigma);
    let shrink = (PI * beta / 2.0).sqrt() * (bessel_i_scaled(0, beta) + bessel_i_scaled(1, beta));
    let variance = (1.0 - a1(rho) * shrink).clamp(0.0, 1.0);
    Ok(Moments { mean: Angle::new(alpha_mu), variance, degenerate: mu0 == 0.0 || rho == 0.0 })
}

fn check_vm_components(ms: &[f64], rhos: &[f64]) -> Result<()> {
    if ms.is_empty() || ms.len() != rhos.len() {
        return domain("need matching, nonempty component means and concentrations");
    }
    if ms.iter().any(|m| !m.is_finite()) || rhos.iter().any(|r| !(*r >= 0.0)) {
        return domain("component means must be finite and concentrations nonnegative");
    }
    Ok(())
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return domain(format!("{what} must be nonnegative and sum to 1"));
    }
    Ok(())
}

/// Mean direction of `Σ w_k A₁(ρ_k) e^{i m_k}` and the matching variance.
fn weighted_moments(ms: &[f64], rhos: &[f64], w: &[f64]) -> Moments {
    let (mut s, mut c) = (0.0, 0.0);
    for k in 0..ms.len() {
        let r = w[k] * a1(rhos[k]);
        s += r * ms[k].sin();
        c += r * ms[k].cos();
    }
    if s.hypot(c) < 1e-14 {
        return Moments { mean: Angle::new(PI), variance: 1.0, degenerate: true };
    }
    let mean = arctan_star(c, s).expect("nonzero resultant");
    let variance = 1.0 - (0..ms.len()).map(|k| w[k] * a1(rhos[k]) * (ms[k] - mean.value()).cos()).sum::<f64>();
    Moments { mean, variance: variance.clamp(0.0, 1.0), degenerate: false }
}

/// Moments of a von Mises mixture with membership probabilities `probs`.
pub fn svmp_prior_moments(ms: &[f64], rhos: &[f64], probs: &[f64]) -> Result<Moments> {
    check_vm_components(ms, rhos)?;
    if probs.len() != ms.len() {
        return domain("need one probability per component");
    }
    check_simplex(probs, "membership probabilities")?;
    Ok(weighted_moments(ms, rhos, probs))
}

/// Two equally likely components.
pub fn svmp2_prior_moments(m1: f64, m2: f64, rho1: f64, rho2: f64) -> Result<Moments> {
    svmp_prior_moments(&[m1, m2], &[rho1, rho2], &[0.5, 0.5])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    /// Single component, a vanishing mean resultant, or a vanishing
    /// denominator; `value` is then 0.
    pub degenerate: bool,
}

/// Circular correlation of two mixture observations whose labels follow
/// `joint[k][k']`, with independent von Mises noise given the labels.
pub fn svmp_prior_correlation(ms: &[f64], rhos: &[f64], joint: &[Vec<f64>]) -> Result<Correlation> {
    check_vm_components(ms, rhos)?;
    let k = ms.len();
    if joint.len() != k || joint.iter().any(|r| r.len() != k) {
        return domain("joint membership table must be K×K");
    }
    let flat: Vec<f64> = joint.iter().flatten().copied().collect();
    check_simplex(&flat, "joint membership probabilities")?;
    if k == 1 {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    let row: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..k).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let (first, second) = (weighted_moments(ms, rhos, &row), weighted_moments(ms, rhos, &col));
    if first.degenerate || second.degenerate {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    let (alpha, alpha2) = (first.mean.value(), second.mean.value());
    let spread = |p: &[f64], a: f64| 1.0 - (0..k).map(|c| p[c] * a2(rhos[c]) * (2.0 * (ms[c] - a)).cos()).sum::<f64>();
    let den = (spread(&row, alpha) * spread(&col, alpha2)).sqrt();
    let mut num = 0.0;
    for i in 0..k {
        for j in 0..k {
            let (u, v) = (ms[i] - alpha, ms[j] - alpha2);
            num += joint[i][j] * a1(rhos[i]) * a1(rhos[j]) * ((u - v).cos() - (u + v).cos());
        }
    }
    if !(den > 1e-15) {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    Ok(Correlation { value: (num / den).clamp(-1.0, 1.0), degenerate: false })
}

/// `E[ψ⁻¹(Z)]` for zero-mean normal `Z`, any variance.
pub fn logistic_expectation() -> f64 {
    0.5
}

/// Parameters of the bound on `E[ψ⁻¹(Z)ψ⁻¹(Z′)]` for standard normals with correlation `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticBoundInputs {
    pub s: f64,
    pub z_eps: f64,
}

impl LogisticBoundInputs {
    pub fn new(s: f64, z_eps: f64) -> Result<Self> {
        if !(s.abs() < 1.0) {
            return domain(format!("correlation must lie in (-1, 1), got {s}"));
        }
        if !(z_eps > 0.0 && z_eps <= 2.0) {
            return domain(format!("z_eps must lie in (0, 2], got {z_eps}"));
        }
        Ok(LogisticBoundInputs { s, z_eps })
    }

    /// `(1 − s²) z_ε / s`; undefined at `s = 0`.
    pub fn vartheta(&self) -> Option<f64> {
        (self.s != 0.0).then(|| (1.0 - self.s * self.s) * self.z_eps / self.s)
    }

    fn cond_sd(&self) -> f64 {
        (1.0 - self.s * self.s).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticBounds {
    pub lower: f64,
    pub upper: f64,
    /// `E[f(Z)f(Z′)]` for the piecewise-linear surrogate `f`.
    pub f_product_expectation: f64,
}

/// Piecewise-linear surrogate for the logistic function.
pub fn logistic_surrogate(z: f64, z_eps: f64) -> f64 {
    if z < -z_eps {
        0.0
    } else if z > z_eps {
        1.0
    } else {
        0.5 + z / (2.0 * z_eps)
    }
}

const TAIL: f64 = 12.0;
const QUAD_TOL: f64 = 1e-14;

/// `∫_lo^hi φ(z) Φ((s z − k)/σ′) dz = P(lo < Z < hi, Z′ > k)`.
fn strip_prob(lo: f64, hi: f64, k: f64, inp: &LogisticBoundInputs) -> f64 {
    let (s, sd) = (inp.s, inp.cond_sd());
    integrate(|z| norm_pdf(z) * norm_cdf((s * z - k) / sd), lo.max(-TAIL), hi.min(TAIL), QUAD_TOL)
}

/// `P(|Z| ≤ a, |Z′| ≤ a)`.
fn box_prob(inp: &LogisticBoundInputs) -> f64 {
    let (a, s, sd) = (inp.z_eps, inp.s, inp.cond_sd());
    integrate(|z| norm_pdf(z) * (norm_cdf((a - s * z) / sd) - norm_cdf((-a - s * z) / sd)), -a, a, QUAD_TOL)
}

/// `(E[Z 1{|Z|≤a} 1{Z′>a}], E[Z Z′ 1{|Z|≤a, |Z′|≤a}])` for standard normals
/// with correlation `s` and `a = z_ε`.
pub fn truncated_bivariate_terms(inp: &LogisticBoundInputs) -> Result<(f64, f64)> {
    let (a, s) = (inp.z_eps, inp.s);
    if !(s.abs() > 0.0 && s.abs() < 1.0) {
        return domain("truncated terms need 0 < |s| < 1");
    }
    let sd = inp.cond_sd();
    let pa = norm_pdf(a);
    let e_one = -pa * (norm_cdf(-a * ((1.0 - s) / (1.0 + s)).sqrt()) - norm_cdf(-a * ((1.0 + s) / (1.0 - s)).sqrt()))
        + s * pa * (norm_cdf((a - s * a) / sd) - norm_cdf((-a - s * a) / sd));
    // Mass of N(s z, σ′²) inside [−a, a], and its first truncated moment.
    let inside = |z: f64| norm_cdf((a - s * z) / sd) - norm_cdf((-a - s * z) / sd);
    let trunc_mean = |mu: f64| {
        mu * (norm_cdf((a - mu) / sd) - norm_cdf((-a - mu) / sd))
            - sd * (norm_pdf((a - mu) / sd) - norm_pdf((-a - mu) / sd))
    };
    let e_two = s * box_prob(inp) - s * a * pa * (inside(a) + inside(-a)) - 2.0 * pa * trunc_mean(s * a);
    Ok((e_one, e_two))
}

/// Closed-form `E[f(Z)f(Z′)]` and the sandwich around `E[ψ⁻¹(Z)ψ⁻¹(Z′)]`.
pub fn logistic_product_bounds(inp: &LogisticBoundInputs) -> LogisticBounds {
    let a = inp.z_eps;
    let ff = if inp.s.abs() < 1e-10 {
        0.25
    } else {
        let (e_one, e_two) = truncated_bivariate_terms(inp).expect("0 < |s| < 1");
        let both_high = strip_prob(a, TAIL, a, inp);
        let mid_high = strip_prob(-a, a, a, inp);
        both_high + mid_high + e_one / a + 0.25 * box_prob(inp) + e_two / (4.0 * a * a)
    };
    let pm = norm_cdf(-a);
    let lower = ff - 2.0 * logistic(-a) * (pm + (0.5 - pm) * logistic(a));
    LogisticBounds { lower, upper: ff, f_product_expectation: ff }
}

/// `E[ψ⁻¹(Z)ψ⁻¹(Z′)]` by nested adaptive quadrature.
pub fn logistic_product_quadrature(s: f64) -> f64 {
    let sd = (1.0 - s * s).sqrt();
    integrate(
        |z| {
            let inner = integrate(|w| norm_pdf(w) * logistic(s * z + sd * w), -TAIL, TAIL, 1e-13);
            norm_pdf(z) * logistic(z) * inner
        },
        -TAIL,
        TAIL,
        1e-13,
    )
}

/// Mean and standard error from per-block means.
fn block_stats(values: &[f64]) -> (f64, f64) {
    let b = values.len() as f64;
    let m = values.iter().sum::<f64>() / b;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1.0);
    (m, (v / b).sqrt())
}

const BLOCKS: usize = 64;

/// Splits `n` draws into blocks with their own RNG streams, summing `f` per block.
fn blocked<F>(n: usize, seed: u64, width: usize, f: F) -> Vec<Vec<f64>>
where
    F: Fn(&mut crate::numeric::Rng, &mut [f64]) + Sync,
{
    let blocks = BLOCKS.min(n.max(1));
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let count = n / blocks + usize::from(b < n % blocks);
            let mut rng = stream_rng(seed, b as u64);
            let mut acc = vec![0.0; width + 1];
            for _ in 0..count {
                f(&mut rng, &mut acc[1..]);
            }
            acc[0] = count as f64;
            acc
        })
        .collect()
}

/// Per-block mean of column `i`, weighting blocks equally.
fn block_means(blocks: &[Vec<f64>], i: usize) -> Vec<f64> {
    blocks.iter().map(|b| b[i + 1] / b[0]).collect()
}

/// MC estimate of `E[ψ⁻¹(Z)]` for `Z ~ N(0, sd²)`; returns (mean, standard error).
pub fn mc_logistic_expectation<R: Rng + ?Sized>(sd: f64, n: usize, rng: &mut R) -> (f64, f64) {
    let b = blocked(n, rng.random(), 1, |r, acc| {
        acc[0] += logistic(sd * r.sample::<f64, _>(StandardNormal));
    });
    block_stats(&block_means(&b, 0))
}

fn corr_pair<R: Rng + ?Sized>(s: f64, rng: &mut R) -> (f64, f64) {
    let z: f64 = rng.sample(StandardNormal);
    let w: f64 = rng.sample(StandardNormal);
    (z, s * z + (1.0 - s * s).sqrt() * w)
}

/// MC estimate of `E[ψ⁻¹(Z)ψ⁻¹(Z′)]`.
pub fn mc_logistic_product<R: Rng + ?Sized>(s: f64, n: usize, rng: &mut R) -> (f64, f64) {
    let b = blocked(n, rng.random(), 1, |r, acc| {
        let (z, w) = corr_pair(s, r);
        acc[0] += logistic(z) * logistic(w);
    });
    block_stats(&block_means(&b, 0))
}

/// MC estimates of `E[f(Z)f(Z′)]` and of the two truncated terms, each with its standard error.
pub fn mc_surrogate_terms<R: Rng + ?Sized>(inp: &LogisticBoundInputs, n: usize, rng: &mut R) -> [(f64, f64); 3] {
    let a = inp.z_eps;
    let b = blocked(n, rng.random(), 3, |r, acc| {
        let (z, w) = corr_pair(inp.s, r);
        acc[0] += logistic_surrogate(z, a) * logistic_surrogate(w, a);
        if z.abs() <= a {
            if w > a {
                acc[1] += z;
            }
            if w.abs() <= a {
                acc[2] += z * w;
            }
        }
    });
    [0, 1, 2].map(|i| block_stats(&block_means(&b, i)))
}

/// Generative models for the MC moment oracle. Pair variants draw two
/// observations whose latent Gaussians have correlation `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Generator {
    Uniform,
    VonMises { mean: f64, rho: f64 },
    /// `m` = angle of `N(μ₀(cos α, sin α), σ²I)`, then `y ~ vM(m, ρ)`.
    Svm { mu0: f64, alpha: f64, sigma: f64, rho: f64 },
    SvmPair { mu0: f64, alpha: f64, sigma: f64, rho: f64, s: f64 },
    /// Labels from `joint[k][k′]`, then independent von Mises noise.
    MixturePair { ms: Vec<f64>, rhos: Vec<f64>, joint: Vec<Vec<f64>> },
    /// Weight `ψ⁻¹(Z)` on the first component, `Z ~ N(0, 1)`.
    Logistic2 { m1: f64, m2: f64, rho1: f64, rho2: f64 },
    Logistic2Pair { m1: f64, m2: f64, rho1: f64, rho2: f64, s: f64 },
}

impl Generator {
    fn validate(&self) -> Result<()> {
        match self {
            Generator::SvmPair { s, .. } | Generator::Logistic2Pair { s, .. } if !(s.abs() <= 1.0) => {
                domain("latent correlation must lie in [-1, 1]")
            }
            Generator::Svm { mu0, sigma, rho, .. } | Generator::SvmPair { mu0, sigma, rho, .. }
                if !(*mu0 >= 0.0 && *sigma > 0.0 && *rho >= 0.0) =>
            {
                domain("need mu0 >= 0, sigma > 0 and rho >= 0")
            }
            Generator::MixturePair { ms, rhos, joint } => {
                check_vm_components(ms, rhos)?;
                if joint.len() != ms.len() || joint.iter().any(|r| r.len() != ms.len()) {
                    return domain("joint membership table must be K×K");
                }
                check_simplex(&joint.iter().flatten().copied().collect::<Vec<_>>(), "joint membership probabilities")
            }
            _ => Ok(()),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, flat: &[f64]) -> (f64, Option<f64>) {
        let latent = |mu0: f64, alpha: f64, sigma: f64, s: f64, rng: &mut R| -> (f64, f64) {
            let (a1, b1) = corr_pair(s, rng);
            let (a2, b2) = corr_pair(s, rng);
            let (c, d) = (mu0 * alpha.cos(), mu0 * alpha.sin());
            let ang = |x: f64, y: f64| arctan_star(c + sigma * x, d + sigma * y).map_or(0.0, |a| a.value());
            (ang(a1, a2), ang(b1, b2))
        };
        let pick = |z: f64, rng: &mut R| rng.random::<f64>() >= logistic(z);
        match self {
            Generator::Uniform => (rng.random::<f64>() * std::f64::consts::TAU, None),
            Generator::VonMises { mean, rho } => (vm_draw(*mean, *rho, rng), None),
            Generator::Svm { mu0, alpha, sigma, rho } => {
                let p = Pn2Params::from_polar(*mu0, *alpha, *sigma).expect("validated");
                let m = pn2_sample(&p, rng).value();
                (vm_draw(m, *rho, rng), None)
            }
            Generator::SvmPair { mu0, alpha, sigma, rho, s } => {
                let (m, m2) = latent(*mu0, *alpha, *sigma, *s, rng);
                (vm_draw(m, *rho, rng), Some(vm_draw(m2, *rho, rng)))
            }
            Generator::MixturePair { ms, rhos, .. } => {
                let k = ms.len();
                let cell = categorical(flat, rng);
                let (i, j) = (cell / k, cell % k);
                (vm_draw(ms[i], rhos[i], rng), Some(vm_draw(ms[j], rhos[j], rng)))
            }
            Generator::Logistic2 { m1, m2, rho1, rho2 } => {
                let z: f64 = rng.sample(StandardNormal);
                let (m, r) = if pick(z, rng) { (*m2, *rho2) } else { (*m1, *rho1) };
                (vm_draw(m, r, rng), None)
            }
            Generator::Logistic2Pair { m1, m2, rho1, rho2, s } => {
                let (z, w) = corr_pair(*s, rng);
                let (ma, ra) = if pick(z, rng) { (*m2, *rho2) } else { (*m1, *rho1) };
                let (mb, rb) = if pick(w, rng) { (*m2, *rho2) } else { (*m1, *rho1) };
                (vm_draw(ma, ra, rng), Some(vm_draw(mb, rb, rng)))
            }
        }
    }
}

/// MC moments of the first observation, plus the circular correlation for
/// pair generators. Standard errors come from 64 independent blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub summary: CircularSummary,
    pub variance_se: f64,
    pub correlation: Option<f64>,
    pub correlation_se: Option<f64>,
    pub n: usize,
}

/// Sums kept per block: `cos y, sin y, cos y′, sin y′`, the four cross
/// products `sin·sin, sin·cos, cos·sin, cos·cos`, then `cos 2y, sin 2y,
/// cos 2y′, sin 2y′`.
const MOMENT_WIDTH: usize = 12;

fn moments_from(acc: &[f64], count: f64) -> (f64, f64, Option<f64>) {
    let e: Vec<f64> = acc.iter().map(|v| v / count).collect();
    let (c, s) = (e[0], e[1]);
    let r = c.hypot(s);
    let alpha = s.atan2(c);
    if e[2..8].iter().chain(&e[10..]).all(|v| *v == 0.0) {
        return (alpha, 1.0 - r, None);
    }
    let alpha2 = e[3].atan2(e[2]);
    // E[sin(y−α) sin(y′−α′)] and E[sin²(·)] from raw trigonometric moments.
    let (ca, sa, cb, sb) = (alpha.cos(), alpha.sin(), alpha2.cos(), alpha2.sin());
    let (ss, sc, cs, cc) = (e[4], e[5], e[6], e[7]);
    let cross = ss * ca * cb - sc * ca * sb - cs * sa * cb + cc * sa * sb;
    let var_a = 0.5 * (1.0 - (e[8] * (2.0 * alpha).cos() + e[9] * (2.0 * alpha).sin()));
    let var_b = 0.5 * (1.0 - (e[10] * (2.0 * alpha2).cos() + e[11] * (2.0 * alpha2).sin()));
    let corr = cross / (var_a * var_b).sqrt();
    (alpha, 1.0 - r, Some(corr))
}

pub fn mc_moment_oracle<R: Rng + ?Sized>(gen: &Generator, n: usize, rng: &mut R) -> Result<MomentEstimate> {
    if n == 0 {
        return domain("need at least one draw");
    }
    gen.validate()?;
    let flat: Vec<f64> = match gen {
        Generator::MixturePair { joint, .. } => joint.iter().flatten().copied().collect(),
        _ => Vec::new(),
    };
    let width = MOMENT_WIDTH;
    let blocks = blocked(n, rng.random(), width, |r, acc| {
        let (y, y2) = gen.draw(r, &flat);
        acc[0] += y.cos();
        acc[1] += y.sin();
        acc[8] += (2.0 * y).cos();
        acc[9] += (2.0 * y).sin();
        if let Some(w) = y2 {
            acc[2] += w.cos();
            acc[3] += w.sin();
            acc[4] += y.sin() * w.sin();
            acc[5] += y.sin() * w.cos();
            acc[6] += y.cos() * w.sin();
            acc[7] += y.cos() * w.cos();
            acc[10] += (2.0 * w).cos();
            acc[11] += (2.0 * w).sin();
        }
    });
    let mut total = vec![0.0; width];
    for b in &blocks {
        for i in 0..width {
            total[i] += b[i + 1];
        }
    }
    let (alpha, variance, corr) = moments_from(&total, n as f64);
    let per: Vec<(f64, f64, Option<f64>)> = blocks.iter().map(|b| moments_from(&b[1..], b[0])).collect();
    let se = |v: Vec<f64>| if v.len() > 1 { block_stats(&v).1 } else { f64::NAN };
    let variance_se = se(per.iter().map(|p| p.1).collect());
    let correlation_se = corr.map(|_| se(per.iter().map(|p| p.2.unwrap_or(0.0)).collect()));
    let r = 1.0 - variance;
    let degenerate = r < 1e-12;
    Ok(MomentEstimate {
        summary: CircularSummary {
            mean: Angle::new(if degenerate { PI } else { alpha }),
            variance,
            resultant_length: r,
            degenerate,
        },
        variance_se,
        correlation: corr,
        correlation_se,
        n,
    })
}
