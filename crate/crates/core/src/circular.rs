//! Angles, the von Mises and isotropic projected normal distributions, and
//! sample summaries on the circle.

use crate::error::{domain, Result};
use crate::numeric::{norm_cdf, norm_pdf};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// A direction in `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    /// Wraps any finite real into `[0, 2π)`.
    pub fn new(x: f64) -> Self {
        let w = x.rem_euclid(TAU);
        // rem_euclid can round up to exactly 2π for tiny negative inputs
        Angle(if w >= TAU { 0.0 } else { w })
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

/// Signed shortest rotation from `b` to `a`, in `(-π, π]`.
pub fn circ_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

/// Arc length between two directions, in `[0, π]`.
pub fn circ_dist(a: f64, b: f64) -> f64 {
    circ_diff(a, b).abs()
}

/// Polar angle of `(z1, z2)` mapped to `[0, 2π)`.
pub fn arctan_star(z1: f64, z2: f64) -> Result<Angle> {
    if z1 == 0.0 && z2 == 0.0 {
        return domain("arctan_star is undefined at the origin");
    }
    if !(z1.is_finite() && z2.is_finite()) {
        return domain("arctan_star needs finite input");
    }
    let a = if z1 >= 0.0 && z2 >= 0.0 {
        z2.atan2(z1)
    } else if z1 >= 0.0 {
        z2.atan2(z1) + TAU
    } else {
        (z2 / z1).atan() + PI
    };
    Ok(Angle::new(a))
}

const SERIES_MAX: f64 = 15.0;

fn bessel_series_scaled(n: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    for k in 1..=n {
        term *= half / k as f64;
    }
    let q = half * half;
    let mut sum = term;
    let mut k = 0.0;
    while k < 1000.0 {
        k += 1.0;
        term *= q / (k * (k + n as f64));
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum * (-x).exp()
}

fn bessel_asymptotic_scaled(n: u32, x: f64) -> f64 {
    let mu = 4.0 * (n as f64).powi(2);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (k as f64 * 8.0 * x);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum / (TAU * x).sqrt()
}

/// `e^{-x} I_n(x)` for `x ≥ 0`.
pub fn bessel_i_scaled(n: u32, x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if x <= SERIES_MAX || (2 * n) as f64 >= x && x < 500.0 {
        return bessel_series_scaled(n, x);
    }
    large_arg_scaled(n, x)
}

fn large_arg_scaled(n: u32, x: f64) -> f64 {
    let i0 = bessel_asymptotic_scaled(0, x);
    if n == 0 {
        return i0;
    }
    let i1 = bessel_asymptotic_scaled(1, x);
    let (mut prev, mut cur) = (i0, i1);
    for k in 1..n {
        let next = prev - 2.0 * k as f64 / x * cur;
        prev = cur;
        cur = next;
    }
    cur
}

/// `ln I_0(x)`.
pub fn log_bessel_i0(x: f64) -> f64 {
    x + bessel_i_scaled(0, x).ln()
}

/// `I_n(ρ) / I_0(ρ)`; order `-1` is accepted through `I_{-1} = I_1`.
pub fn bessel_i_ratio(n: i32, rho: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return domain(format!("Bessel ratio needs rho >= 0, got {rho}"));
    }
    let n = n.unsigned_abs();
    if n == 0 {
        return Ok(1.0);
    }
    Ok(bessel_i_scaled(n, rho) / bessel_i_scaled(0, rho))
}

/// `I_1(ρ)/I_0(ρ)` without the error path, for hot loops with `ρ ≥ 0` guaranteed.
pub fn a1(rho: f64) -> f64 {
    if rho == 0.0 {
        return 0.0;
    }
    bessel_i_scaled(1, rho) / bessel_i_scaled(0, rho)
}

/// Solves `I₁(ρ)/I₀(ρ) = r` for `ρ`, clamped to `[1e-8, 1e8]`.
pub fn a1_inv(r: f64) -> f64 {
    const MIN: f64 = 1e-8;
    const MAX: f64 = 1e8;
    let (mut lo, mut hi) = (MIN.ln(), MAX.ln());
    if !(r > a1(MIN)) {
        return MIN;
    }
    if r >= a1(MAX) {
        return MAX;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if a1(mid.exp()) < r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// `(ln 2πI₀(ρ), I₁(ρ)/I₀(ρ))` from one pair of Bessel evaluations.
pub fn vm_norm_ratio(rho: f64) -> (f64, f64) {
    let i0 = bessel_i_scaled(0, rho);
    let i1 = if rho == 0.0 { 0.0 } else { bessel_i_scaled(1, rho) };
    (TAU.ln() + rho + i0.ln(), i1 / i0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VonMisesParams {
    pub mean: Angle,
    pub concentration: f64,
}

impl VonMisesParams {
    pub fn new(mean: f64, concentration: f64) -> Result<Self> {
        if !(concentration >= 0.0) || !concentration.is_finite() {
            return domain(format!("concentration must be finite and >= 0, got {concentration}"));
        }
        Ok(VonMisesParams { mean: Angle::new(mean), concentration })
    }
}

/// Von Mises log-density with raw parameters.
pub fn vm_logpdf(y: f64, mean: f64, rho: f64) -> f64 {
    rho * (y - mean).cos() - TAU.ln() - log_bessel_i0(rho)
}

pub fn vm_log_density(y: Angle, p: &VonMisesParams) -> f64 {
    vm_logpdf(y.0, p.mean.0, p.concentration)
}

/// Best–Fisher rejection sampler on raw parameters.
pub fn vm_draw<R: Rng + ?Sized>(mean: f64, rho: f64, rng: &mut R) -> f64 {
    if rho < 1e-9 {
        return rng.random::<f64>() * TAU;
    }
    if rho > 1e6 {
        // The envelope constant rounds to 1 here; the wrapped normal limit is exact to O(1/ρ).
        let e: f64 = rng.sample(StandardNormal);
        return Angle::new(mean + e / rho.sqrt()).0;
    }
    let tau = 1.0 + (1.0 + 4.0 * rho * rho).sqrt();
    let r0 = (tau - (2.0 * tau).sqrt()) / (2.0 * rho);
    let r = (1.0 + r0 * r0) / (2.0 * r0);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = rho * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let theta = f.clamp(-1.0, 1.0).acos();
            let signed = if u3 > 0.5 { theta } else { -theta };
            return Angle::new(mean + signed).0;
        }
    }
}

pub fn vm_sample<R: Rng + ?Sized>(p: &VonMisesParams, rng: &mut R) -> Angle {
    Angle(vm_draw(p.mean.0, p.concentration, rng))
}

/// Projected normal with isotropic covariance `σ² I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pn2Params {
    pub mu: [f64; 2],
    pub sigma: f64,
}

impl Pn2Params {
    pub fn new(mu: [f64; 2], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return domain(format!("sigma must be positive, got {sigma}"));
        }
        Ok(Pn2Params { mu, sigma })
    }

    pub fn from_polar(mu0: f64, alpha: f64, sigma: f64) -> Result<Self> {
        Self::new([mu0 * alpha.cos(), mu0 * alpha.sin()], sigma)
    }

    pub fn mu0(&self) -> f64 {
        self.mu[0].hypot(self.mu[1])
    }

    /// Polar angle of the mean; `0` when the mean is at the origin.
    pub fn alpha(&self) -> Angle {
        arctan_star(self.mu[0], self.mu[1]).unwrap_or(Angle(0.0))
    }
}

pub fn pn2_density(y: Angle, p: &Pn2Params) -> f64 {
    let mu0 = p.mu0();
    let d = y.0 - p.alpha().0;
    let b = mu0 * d.cos() / p.sigma;
    let c = mu0 * d.sin() / p.sigma;
    norm_pdf(c) * (norm_pdf(b) + b * norm_cdf(b))
}

pub fn pn2_circular_variance(p: &Pn2Params) -> f64 {
    let beta = (p.mu0() / p.sigma).powi(2) / 4.0;
    // e^{-β} I_n(β) is exactly the scaled Bessel function
    let v = 1.0
        - 0.5 * (TAU * beta).sqrt() * (bessel_i_scaled(0, beta) + bessel_i_scaled(1, beta));
    v.clamp(0.0, 1.0)
}

pub fn pn2_sample<R: Rng + ?Sized>(p: &Pn2Params, rng: &mut R) -> Angle {
    loop {
        let z1 = p.mu[0] + p.sigma * rng.sample::<f64, _>(StandardNormal);
        let z2 = p.mu[1] + p.sigma * rng.sample::<f64, _>(StandardNormal);
        if let Ok(a) = arctan_star(z1, z2) {
            return a;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircularSummary {
    pub mean: Angle,
    pub variance: f64,
    pub resultant_length: f64,
    /// Resultant vanished; `mean` is reported as π.
    pub degenerate: bool,
}

const ZERO_RESULTANT: f64 = 1e-12;

/// Weighted circular summary of raw angles. Weights need not be normalized.
pub fn weighted_summary(ys: &[f64], w: &[f64]) -> Result<CircularSummary> {
    if ys.is_empty() {
        return domain("circular summary of an empty sample");
    }
    if ys.len() != w.len() {
        return domain("weights and samples differ in length");
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return domain("weights must have positive total");
    }
    let (mut c, mut s) = (0.0, 0.0);
    for (y, wi) in ys.iter().zip(w) {
        c += wi * y.cos();
        s += wi * y.sin();
    }
    let r = (c.hypot(s) / total).min(1.0);
    let (mean, degenerate) = if r < ZERO_RESULTANT {
        (Angle(PI), true)
    } else {
        (arctan_star(c, s)?, false)
    };
    Ok(CircularSummary { mean, variance: 1.0 - r, resultant_length: r, degenerate })
}

pub fn summary_of(ys: &[f64]) -> Result<CircularSummary> {
    weighted_summary(ys, &vec![1.0; ys.len()])
}

pub fn circular_summary(samples: &[Angle]) -> Result<CircularSummary> {
    let ys: Vec<f64> = samples.iter().map(|a| a.0).collect();
    summary_of(&ys)
}

/// Sample circular correlation: centered sine products normalized by their spreads.
pub fn circular_correlation(a: &[Angle], b: &[Angle]) -> Result<f64> {
    if a.len() != b.len() {
        return domain("correlation inputs differ in length");
    }
    if a.len() < 2 {
        return domain("correlation needs at least two pairs");
    }
    let ma = circular_summary(a)?.mean.0;
    let mb = circular_summary(b)?.mean.0;
    let (mut num, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let u = (x.0 - ma).sin();
        let v = (y.0 - mb).sin();
        num += u * v;
        sa += u * u;
        sb += v * v;
    }
    let den = (sa * sb).sqrt();
    if den == 0.0 {
        return domain("correlation undefined for a sample with zero sine spread");
    }
    Ok((num / den).clamp(-1.0, 1.0))
}
