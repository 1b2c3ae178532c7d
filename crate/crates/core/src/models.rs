//! Model specifications, log-posteriors and analytic gradients for the
//! independent (`iv`, `ivm`) and spatial (`svm`, `svmc`, `svmp`) von Mises models.
//!
//! Spatial latent fields are stored as deviations from their GP mean, so a
//! state's `z[j]` is a draw from `N(0, Σ)` under the prior. Component means of
//! `svm`/`svmc` are the polar angles of `z + μ`.
//!
//! Samplers work with [`Target`] implementations, each exposing one block of
//! the posterior in unconstrained coordinates together with its gradient.

use crate::circular::{arctan_star, vm_draw, vm_logpdf, vm_norm_ratio, Angle};
use crate::error::{domain, Error, Result};
use crate::gp::{build_cov, CovMatrix, GpSpec, SimplexPoint};
use crate::numeric::log_sum_exp;
use libm::lgamma;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Single von Mises shared by every location.
    Iv,
    /// Finite von Mises mixture without spatial structure.
    Ivm,
    /// Von Mises whose mean follows a projected GP and whose log-concentration is hierarchical.
    Svm,
    /// Mixture of `svm` components with global mixing weights.
    Svmc,
    /// Mixture with global components and location-dependent weights from logit GPs.
    Svmp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::Iv, ModelKind::Ivm, ModelKind::Svm, ModelKind::Svmc, ModelKind::Svmp];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Iv => "iv",
            ModelKind::Ivm => "ivm",
            ModelKind::Svm => "svm",
            ModelKind::Svmc => "svmc",
            ModelKind::Svmp => "svmp",
        }
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, ModelKind::Svm | ModelKind::Svmc | ModelKind::Svmp)
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, ModelKind::Ivm | ModelKind::Svmc | ModelKind::Svmp)
    }

    /// Kinds whose concentration varies by location.
    fn local_conc(self) -> bool {
        matches!(self, ModelKind::Svm | ModelKind::Svmc)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.to_ascii_lowercase().as_str() {
            "iv" => Ok(ModelKind::Iv),
            "ivm" => Ok(ModelKind::Ivm),
            "svm" => Ok(ModelKind::Svm),
            "svmc" => Ok(ModelKind::Svmc),
            "svmp" => Ok(ModelKind::Svmp),
            _ => domain(format!("unknown model '{s}'")),
        }
    }
}

/// `φ ~ N(ν, ς²)`, `ν ~ N(0, τ²)`; both scales fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierPrior {
    pub varsigma: f64,
    pub tau: f64,
}

impl Default for HierPrior {
    fn default() -> Self {
        HierPrior { varsigma: 0.05, tau: 5.0 }
    }
}

/// `m ~ vM(u, c)` and `ρ ~ Gamma(a, rate b)` for the independent models.
/// `c = 0` is a uniform mean prior; `b = 0` leaves the concentration prior improper.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndepPrior {
    pub u: f64,
    pub c: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for IndepPrior {
    fn default() -> Self {
        IndepPrior { u: 0.0, c: 0.0, a: 1.0, b: 0.1 }
    }
}

impl IndepPrior {
    fn log_density(&self, m: f64, rho: f64) -> f64 {
        let mut lp = vm_logpdf(m, self.u, self.c) + (self.a - 1.0) * rho.ln() - self.b * rho;
        if self.b > 0.0 {
            lp += self.a * self.b.ln() - lgamma(self.a);
        }
        lp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub k: usize,
    pub gp: GpSpec,
    /// One entry per latent field: the `(z₁, z₂)` pair of each component for
    /// `svm`/`svmc`, one logit field per non-reference component for `svmp`.
    /// A length-1 entry is a constant mean.
    pub gp_means: Vec<Vec<f64>>,
    pub hier: HierPrior,
    pub indep: IndepPrior,
    /// Symmetric Dirichlet prior on global mixing weights.
    pub dirichlet_alpha: f64,
}

impl ModelSpec {
    /// Spec with default priors and zero GP means.
    pub fn new(kind: ModelKind, k: usize) -> Result<Self> {
        let fields = Self::fields_for(kind, k);
        let s = ModelSpec {
            kind,
            k,
            gp: GpSpec::default(),
            gp_means: vec![vec![0.0]; fields],
            hier: HierPrior::default(),
            indep: IndepPrior::default(),
            dirichlet_alpha: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_gp(mut self, gp: GpSpec) -> Result<Self> {
        self.gp = gp;
        self.validate()?;
        Ok(self)
    }

    pub fn with_means(mut self, means: Vec<Vec<f64>>) -> Result<Self> {
        self.gp_means = means;
        self.validate()?;
        Ok(self)
    }

    fn fields_for(kind: ModelKind, k: usize) -> usize {
        match kind {
            ModelKind::Iv | ModelKind::Ivm => 0,
            ModelKind::Svm | ModelKind::Svmc => 2 * k,
            ModelKind::Svmp => k.saturating_sub(1),
        }
    }

    /// Number of latent GP fields.
    pub fn n_fields(&self) -> usize {
        Self::fields_for(self.kind, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Iv | ModelKind::Svm if self.k != 1 => {
                return domain(format!("{} has exactly one component", self.kind))
            }
            ModelKind::Ivm | ModelKind::Svmc | ModelKind::Svmp if self.k < 2 => {
                return domain(format!("{} needs at least two components", self.kind))
            }
            _ => {}
        }
        if self.kind.is_spatial() {
            self.gp.validate()?;
        }
        if self.gp_means.len() != self.n_fields() {
            return domain(format!(
                "{} with K={} needs {} GP mean entries, got {}",
                self.kind,
                self.k,
                self.n_fields(),
                self.gp_means.len()
            ));
        }
        if self.gp_means.iter().flatten().any(|v| !v.is_finite()) {
            return domain("GP means must be finite");
        }
        if !(self.hier.varsigma > 0.0 && self.hier.tau > 0.0) {
            return domain("hierarchical scales must be positive");
        }
        let p = &self.indep;
        if !(p.c >= 0.0 && p.a > 0.0 && p.b >= 0.0) {
            return domain("independent-model prior needs c >= 0, a > 0, b >= 0");
        }
        if !(self.dirichlet_alpha > 0.0) {
            return domain("Dirichlet concentration must be positive");
        }
        Ok(())
    }

    /// Mean field `j` at `n` locations.
    pub fn mean_field(&self, j: usize, n: usize) -> Result<Vec<f64>> {
        let v = &self.gp_means[j];
        match v.len() {
            1 => Ok(vec![v[0]; n]),
            l if l == n => Ok(v.clone()),
            l => domain(format!("GP mean field {j} has length {l}, expected 1 or {n}")),
        }
    }

    /// True when every mean field is a constant, so it extends to new locations.
    pub fn constant_means(&self) -> bool {
        self.gp_means.iter().all(|v| v.len() == 1)
    }
}

/// Observed directions with their simplex locations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub locations: Vec<SimplexPoint>,
    pub directions: Vec<Angle>,
}

impl Dataset {
    pub fn new(locations: Vec<SimplexPoint>, directions: Vec<Angle>) -> Result<Self> {
        if locations.len() != directions.len() {
            return domain(format!(
                "{} locations but {} directions",
                locations.len(),
                directions.len()
            ));
        }
        Ok(Dataset { locations, directions })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.directions.iter().map(|a| a.value()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            locations: idx.iter().map(|&i| self.locations[i]).collect(),
            directions: idx.iter().map(|&i| self.directions[i]).collect(),
        }
    }
}

/// One configuration of every model parameter. Unused blocks are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    /// GP deviations from the mean, one vector per latent field.
    pub z: Vec<Vec<f64>>,
    /// Component means: per location for `svm`/`svmc`, one value otherwise.
    pub m: Vec<Vec<f64>>,
    /// Log-concentrations, laid out like `m`.
    pub phi: Vec<Vec<f64>>,
    pub nu: Vec<f64>,
    /// Global mixing weights (`ivm`, `svmc`).
    pub lambda: Vec<f64>,
    /// Component labels in `0..K` (`svmc`, optionally `ivm`).
    pub zeta: Vec<usize>,
}

impl ParamState {
    pub fn rho(&self, k: usize, l: usize) -> f64 {
        let p = &self.phi[k];
        p[if p.len() == 1 { 0 } else { l }].exp()
    }

    pub fn mean(&self, k: usize, l: usize) -> f64 {
        let m = &self.m[k];
        m[if m.len() == 1 { 0 } else { l }]
    }
}

/// `Ψ⁻¹`: maps `K−1` logits to `K` positive weights, the last being the reference.
pub fn generalized_inverse_logit(z: &[f64]) -> Vec<f64> {
    let shift = z.iter().cloned().fold(0.0, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - shift).exp()).collect();
    out.push((-shift).exp());
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Unconstrained coordinates for latent blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    /// Latents under their own prior.
    Centered,
    /// Latents as whitened standard normals mapped through `L`.
    NonCentered,
}

/// How mixture likelihoods treat the labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LikMode {
    /// Labels summed out.
    Marginal,
    /// Complete-data likelihood at the state's `zeta`.
    Labels,
}

/// A log-density block in unconstrained coordinates.
pub trait Target {
    fn dim(&self) -> usize;
    fn log_density(&self, q: &[f64]) -> f64;
    /// Writes the gradient and returns the log density.
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64;
}

fn gauss_ln(x: f64, mean: f64, sd: f64) -> f64 {
    let d = (x - mean) / sd;
    -0.5 * d * d - sd.ln() - 0.5 * TAU.ln()
}

fn dirichlet_ln(lambda: &[f64], alpha: f64) -> f64 {
    let k = lambda.len() as f64;
    lgamma(k * alpha) - k * lgamma(alpha)
        + lambda.iter().map(|l| (alpha - 1.0) * l.ln()).sum::<f64>()
}

/// A spec bound to a dataset with its covariance factorized once.
#[derive(Clone, Debug)]
pub struct ModelContext {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub cov: Option<CovMatrix>,
    /// Broadcast GP means, one per latent field.
    pub means: Vec<Vec<f64>>,
    ys: Vec<f64>,
}

impl ModelContext {
    pub fn new(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        spec.validate()?;
        if data.is_empty() {
            return domain("dataset is empty");
        }
        let n = data.len();
        let (cov, means) = if spec.kind.is_spatial() {
            let cov = build_cov(&data.locations, &spec.gp)?;
            let means = (0..spec.n_fields()).map(|j| spec.mean_field(j, n)).collect::<Result<_>>()?;
            (Some(cov), means)
        } else {
            (None, Vec::new())
        };
        Ok(ModelContext { spec: spec.clone(), data: data.clone(), cov, means, ys: data.ys() })
    }

    pub fn n(&self) -> usize {
        self.ys.len()
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    fn cov(&self) -> &CovMatrix {
        self.cov.as_ref().expect("spatial context carries a covariance")
    }

    /// Polar angle of `z + μ` for one component of `svm`/`svmc`.
    pub fn angles_of(&self, s: &ParamState, comp: usize) -> Result<Vec<f64>> {
        let (f1, f2) = (&s.z[2 * comp], &s.z[2 * comp + 1]);
        let (m1, m2) = (&self.means[2 * comp], &self.means[2 * comp + 1]);
        (0..self.n())
            .map(|l| {
                let (a, b) = (f1[l] + m1[l], f2[l] + m2[l]);
                if a * a + b * b < 1e-300 {
                    return domain(format!("latent pair at location {l} is at the origin"));
                }
                arctan_star(a, b).map(|x| x.value())
            })
            .collect()
    }

    /// Recomputes GP-linked means from the latents.
    pub fn refresh_means(&self, s: &mut ParamState) -> Result<()> {
        if matches!(self.spec.kind, ModelKind::Svm | ModelKind::Svmc) {
            for c in 0..self.k() {
                s.m[c] = self.angles_of(s, c)?;
            }
        }
        Ok(())
    }

    pub fn check_state(&self, s: &ParamState) -> Result<()> {
        let (n, k, kind) = (self.n(), self.k(), self.spec.kind);
        let per = if kind.local_conc() { n } else { 1 };
        let shape_ok = s.z.len() == self.spec.n_fields()
            && s.z.iter().all(|v| v.len() == n)
            && s.m.len() == k
            && s.m.iter().all(|v| v.len() == per)
            && s.phi.len() == k
            && s.phi.iter().all(|v| v.len() == per)
            && s.nu.len() == if kind.local_conc() { k } else { 0 };
        if !shape_ok {
            return domain(format!("parameter state does not match a {kind} model with K={k}, N={n}"));
        }
        if s.phi.iter().flatten().chain(&s.nu).any(|v| !v.is_finite()) {
            return domain("log-concentrations must be finite");
        }
        if s.m.iter().flatten().chain(s.z.iter().flatten()).any(|v| !v.is_finite()) {
            return domain("means and latents must be finite");
        }
        if matches!(kind, ModelKind::Ivm | ModelKind::Svmc) {
            let total: f64 = s.lambda.iter().sum();
            if s.lambda.len() != k || s.lambda.iter().any(|l| !(*l >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return domain("mixing weights must lie on the simplex");
            }
        }
        if !s.zeta.is_empty() && (s.zeta.len() != n || s.zeta.iter().any(|&z| z >= k)) {
            return domain("labels must be one per location in 0..K");
        }
        if matches!(kind, ModelKind::Svm | ModelKind::Svmc) {
            for c in 0..k {
                let a = self.angles_of(s, c)?;
                if a.iter().zip(&s.m[c]).any(|(x, y)| crate::circular::circ_dist(*x, *y) > 1e-9) {
                    return domain("component means are stale; call refresh_means");
                }
            }
        }
        Ok(())
    }

    /// Mixing weights at location `l`.
    pub fn weights_at(&self, s: &ParamState, l: usize) -> Vec<f64> {
        match self.spec.kind {
            ModelKind::Iv | ModelKind::Svm => vec![1.0],
            ModelKind::Ivm | ModelKind::Svmc => s.lambda.clone(),
            ModelKind::Svmp => {
                let logits: Vec<f64> =
                    (0..self.k() - 1).map(|j| s.z[j][l] + self.means[j][l]).collect();
                generalized_inverse_logit(&logits)
            }
        }
    }

    /// `ln λ_k + ln vM(y_ℓ; m_k, ρ_k)` for every component at location `l`.
    pub fn component_terms(&self, s: &ParamState, l: usize) -> Vec<f64> {
        let w = self.weights_at(s, l);
        (0..self.k())
            .map(|c| w[c].ln() + vm_logpdf(self.ys[l], s.mean(c, l), s.rho(c, l)))
            .collect()
    }

    /// Posterior label probabilities, `K × N`.
    pub fn responsibilities(&self, s: &ParamState) -> Vec<Vec<f64>> {
        let mut r = vec![vec![0.0; self.n()]; self.k()];
        for l in 0..self.n() {
            let t = self.component_terms(s, l);
            let z = log_sum_exp(&t);
            for c in 0..self.k() {
                r[c][l] = (t[c] - z).exp();
            }
        }
        r
    }

    /// `ln p(y | θ)` with labels summed out.
    pub fn log_likelihood(&self, s: &ParamState) -> Result<f64> {
        self.check_state(s)?;
        Ok((0..self.n()).map(|l| log_sum_exp(&self.component_terms(s, l))).sum())
    }

    /// `ln p(y, ζ | θ)` at the state's labels.
    pub fn log_likelihood_with_labels(&self, s: &ParamState) -> Result<f64> {
        self.check_state(s)?;
        if !self.spec.kind.is_mixture() {
            return self.log_likelihood(s);
        }
        if s.zeta.len() != self.n() {
            return domain("state carries no labels");
        }
        Ok((0..self.n()).map(|l| self.component_terms(s, l)[s.zeta[l]]).sum())
    }

    /// Prior on the GP latents alone.
    pub fn log_prior_latent(&self, s: &ParamState) -> f64 {
        if !self.spec.kind.is_spatial() {
            return 0.0;
        }
        let cov = self.cov();
        let n = self.n() as f64;
        s.z.iter()
            .map(|f| {
                let w = cov.solve_l(f);
                -0.5 * w.iter().map(|x| x * x).sum::<f64>() - 0.5 * cov.log_det() - 0.5 * n * TAU.ln()
            })
            .sum()
    }

    /// Prior on everything except the GP latents.
    pub fn log_prior_rest(&self, s: &ParamState) -> f64 {
        let spec = &self.spec;
        let k = self.k();
        match spec.kind {
            ModelKind::Iv | ModelKind::Ivm => {
                let mut lp: f64 =
                    (0..k).map(|c| spec.indep.log_density(s.m[c][0], s.phi[c][0].exp())).sum();
                if spec.kind == ModelKind::Ivm {
                    lp += dirichlet_ln(&s.lambda, spec.dirichlet_alpha);
                }
                lp
            }
            ModelKind::Svm | ModelKind::Svmc => {
                let h = spec.hier;
                let mut lp = 0.0;
                for c in 0..k {
                    lp += gauss_ln(s.nu[c], 0.0, h.tau);
                    lp += s.phi[c].iter().map(|p| gauss_ln(*p, s.nu[c], h.varsigma)).sum::<f64>();
                }
                if spec.kind == ModelKind::Svmc {
                    lp += dirichlet_ln(&s.lambda, spec.dirichlet_alpha);
                }
                lp
            }
            // Uniform means and unit-rate exponential concentrations.
            ModelKind::Svmp => (0..k).map(|c| -TAU.ln() - s.phi[c][0].exp()).sum(),
        }
    }

    /// `ln p(θ | y)` up to the evidence, in natural coordinates: GP deviations,
    /// means, `φ` for hierarchical models and `ρ` for the others.
    pub fn log_posterior(&self, s: &ParamState) -> Result<f64> {
        Ok(self.log_likelihood(s)? + self.log_prior_latent(s) + self.log_prior_rest(s))
    }

    /// One draw from the prior.
    pub fn draw_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamState> {
        let (n, k, spec) = (self.n(), self.k(), &self.spec);
        let mut s = ParamState::default();
        let dir = |rng: &mut R| -> Vec<f64> {
            let g = Gamma::new(spec.dirichlet_alpha, 1.0).unwrap();
            let v: Vec<f64> = (0..k).map(|_| g.sample(rng).max(1e-300)).collect();
            let t: f64 = v.iter().sum();
            v.into_iter().map(|x| x / t).collect()
        };
        match spec.kind {
            ModelKind::Iv | ModelKind::Ivm => {
                let p = spec.indep;
                if p.b == 0.0 {
                    return domain("cannot draw from an improper concentration prior");
                }
                let g = Gamma::new(p.a, 1.0 / p.b).map_err(|e| Error::Domain(e.to_string()))?;
                for _ in 0..k {
                    s.m.push(vec![vm_draw(p.u, p.c, rng)]);
                    s.phi.push(vec![g.sample(rng).max(1e-300).ln()]);
                }
                if spec.kind == ModelKind::Ivm {
                    s.lambda = dir(rng);
                }
            }
            ModelKind::Svm | ModelKind::Svmc => {
                let cov = self.cov();
                let h = spec.hier;
                for _ in 0..spec.n_fields() {
                    s.z.push(cov.draw(rng));
                }
                for _ in 0..k {
                    let nu = h.tau * rng.sample::<f64, _>(StandardNormal);
                    s.nu.push(nu);
                    s.phi.push(
                        (0..n).map(|_| nu + h.varsigma * rng.sample::<f64, _>(StandardNormal)).collect(),
                    );
                    s.m.push(vec![0.0; n]);
                }
                if spec.kind == ModelKind::Svmc {
                    s.lambda = dir(rng);
                    s.zeta = (0..n).map(|_| categorical(&s.lambda, rng)).collect();
                }
                self.refresh_means(&mut s)?;
            }
            ModelKind::Svmp => {
                let cov = self.cov();
                for _ in 0..k - 1 {
                    s.z.push(cov.draw(rng));
                }
                for _ in 0..k {
                    s.m.push(vec![rng.random::<f64>() * TAU]);
                    let e: f64 = rng.sample(rand_distr::Exp1);
                    s.phi.push(vec![e.max(1e-300).ln()]);
                }
            }
        }
        Ok(s)
    }
}

/// Draws an index with probability proportional to `p`.
pub fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in p.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub fn log_likelihood(spec: &ModelSpec, state: &ParamState, data: &Dataset) -> Result<f64> {
    ModelContext::new(spec, data)?.log_likelihood(state)
}

pub fn log_posterior(spec: &ModelSpec, state: &ParamState, data: &Dataset) -> Result<f64> {
    ModelContext::new(spec, data)?.log_posterior(state)
}

/// Score of the data term of `svmp` with respect to the first `K−1` logits at one
/// location: `r_k − λ_k`, where `vs` are the component densities.
pub fn svmp_logit_score(lambda: &[f64], vs: &[f64]) -> Vec<f64> {
    let p: f64 = lambda.iter().zip(vs).map(|(l, v)| l * v).sum();
    (0..lambda.len() - 1).map(|j| lambda[j] * vs[j] / p - lambda[j]).collect()
}

/// Two-component form of [`svmp_logit_score`].
pub fn svmp_logit_score_two(lambda: f64, v1: f64, v2: f64) -> f64 {
    lambda * (1.0 - lambda) * (v1 - v2) / (lambda * v1 + (1.0 - lambda) * v2)
}

/// Softmax of component terms at one location; returns the log normalizer.
fn normalize_terms(terms: &mut [f64]) -> f64 {
    let z = log_sum_exp(terms);
    terms.iter_mut().for_each(|t| *t = (*t - z).exp());
    z
}

fn field_log_det_half(cov: &CovMatrix) -> f64 {
    (0..cov.n()).map(|i| cov.chol[(i, i)].ln()).sum()
}

/// Latent pairs of `svm`/`svmc` in polar coordinates with concentrations and
/// weights held fixed.
///
/// Layout: for each component, `N` angles then `N` radii. Centered coordinates
/// are the polar form of `z + μ`; non-centered ones the polar form of the
/// whitened pair `L⁻¹ z`.
#[derive(Clone, Debug)]
pub struct PolarTarget<'a> {
    ctx: &'a ModelContext,
    param: Param,
    rho: Vec<Vec<f64>>,
    lnorm: Vec<Vec<f64>>,
    log_lambda: Vec<f64>,
    fixed: f64,
}

impl<'a> PolarTarget<'a> {
    pub fn new(ctx: &'a ModelContext, base: &ParamState, param: Param) -> Result<Self> {
        if !matches!(ctx.spec.kind, ModelKind::Svm | ModelKind::Svmc) {
            return domain("polar latents exist only for svm and svmc");
        }
        ctx.check_state(base)?;
        let (n, k) = (ctx.n(), ctx.k());
        let mut rho = vec![vec![0.0; n]; k];
        let mut lnorm = vec![vec![0.0; n]; k];
        for c in 0..k {
            for l in 0..n {
                rho[c][l] = base.rho(c, l);
                lnorm[c][l] = vm_norm_ratio(rho[c][l]).0;
            }
        }
        let log_lambda = ctx.weights_at(base, 0).iter().map(|w| w.ln()).collect();
        Ok(PolarTarget { ctx, param, rho, lnorm, log_lambda, fixed: ctx.log_prior_rest(base) })
    }

    /// Polar coordinates of a state's latents.
    pub fn coords(&self, s: &ParamState) -> Result<Vec<f64>> {
        let (n, cov) = (self.ctx.n(), self.ctx.cov());
        let mut q = Vec::with_capacity(self.dim());
        for c in 0..self.ctx.k() {
            let (mut e1, mut e2) = (s.z[2 * c].clone(), s.z[2 * c + 1].clone());
            match self.param {
                Param::Centered => {
                    for l in 0..n {
                        e1[l] += self.ctx.means[2 * c][l];
                        e2[l] += self.ctx.means[2 * c + 1][l];
                    }
                }
                Param::NonCentered => {
                    e1 = cov.solve_l(&e1);
                    e2 = cov.solve_l(&e2);
                }
            }
            let mut ang = Vec::with_capacity(n);
            let mut rad = Vec::with_capacity(n);
            for l in 0..n {
                ang.push(arctan_star(e1[l], e2[l])?.value());
                rad.push(e1[l].hypot(e2[l]));
            }
            q.extend(ang);
            q.extend(rad);
        }
        Ok(q)
    }

    /// Replaces the latents and means of `base` with those at `q`.
    pub fn state_at(&self, q: &[f64], base: &ParamState) -> Result<ParamState> {
        let (n, cov) = (self.ctx.n(), self.ctx.cov());
        let mut s = base.clone();
        for c in 0..self.ctx.k() {
            let (ang, rad) = (&q[2 * c * n..(2 * c + 1) * n], &q[(2 * c + 1) * n..(2 * c + 2) * n]);
            let e1: Vec<f64> = (0..n).map(|l| rad[l] * ang[l].cos()).collect();
            let e2: Vec<f64> = (0..n).map(|l| rad[l] * ang[l].sin()).collect();
            let (f1, f2) = match self.param {
                Param::Centered => (
                    (0..n).map(|l| e1[l] - self.ctx.means[2 * c][l]).collect(),
                    (0..n).map(|l| e2[l] - self.ctx.means[2 * c + 1][l]).collect(),
                ),
                Param::NonCentered => (cov.mul_l(&e1), cov.mul_l(&e2)),
            };
            s.z[2 * c] = f1;
            s.z[2 * c + 1] = f2;
        }
        self.ctx.refresh_means(&mut s)?;
        Ok(s)
    }

    /// `log_density(q) − log_posterior(state_at(q))`.
    pub fn log_jacobian(&self, q: &[f64]) -> f64 {
        let n = self.ctx.n();
        let mut j = 0.0;
        for c in 0..self.ctx.k() {
            j += q[(2 * c + 1) * n..(2 * c + 2) * n].iter().map(|r| r.ln()).sum::<f64>();
            if self.param == Param::NonCentered {
                j += 2.0 * field_log_det_half(self.ctx.cov());
            }
        }
        j
    }

    fn eval(&self, q: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let ctx = self.ctx;
        let (n, k, cov) = (ctx.n(), ctx.k(), ctx.cov());
        let nf = n as f64;
        let mut lp = self.fixed;
        // Per component: full latent pair, prior pull (centered) and angle of z + μ.
        let mut zfull = Vec::with_capacity(k);
        let mut pull = Vec::with_capacity(k);
        let mut m = vec![vec![0.0; n]; k];
        for c in 0..k {
            let (ang, rad) = (&q[2 * c * n..(2 * c + 1) * n], &q[(2 * c + 1) * n..(2 * c + 2) * n]);
            if rad.iter().any(|r| !(*r > 0.0) || !r.is_finite()) || ang.iter().any(|a| !a.is_finite()) {
                return f64::NEG_INFINITY;
            }
            let e1: Vec<f64> = (0..n).map(|l| rad[l] * ang[l].cos()).collect();
            let e2: Vec<f64> = (0..n).map(|l| rad[l] * ang[l].sin()).collect();
            lp += rad.iter().map(|r| r.ln()).sum::<f64>();
            match self.param {
                Param::Centered => {
                    let f1: Vec<f64> = (0..n).map(|l| e1[l] - ctx.means[2 * c][l]).collect();
                    let f2: Vec<f64> = (0..n).map(|l| e2[l] - ctx.means[2 * c + 1][l]).collect();
                    let s1 = cov.solve(&f1);
                    let s2 = cov.solve(&f2);
                    let quad: f64 = (0..n).map(|l| f1[l] * s1[l] + f2[l] * s2[l]).sum();
                    lp += -0.5 * quad - cov.log_det() - nf * TAU.ln();
                    for l in 0..n {
                        m[c][l] = ang[l];
                    }
                    pull.push((s1, s2));
                    zfull.push((e1, e2));
                }
                Param::NonCentered => {
                    lp += -0.5 * rad.iter().map(|r| r * r).sum::<f64>() - nf * TAU.ln();
                    let l1 = cov.mul_l(&e1);
                    let l2 = cov.mul_l(&e2);
                    let z1: Vec<f64> = (0..n).map(|l| l1[l] + ctx.means[2 * c][l]).collect();
                    let z2: Vec<f64> = (0..n).map(|l| l2[l] + ctx.means[2 * c + 1][l]).collect();
                    for l in 0..n {
                        if z1[l] * z1[l] + z2[l] * z2[l] < 1e-300 {
                            return f64::NEG_INFINITY;
                        }
                        m[c][l] = z2[l].atan2(z1[l]);
                    }
                    zfull.push((z1, z2));
                }
            }
        }
        // Likelihood and its derivative with respect to each mean angle.
        let mut dm = vec![vec![0.0; n]; k];
        let mut terms = vec![0.0; k];
        let ys = ctx.ys();
        for l in 0..n {
            for c in 0..k {
                terms[c] = self.log_lambda[c] + self.rho[c][l] * (ys[l] - m[c][l]).cos() - self.lnorm[c][l];
            }
            lp += normalize_terms(&mut terms);
            for c in 0..k {
                dm[c][l] = terms[c] * self.rho[c][l] * (ys[l] - m[c][l]).sin();
            }
        }
        let Some(g) = grad else { return lp };
        for c in 0..k {
            let (ang, rad) = (&q[2 * c * n..(2 * c + 1) * n], &q[(2 * c + 1) * n..(2 * c + 2) * n]);
            let off_a = 2 * c * n;
            let off_r = (2 * c + 1) * n;
            match self.param {
                Param::Centered => {
                    let (s1, s2) = &pull[c];
                    for l in 0..n {
                        let (sa, ca, r) = (ang[l].sin(), ang[l].cos(), rad[l]);
                        g[off_a + l] = dm[c][l] + r * (sa * s1[l] - ca * s2[l]);
                        g[off_r + l] = 1.0 / r - s1[l] * ca - s2[l] * sa;
                    }
                }
                Param::NonCentered => {
                    let (z1, z2) = &zfull[c];
                    let mut g1 = vec![0.0; n];
                    let mut g2 = vec![0.0; n];
                    for l in 0..n {
                        let r2 = z1[l] * z1[l] + z2[l] * z2[l];
                        g1[l] = -dm[c][l] * z2[l] / r2;
                        g2[l] = dm[c][l] * z1[l] / r2;
                    }
                    let h1 = cov.mul_lt(&g1);
                    let h2 = cov.mul_lt(&g2);
                    for l in 0..n {
                        let (sa, ca, r) = (ang[l].sin(), ang[l].cos(), rad[l]);
                        g[off_a + l] = r * (ca * h2[l] - sa * h1[l]);
                        g[off_r + l] = h1[l] * ca + h2[l] * sa + 1.0 / r - r;
                    }
                }
            }
        }
        lp
    }
}

impl Target for PolarTarget<'_> {
    fn dim(&self) -> usize {
        2 * self.ctx.k() * self.ctx.n()
    }
    fn log_density(&self, q: &[f64]) -> f64 {
        self.eval(q, None)
    }
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(q, Some(grad))
    }
}

/// Gradient of the polar latent block of `svm`/`svmc` at a state, in the
/// layout of [`PolarTarget`].
pub fn grad_svm(spec: &ModelSpec, state: &ParamState, data: &Dataset, param: Param) -> Result<Vec<f64>> {
    let ctx = ModelContext::new(spec, data)?;
    let t = PolarTarget::new(&ctx, state, param)?;
    let q = t.coords(state)?;
    let mut g = vec![0.0; t.dim()];
    let lp = t.log_density_grad(&q, &mut g);
    if !lp.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(g)
}

/// Hierarchical log-concentrations of `svm`/`svmc` with means fixed.
///
/// Layout: `K·N` values of `φ` (centered) or `(φ − ν)/ς` (non-centered), then `K` values of `ν`.
#[derive(Clone, Debug)]
pub struct ConcTarget<'a> {
    ctx: &'a ModelContext,
    param: Param,
    mode: LikMode,
    m: Vec<Vec<f64>>,
    log_lambda: Vec<f64>,
    zeta: Vec<usize>,
    fixed: f64,
}

impl<'a> ConcTarget<'a> {
    pub fn new(ctx: &'a ModelContext, base: &ParamState, param: Param, mode: LikMode) -> Result<Self> {
        if !matches!(ctx.spec.kind, ModelKind::Svm | ModelKind::Svmc) {
            return domain("hierarchical concentrations exist only for svm and svmc");
        }
        ctx.check_state(base)?;
        if mode == LikMode::Labels && ctx.spec.kind == ModelKind::Svmc && base.zeta.len() != ctx.n() {
            return domain("label mode needs labels");
        }
        let mut fixed = ctx.log_prior_latent(base);
        if ctx.spec.kind == ModelKind::Svmc {
            fixed += dirichlet_ln(&base.lambda, ctx.spec.dirichlet_alpha);
        }
        Ok(ConcTarget {
            ctx,
            param,
            mode,
            m: base.m.clone(),
            log_lambda: ctx.weights_at(base, 0).iter().map(|w| w.ln()).collect(),
            zeta: if ctx.spec.kind == ModelKind::Svmc { base.zeta.clone() } else { vec![0; ctx.n()] },
            fixed,
        })
    }

    pub fn coords(&self, s: &ParamState) -> Vec<f64> {
        let vs = self.ctx.spec.hier.varsigma;
        let mut q = Vec::with_capacity(self.dim());
        for c in 0..self.ctx.k() {
            match self.param {
                Param::Centered => q.extend(&s.phi[c]),
                Param::NonCentered => q.extend(s.phi[c].iter().map(|p| (p - s.nu[c]) / vs)),
            }
        }
        q.extend(&s.nu);
        q
    }

    pub fn state_at(&self, q: &[f64], base: &ParamState) -> ParamState {
        let (n, k) = (self.ctx.n(), self.ctx.k());
        let vs = self.ctx.spec.hier.varsigma;
        let mut s = base.clone();
        s.nu = q[k * n..].to_vec();
        for c in 0..k {
            let blk = &q[c * n..(c + 1) * n];
            s.phi[c] = match self.param {
                Param::Centered => blk.to_vec(),
                Param::NonCentered => blk.iter().map(|t| s.nu[c] + vs * t).collect(),
            };
        }
        s
    }

    /// `log_density(q) − log_posterior(state_at(q))` in marginal mode.
    pub fn log_jacobian(&self) -> f64 {
        match self.param {
            Param::Centered => 0.0,
            Param::NonCentered => (self.ctx.k() * self.ctx.n()) as f64 * self.ctx.spec.hier.varsigma.ln(),
        }
    }

    fn eval(&self, q: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let ctx = self.ctx;
        let (n, k) = (ctx.n(), ctx.k());
        let h = ctx.spec.hier;
        if q.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let nu = &q[k * n..];
        let phi_at = |c: usize, l: usize| match self.param {
            Param::Centered => q[c * n + l],
            Param::NonCentered => nu[c] + h.varsigma * q[c * n + l],
        };
        let mut lp = self.fixed;
        let mut rho = vec![vec![0.0; n]; k];
        let mut ratio = vec![vec![0.0; n]; k];
        let mut lnorm = vec![vec![0.0; n]; k];
        for c in 0..k {
            lp += gauss_ln(nu[c], 0.0, h.tau);
            for l in 0..n {
                let p = phi_at(c, l);
                lp += match self.param {
                    Param::Centered => gauss_ln(p, nu[c], h.varsigma),
                    Param::NonCentered => gauss_ln(q[c * n + l], 0.0, 1.0),
                };
                rho[c][l] = p.exp();
                if !rho[c][l].is_finite() {
                    return f64::NEG_INFINITY;
                }
                let (ln, a) = vm_norm_ratio(rho[c][l]);
                lnorm[c][l] = ln;
                ratio[c][l] = a;
            }
        }
        let ys = ctx.ys();
        let mut w = vec![vec![0.0; n]; k];
        let mut terms = vec![0.0; k];
        for l in 0..n {
            for c in 0..k {
                terms[c] = self.log_lambda[c] + rho[c][l] * (ys[l] - self.m[c][l]).cos() - lnorm[c][l];
            }
            match self.mode {
                LikMode::Marginal => {
                    lp += normalize_terms(&mut terms);
                    for c in 0..k {
                        w[c][l] = terms[c];
                    }
                }
                LikMode::Labels => {
                    let z = self.zeta[l];
                    lp += terms[z];
                    w[z][l] = 1.0;
                }
            }
        }
        let Some(g) = grad else { return lp };
        for c in 0..k {
            let mut dnu = -nu[c] / (h.tau * h.tau);
            for l in 0..n {
                let t = w[c][l] * rho[c][l] * ((ys[l] - self.m[c][l]).cos() - ratio[c][l]);
                match self.param {
                    Param::Centered => {
                        let d = (q[c * n + l] - nu[c]) / (h.varsigma * h.varsigma);
                        g[c * n + l] = t - d;
                        dnu += d;
                    }
                    Param::NonCentered => {
                        g[c * n + l] = h.varsigma * t - q[c * n + l];
                        dnu += t;
                    }
                }
            }
            g[k * n + c] = dnu;
        }
        lp
    }
}

impl Target for ConcTarget<'_> {
    fn dim(&self) -> usize {
        self.ctx.k() * (self.ctx.n() + 1)
    }
    fn log_density(&self, q: &[f64]) -> f64 {
        self.eval(q, None)
    }
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(q, Some(grad))
    }
}

/// Full `svmp` posterior.
///
/// Layout: `(K−1)·N` logit latents (deviations `z − μ` when centered, whitened
/// `L⁻¹(z − μ)` otherwise), then `K` means, then `K` log-concentrations.
#[derive(Clone, Debug)]
pub struct SvmpTarget<'a> {
    ctx: &'a ModelContext,
    param: Param,
}

impl<'a> SvmpTarget<'a> {
    pub fn new(ctx: &'a ModelContext, param: Param) -> Result<Self> {
        if ctx.spec.kind != ModelKind::Svmp {
            return domain("SvmpTarget needs an svmp spec");
        }
        Ok(SvmpTarget { ctx, param })
    }

    pub fn coords(&self, s: &ParamState) -> Vec<f64> {
        let cov = self.ctx.cov();
        let mut q = Vec::with_capacity(self.dim());
        for f in &s.z {
            match self.param {
                Param::Centered => q.extend(f),
                Param::NonCentered => q.extend(cov.solve_l(f)),
            }
        }
        q.extend(s.m.iter().map(|m| m[0]));
        q.extend(s.phi.iter().map(|p| p[0]));
        q
    }

    pub fn state_at(&self, q: &[f64]) -> ParamState {
        let (n, k, cov) = (self.ctx.n(), self.ctx.k(), self.ctx.cov());
        let off = (k - 1) * n;
        let z = (0..k - 1)
            .map(|j| {
                let b = &q[j * n..(j + 1) * n];
                match self.param {
                    Param::Centered => b.to_vec(),
                    Param::NonCentered => cov.mul_l(b),
                }
            })
            .collect();
        ParamState {
            z,
            m: (0..k).map(|c| vec![Angle::new(q[off + c]).value()]).collect(),
            phi: (0..k).map(|c| vec![q[off + k + c]]).collect(),
            ..Default::default()
        }
    }

    pub fn log_jacobian(&self, q: &[f64]) -> f64 {
        let (n, k) = (self.ctx.n(), self.ctx.k());
        let mut j: f64 = q[(k - 1) * n + k..].iter().sum();
        if self.param == Param::NonCentered {
            j += (k - 1) as f64 * field_log_det_half(self.ctx.cov());
        }
        j
    }

    fn eval(&self, q: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let ctx = self.ctx;
        let (n, k, cov) = (ctx.n(), ctx.k(), ctx.cov());
        let nf = n as f64;
        if q.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let off = (k - 1) * n;
        let m = &q[off..off + k];
        let om = &q[off + k..off + 2 * k];
        let mut lp = 0.0;
        let mut logits = Vec::with_capacity(k - 1);
        let mut pulls = Vec::with_capacity(k - 1);
        for j in 0..k - 1 {
            let b = &q[j * n..(j + 1) * n];
            let f = match self.param {
                Param::Centered => {
                    let s = cov.solve(b);
                    lp += -0.5 * b.iter().zip(&s).map(|(x, y)| x * y).sum::<f64>()
                        - 0.5 * cov.log_det()
                        - 0.5 * nf * TAU.ln();
                    pulls.push(s);
                    b.to_vec()
                }
                Param::NonCentered => {
                    lp += -0.5 * b.iter().map(|x| x * x).sum::<f64>() - 0.5 * nf * TAU.ln();
                    cov.mul_l(b)
                }
            };
            logits.push((0..n).map(|l| f[l] + ctx.means[j][l]).collect::<Vec<f64>>());
        }
        let mut rho = vec![0.0; k];
        let mut ratio = vec![0.0; k];
        let mut lnorm = vec![0.0; k];
        for c in 0..k {
            rho[c] = om[c].exp();
            if !rho[c].is_finite() {
                return f64::NEG_INFINITY;
            }
            (lnorm[c], ratio[c]) = vm_norm_ratio(rho[c]);
            lp += -TAU.ln() - rho[c] + om[c];
        }
        let ys = ctx.ys();
        let mut resid = vec![vec![0.0; n]; k - 1];
        let mut dm = vec![0.0; k];
        let mut dom = vec![0.0; k];
        let mut terms = vec![0.0; k];
        let mut zl = vec![0.0; k - 1];
        for l in 0..n {
            for j in 0..k - 1 {
                zl[j] = logits[j][l];
            }
            let lam = generalized_inverse_logit(&zl);
            for c in 0..k {
                terms[c] = lam[c].ln() + rho[c] * (ys[l] - m[c]).cos() - lnorm[c];
            }
            lp += normalize_terms(&mut terms);
            for j in 0..k - 1 {
                resid[j][l] = terms[j] - lam[j];
            }
            for c in 0..k {
                dm[c] += terms[c] * rho[c] * (ys[l] - m[c]).sin();
                dom[c] += terms[c] * ((ys[l] - m[c]).cos() - ratio[c]);
            }
        }
        let Some(g) = grad else { return lp };
        for j in 0..k - 1 {
            let b = &q[j * n..(j + 1) * n];
            match self.param {
                Param::Centered => {
                    for l in 0..n {
                        g[j * n + l] = resid[j][l] - pulls[j][l];
                    }
                }
                Param::NonCentered => {
                    let h = cov.mul_lt(&resid[j]);
                    for l in 0..n {
                        g[j * n + l] = h[l] - b[l];
                    }
                }
            }
        }
        for c in 0..k {
            g[off + c] = dm[c];
            g[off + k + c] = rho[c] * dom[c] - rho[c] + 1.0;
        }
        lp
    }
}

impl Target for SvmpTarget<'_> {
    fn dim(&self) -> usize {
        (self.ctx.k() - 1) * self.ctx.n() + 2 * self.ctx.k()
    }
    fn log_density(&self, q: &[f64]) -> f64 {
        self.eval(q, None)
    }
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(q, Some(grad))
    }
}

/// Gradient of the `svmp` posterior with respect to the logit latents alone.
pub fn grad_svmp(spec: &ModelSpec, state: &ParamState, data: &Dataset, param: Param) -> Result<Vec<f64>> {
    let ctx = ModelContext::new(spec, data)?;
    ctx.check_state(state)?;
    let t = SvmpTarget::new(&ctx, param)?;
    let q = t.coords(state);
    let mut g = vec![0.0; t.dim()];
    t.log_density_grad(&q, &mut g);
    g.truncate((ctx.k() - 1) * ctx.n());
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(g)
}

/// `iv`/`ivm` posterior.
///
/// Layout: `K` means, `K` log-concentrations and, for `ivm`, `K` log-gamma
/// weights `η` with `λ = softmax(η)`; `e^η ~ Gamma(α, 1)` makes `λ ~ Dirichlet(α)`.
#[derive(Clone, Debug)]
pub struct IndepTarget<'a> {
    ctx: &'a ModelContext,
}

impl<'a> IndepTarget<'a> {
    pub fn new(ctx: &'a ModelContext) -> Result<Self> {
        if !matches!(ctx.spec.kind, ModelKind::Iv | ModelKind::Ivm) {
            return domain("IndepTarget needs an iv or ivm spec");
        }
        Ok(IndepTarget { ctx })
    }

    fn mixture(&self) -> bool {
        self.ctx.spec.kind == ModelKind::Ivm
    }

    /// Coordinates of a state; the free scale of `η` is set to zero mean.
    pub fn coords(&self, s: &ParamState) -> Vec<f64> {
        let mut q: Vec<f64> = s.m.iter().map(|m| m[0]).collect();
        q.extend(s.phi.iter().map(|p| p[0]));
        if self.mixture() {
            let logs: Vec<f64> = s.lambda.iter().map(|l| l.max(1e-300).ln()).collect();
            let mean = logs.iter().sum::<f64>() / logs.len() as f64;
            q.extend(logs.iter().map(|l| l - mean));
        }
        q
    }

    pub fn state_at(&self, q: &[f64]) -> ParamState {
        let k = self.ctx.k();
        let mut s = ParamState {
            m: (0..k).map(|c| vec![Angle::new(q[c]).value()]).collect(),
            phi: (0..k).map(|c| vec![q[k + c]]).collect(),
            ..Default::default()
        };
        if self.mixture() {
            s.lambda = softmax(&q[2 * k..3 * k]);
        }
        s
    }

    fn eval(&self, q: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let ctx = self.ctx;
        let (n, k) = (ctx.n(), ctx.k());
        let p = ctx.spec.indep;
        if q.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let (m, om) = (&q[..k], &q[k..2 * k]);
        let lam = if self.mixture() { softmax(&q[2 * k..3 * k]) } else { vec![1.0] };
        let mut lp = 0.0;
        let mut rho = vec![0.0; k];
        let mut ratio = vec![0.0; k];
        let mut lnorm = vec![0.0; k];
        for c in 0..k {
            rho[c] = om[c].exp();
            if !rho[c].is_finite() {
                return f64::NEG_INFINITY;
            }
            (lnorm[c], ratio[c]) = vm_norm_ratio(rho[c]);
            lp += p.log_density(m[c], rho[c]) + om[c];
        }
        let alpha = ctx.spec.dirichlet_alpha;
        if self.mixture() {
            for &e in &q[2 * k..3 * k] {
                lp += alpha * e - e.exp() - lgamma(alpha);
            }
        }
        let ys = ctx.ys();
        let mut dm = vec![0.0; k];
        let mut dom = vec![0.0; k];
        let mut rsum = vec![0.0; k];
        let mut terms = vec![0.0; k];
        for l in 0..n {
            for c in 0..k {
                terms[c] = lam[c].ln() + rho[c] * (ys[l] - m[c]).cos() - lnorm[c];
            }
            lp += normalize_terms(&mut terms);
            for c in 0..k {
                dm[c] += terms[c] * rho[c] * (ys[l] - m[c]).sin();
                dom[c] += terms[c] * ((ys[l] - m[c]).cos() - ratio[c]);
                rsum[c] += terms[c];
            }
        }
        let Some(g) = grad else { return lp };
        for c in 0..k {
            g[c] = dm[c] + p.c * (p.u - m[c]).sin();
            g[k + c] = rho[c] * dom[c] + p.a - p.b * rho[c];
            if self.mixture() {
                let e = q[2 * k + c];
                g[2 * k + c] = rsum[c] - n as f64 * lam[c] + alpha - e.exp();
            }
        }
        lp
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Target for IndepTarget<'_> {
    fn dim(&self) -> usize {
        self.ctx.k() * if self.mixture() { 3 } else { 2 }
    }
    fn log_density(&self, q: &[f64]) -> f64 {
        self.eval(q, None)
    }
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(q, Some(grad))
    }
}

/// Central-difference gradient, for checking analytic gradients.
pub fn finite_diff_grad<T: Target + ?Sized>(t: &T, q: &[f64], h: f64) -> Vec<f64> {
    let mut x = q.to_vec();
    (0..q.len())
        .map(|i| {
            x[i] = q[i] + h;
            let up = t.log_density(&x);
            x[i] = q[i] - h;
            let dn = t.log_density(&x);
            x[i] = q[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
