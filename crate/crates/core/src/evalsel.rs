//! Simulation scenarios, held-out posterior-predictive scores and model
//! selection.

use crate::circular::{arctan_star, vm_draw, vm_logpdf, Angle};
use crate::error::{domain, Error, Result};
use crate::gp::{build_cov, GpPredictor, GpSpec, SimplexPoint};
use crate::models::{categorical, generalized_inverse_logit, Dataset, ModelContext, ModelKind, ModelSpec, ParamState};
use crate::numeric::{log_sum_exp, stream_rng};
use crate::samplers::{fit, SamplerSettings};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// vM(π, 5) everywhere.
    IvPi,
    /// 0.3·vM(π/2, 5) + 0.7·vM(3π/2, 10).
    IvmMix,
    /// Spatial von Mises centred on π.
    SvmPi,
    /// Two spatial components around π/2 and 3π/2 with equal weight.
    Svmc,
    /// Components vM(π/2, 5), vM(3π/2, 10) with spatially varying weights.
    Svmp,
    /// Spatial von Mises centred on 0, straddling the branch cut.
    SvmZero,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::IvPi,
        ScenarioKind::IvmMix,
        ScenarioKind::SvmPi,
        ScenarioKind::Svmc,
        ScenarioKind::Svmp,
        ScenarioKind::SvmZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::IvPi => "iv",
            ScenarioKind::IvmMix => "ivm",
            ScenarioKind::SvmPi => "svm",
            ScenarioKind::Svmc => "svmc",
            ScenarioKind::Svmp => "svmp",
            ScenarioKind::SvmZero => "svm0",
        }
    }

    /// The model that generates this scenario.
    pub fn generating_spec(self) -> ModelSpec {
        let spec = |kind, k, sigma: f64, means: Vec<Vec<f64>>| {
            ModelSpec::new(kind, k)
                .and_then(|s| s.with_gp(GpSpec::new(0.1, sigma)?))
                .and_then(|s| s.with_means(means))
                .expect("scenario specs are valid")
        };
        match self {
            ScenarioKind::IvPi => ModelSpec::new(ModelKind::Iv, 1).unwrap(),
            ScenarioKind::IvmMix => ModelSpec::new(ModelKind::Ivm, 2).unwrap(),
            ScenarioKind::SvmPi => spec(ModelKind::Svm, 1, 0.5, vec![vec![-1.0], vec![0.0]]),
            ScenarioKind::Svmc => {
                spec(ModelKind::Svmc, 2, 0.5, vec![vec![0.0], vec![1.0], vec![0.0], vec![-1.0]])
            }
            ScenarioKind::Svmp => spec(ModelKind::Svmp, 2, 1.0, vec![vec![0.0]]),
            ScenarioKind::SvmZero => spec(ModelKind::Svm, 1, 0.5, vec![vec![1.0], vec![0.0]]),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.to_ascii_lowercase().as_str() {
            "iv" | "ivpi" => Ok(ScenarioKind::IvPi),
            "ivm" | "ivmmix" => Ok(ScenarioKind::IvmMix),
            "svm" | "svmpi" => Ok(ScenarioKind::SvmPi),
            "svmc" => Ok(ScenarioKind::Svmc),
            "svmp" => Ok(ScenarioKind::Svmp),
            "svm0" | "svmzero" => Ok(ScenarioKind::SvmZero),
            _ => domain(format!("unknown scenario '{s}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n_locations: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn simulate(&self) -> Result<Simulation> {
        simulate_scenario(self.kind, self.n_locations, &mut stream_rng(self.seed, 0))
    }
}

/// Generating spec and parameters, kept for recovery checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: ScenarioKind,
    pub spec: ModelSpec,
    pub state: ParamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub data: Dataset,
    pub truth: GroundTruth,
}

/// `n` points from the flat Dirichlet on the simplex.
pub fn dirichlet_locations<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<SimplexPoint> {
    let g = Gamma::<f64>::new(1.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let v: [f64; 3] = [0, 1, 2].map(|_| g.sample(rng).max(1e-300));
            let s: f64 = v.iter().sum();
            let (a, b) = (v[0] / s, v[1] / s);
            SimplexPoint::new([a, b, (1.0 - a - b).max(0.0)]).expect("normalized")
        })
        .collect()
}

pub fn simulate_scenario<R: Rng + ?Sized>(kind: ScenarioKind, n: usize, rng: &mut R) -> Result<Simulation> {
    if n == 0 {
        return domain("a scenario needs at least one location");
    }
    let spec = kind.generating_spec();
    let locations = dirichlet_locations(n, rng);
    let mut s = ParamState::default();
    let comps = |s: &mut ParamState, ms: &[f64], rhos: &[f64]| {
        s.m = ms.iter().map(|m| vec![*m]).collect();
        s.phi = rhos.iter().map(|r| vec![r.ln()]).collect();
    };
    let ys: Vec<f64> = match kind {
        ScenarioKind::IvPi => {
            comps(&mut s, &[PI], &[5.0]);
            (0..n).map(|_| vm_draw(PI, 5.0, rng)).collect()
        }
        ScenarioKind::IvmMix => {
            comps(&mut s, &[FRAC_PI_2, 3.0 * FRAC_PI_2], &[5.0, 10.0]);
            s.lambda = vec![0.3, 0.7];
            s.zeta = (0..n).map(|_| categorical(&s.lambda, rng)).collect();
            s.zeta.iter().map(|&c| vm_draw(s.m[c][0], s.phi[c][0].exp(), rng)).collect()
        }
        ScenarioKind::SvmPi | ScenarioKind::SvmZero | ScenarioKind::Svmc => {
            let nus: &[f64] = if kind == ScenarioKind::Svmc { &[3.0, 8.0] } else { &[3.0] };
            let k = nus.len();
            let ctx = ModelContext::new(&spec, &Dataset::new(locations.clone(), vec![Angle::new(0.0); n])?)?;
            let cov = ctx.cov.as_ref().expect("spatial");
            s.z = (0..2 * k).map(|_| cov.draw(rng)).collect();
            s.nu = nus.iter().map(|r| r.ln()).collect();
            s.phi = s
                .nu
                .iter()
                .map(|nu| (0..n).map(|_| nu + spec.hier.varsigma * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            s.m = vec![vec![0.0; n]; k];
            ctx.refresh_means(&mut s)?;
            let labels: Vec<usize> = if k > 1 {
                s.lambda = vec![0.5, 0.5];
                s.zeta = (0..n).map(|_| categorical(&s.lambda, rng)).collect();
                s.zeta.clone()
            } else {
                vec![0; n]
            };
            (0..n).map(|l| vm_draw(s.m[labels[l]][l], s.phi[labels[l]][l].exp(), rng)).collect()
        }
        ScenarioKind::Svmp => {
            comps(&mut s, &[FRAC_PI_2, 3.0 * FRAC_PI_2], &[5.0, 10.0]);
            let cov = build_cov(&locations, &spec.gp)?;
            s.z = vec![cov.draw(rng)];
            s.zeta = (0..n).map(|l| categorical(&generalized_inverse_logit(&[s.z[0][l]]), rng)).collect();
            s.zeta.iter().map(|&c| vm_draw(s.m[c][0], s.phi[c][0].exp(), rng)).collect()
        }
    };
    let data = Dataset::new(locations, ys.into_iter().map(Angle::new).collect())?;
    Ok(Simulation { data, truth: GroundTruth { scenario: kind, spec, state: s } })
}

/// The spec each model is fitted with in the scenario study.
pub fn default_spec(kind: ModelKind) -> ModelSpec {
    match kind {
        ModelKind::Iv => ModelSpec::new(kind, 1).unwrap(),
        ModelKind::Ivm => ModelSpec::new(kind, 2).unwrap(),
        ModelKind::Svm => ScenarioKind::SvmPi.generating_spec(),
        ModelKind::Svmc => ScenarioKind::Svmc.generating_spec(),
        ModelKind::Svmp => ScenarioKind::Svmp.generating_spec(),
    }
}

/// Splits off `n_test` points at random.
pub fn split_train_test<R: Rng + ?Sized>(data: &Dataset, n_test: usize, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if n_test == 0 || n_test >= data.len() {
        return domain(format!("cannot hold out {n_test} of {} points", data.len()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let (test, train) = idx.split_at(n_test);
    Ok((data.subset(train), data.subset(test)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpScore {
    pub model: String,
    pub log_pp: f64,
    /// Bootstrap standard error over test points.
    pub se: f64,
    pub n_test: usize,
    pub n_pred_draws: usize,
    pub n_post_draws: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpConfig {
    pub n_pred_draws: usize,
    /// Posterior draws are thinned evenly to at most this many.
    pub max_post_draws: usize,
    pub n_bootstrap: usize,
}

impl Default for PpConfig {
    fn default() -> Self {
        PpConfig { n_pred_draws: 100, max_post_draws: 200, n_bootstrap: 200 }
    }
}

/// Log densities of every test point, one row per `(posterior, predictive)` pair.
pub struct PredictiveTable {
    pub n_post: usize,
    pub n_pred: usize,
    pub n_test: usize,
    /// Indexed `[(j * n_post + i) * n_test + t]` for predictive draw `j`, posterior draw `i`.
    pub log_dens: Vec<f64>,
}

impl PredictiveTable {
    fn row(&self, i: usize, j: usize) -> &[f64] {
        let start = (j * self.n_post + i) * self.n_test;
        &self.log_dens[start..start + self.n_test]
    }

    /// Joint predictive density of the test set under per-point weights,
    /// averaged over posterior draws, then over predictive draws, then logged.
    pub fn score(&self, weights: &[f64]) -> f64 {
        let joint = |i: usize, j: usize| -> f64 { self.row(i, j).iter().zip(weights).map(|(a, w)| a * w).sum() };
        let inner: Vec<f64> = (0..self.n_pred)
            .map(|j| {
                let over_post: Vec<f64> = (0..self.n_post).map(|i| joint(i, j)).collect();
                log_sum_exp(&over_post) - (self.n_post as f64).ln()
            })
            .collect();
        log_sum_exp(&inner) - (self.n_pred as f64).ln()
    }
}

struct Extension<'a> {
    spec: &'a ModelSpec,
    train: &'a Dataset,
    test: &'a Dataset,
    predictor: Option<GpPredictor>,
}

impl<'a> Extension<'a> {
    fn new(spec: &'a ModelSpec, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        let predictor = if spec.kind.is_spatial() {
            if !spec.constant_means() {
                return domain("predictive extension needs constant GP means");
            }
            let cov = build_cov(&train.locations, &spec.gp)?;
            Some(GpPredictor::new(&cov, &train.locations, &test.locations, &spec.gp)?)
        } else {
            None
        };
        Ok(Extension { spec, train, test, predictor })
    }

    /// Per-point log densities of the test set under one predictive draw.
    fn log_dens<R: Rng + ?Sized>(&self, s: &ParamState, rng: &mut R) -> Vec<f64> {
        let (spec, ys) = (self.spec, self.test.ys());
        let nt = ys.len();
        let k = spec.k;
        let mix = |w: &[f64], ms: &[f64], rhos: &[f64], y: f64| -> f64 {
            let t: Vec<f64> = (0..w.len()).map(|c| w[c].ln() + vm_logpdf(y, ms[c], rhos[c])).collect();
            log_sum_exp(&t)
        };
        match spec.kind {
            ModelKind::Iv | ModelKind::Ivm => {
                let w = if spec.kind == ModelKind::Iv { vec![1.0] } else { s.lambda.clone() };
                let ms: Vec<f64> = s.m.iter().map(|m| m[0]).collect();
                let rhos: Vec<f64> = s.phi.iter().map(|p| p[0].exp()).collect();
                ys.iter().map(|y| mix(&w, &ms, &rhos, *y)).collect()
            }
            ModelKind::Svm | ModelKind::Svmc => {
                let pred = self.predictor.as_ref().expect("spatial");
                let fields: Vec<Vec<f64>> = s.z.iter().map(|z| pred.draw(z, rng)).collect();
                let mean = |j: usize| spec.gp_means[j][0];
                let angles: Vec<Vec<f64>> = (0..k)
                    .map(|c| {
                        (0..nt)
                            .map(|t| {
                                let (a, b) = (fields[2 * c][t] + mean(2 * c), fields[2 * c + 1][t] + mean(2 * c + 1));
                                arctan_star(a, b).map_or(0.0, |x| x.value())
                            })
                            .collect()
                    })
                    .collect();
                let h = spec.hier;
                let rhos: Vec<Vec<f64>> = (0..k)
                    .map(|c| (0..nt).map(|_| (s.nu[c] + h.varsigma * rng.sample::<f64, _>(StandardNormal)).exp()).collect())
                    .collect();
                let w = if spec.kind == ModelKind::Svm { vec![1.0] } else { s.lambda.clone() };
                (0..nt)
                    .map(|t| {
                        let ms: Vec<f64> = (0..k).map(|c| angles[c][t]).collect();
                        let rs: Vec<f64> = (0..k).map(|c| rhos[c][t]).collect();
                        mix(&w, &ms, &rs, ys[t])
                    })
                    .collect()
            }
            ModelKind::Svmp => {
                let pred = self.predictor.as_ref().expect("spatial");
                let fields: Vec<Vec<f64>> = s.z.iter().map(|z| pred.draw(z, rng)).collect();
                let ms: Vec<f64> = s.m.iter().map(|m| m[0]).collect();
                let rhos: Vec<f64> = s.phi.iter().map(|p| p[0].exp()).collect();
                (0..nt)
                    .map(|t| {
                        let logits: Vec<f64> = (0..k - 1).map(|j| fields[j][t] + spec.gp_means[j][0]).collect();
                        mix(&generalized_inverse_logit(&logits), &ms, &rhos, ys[t])
                    })
                    .collect()
            }
        }
    }
}

fn thin_evenly(draws: &[ParamState], max: usize) -> Vec<&ParamState> {
    if draws.len() <= max {
        return draws.iter().collect();
    }
    (0..max).map(|i| &draws[i * draws.len() / max]).collect()
}

/// Builds the table of predictive log densities. Posterior draw `i` uses
/// stream `i` of `seed`, so the result is independent of thread count.
pub fn predictive_table(
    spec: &ModelSpec,
    draws: &[ParamState],
    train: &Dataset,
    test: &Dataset,
    cfg: &PpConfig,
    seed: u64,
) -> Result<PredictiveTable> {
    if draws.is_empty() {
        return domain("no posterior draws to score");
    }
    if test.is_empty() || cfg.n_pred_draws == 0 {
        return domain("need at least one test point and one predictive draw");
    }
    let ctx = ModelContext::new(spec, train)?;
    let post = thin_evenly(draws, cfg.max_post_draws.max(1));
    for s in &post {
        ctx.check_state(s)?;
    }
    let ext = Extension::new(spec, train, test)?;
    debug_assert_eq!(ext.train.len(), train.len());
    let (n_post, n_pred, n_test) = (post.len(), cfg.n_pred_draws, test.len());
    let per_post: Vec<Vec<Vec<f64>>> = post
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(seed, i as u64);
            (0..n_pred).map(|_| ext.log_dens(s, &mut rng)).collect()
        })
        .collect();
    let mut log_dens = vec![0.0; n_post * n_pred * n_test];
    for (i, rows) in per_post.iter().enumerate() {
        for (j, row) in rows.iter().enumerate() {
            let start = (j * n_post + i) * n_test;
            log_dens[start..start + n_test].copy_from_slice(row);
        }
    }
    if log_dens.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite predictive density".into()));
    }
    Ok(PredictiveTable { n_post, n_pred, n_test, log_dens })
}

/// Held-out log posterior-predictive score of `draws` fitted on `train`.
pub fn log_posterior_predictive<R: Rng + ?Sized>(
    model: &str,
    spec: &ModelSpec,
    draws: &[ParamState],
    train: &Dataset,
    test: &Dataset,
    cfg: &PpConfig,
    rng: &mut R,
) -> Result<PpScore> {
    let seed: u64 = rng.random();
    let table = predictive_table(spec, draws, train, test, cfg, seed)?;
    let log_pp = table.score(&vec![1.0; table.n_test]);
    let se = bootstrap_se(&table, cfg.n_bootstrap, seed);
    Ok(PpScore {
        model: model.to_string(),
        log_pp,
        se,
        n_test: table.n_test,
        n_pred_draws: table.n_pred,
        n_post_draws: table.n_post,
        seed,
    })
}

/// Standard deviation of the score over resamples of the test points.
pub fn bootstrap_se(table: &PredictiveTable, n_boot: usize, seed: u64) -> f64 {
    if n_boot < 2 {
        return 0.0;
    }
    let scores: Vec<f64> = (0..n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed ^ 0xb007_5eed, b);
            let mut w = vec![0.0; table.n_test];
            for _ in 0..table.n_test {
                w[rng.random_range(0..table.n_test)] += 1.0;
            }
            table.score(&w)
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / n_boot as f64;
    (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n_boot - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: String,
    /// Other models within two combined standard errors of the best.
    pub tied_with: Vec<String>,
}

impl Selection {
    pub fn tie(&self) -> bool {
        !self.tied_with.is_empty()
    }

    /// True when `model` is the best or tied with it.
    pub fn admits(&self, model: &str) -> bool {
        self.best == model || self.tied_with.iter().any(|m| m == model)
    }
}

pub fn select_model(scores: &[PpScore]) -> Result<Selection> {
    let best = scores
        .iter()
        .max_by(|a, b| a.log_pp.total_cmp(&b.log_pp))
        .ok_or_else(|| Error::Domain("no scores to select from".into()))?;
    let tied_with = scores
        .iter()
        .filter(|s| !std::ptr::eq(*s, best))
        .filter(|s| best.log_pp - s.log_pp < 2.0 * (best.se.powi(2) + s.se.powi(2)).sqrt())
        .map(|s| s.model.clone())
        .collect();
    Ok(Selection { best: best.model.clone(), tied_with })
}

/// Fits `spec` on `train` and scores it on `test`.
pub fn fit_and_score(
    spec: &ModelSpec,
    set: &SamplerSettings,
    train: &Dataset,
    test: &Dataset,
    cfg: &PpConfig,
    seed: u64,
) -> Result<PpScore> {
    let f = fit(spec, train, set, seed)?;
    if let Some(msg) = f.aborted() {
        return Err(Error::Numeric(format!("{} chain aborted: {msg}", spec.kind)));
    }
    let draws: Vec<ParamState> = f.draws().cloned().collect();
    let mut rng = stream_rng(seed, 1 << 32);
    log_posterior_predictive(spec.kind.name(), spec, &draws, train, test, cfg, &mut rng)
}

pub fn write_scores<W: Write>(scores: &[PpScore], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["model", "log_pp", "se", "n_test", "seed"])?;
    for s in scores {
        wtr.write_record([s.model.clone(), s.log_pp.to_string(), s.se.to_string(), s.n_test.to_string(), s.seed.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circular::{circ_dist, summary_of};

    fn sim(kind: ScenarioKind, n: usize, seed: u64) -> Simulation {
        Scenario { kind, n_locations: n, seed }.simulate().unwrap()
    }

    #[test]
    fn iv_scenario_centres_on_pi() {
        let s = sim(ScenarioKind::IvPi, 500, 1);
        let m = summary_of(&s.data.ys()).unwrap();
        assert!(circ_dist(m.mean.value(), PI) < 0.05, "{:?}", m.mean);
    }

    #[test]
    fn ivm_scenario_weights() {
        let s = sim(ScenarioKind::IvmMix, 2000, 2);
        let p0 = s.truth.state.zeta.iter().filter(|&&z| z == 0).count() as f64 / 2000.0;
        assert!((p0 - 0.3).abs() < 0.05, "{p0}");
    }

    #[test]
    fn svmc_component_means() {
        // One realization has only a few independent GP patches, so pool seeds.
        let mut by_comp = [Vec::new(), Vec::new()];
        for seed in 0..10 {
            let s = sim(ScenarioKind::Svmc, 500, 30 + seed);
            for (l, y) in s.data.ys().into_iter().enumerate() {
                by_comp[s.truth.state.zeta[l]].push(y);
            }
        }
        for (c, target) in [(0, FRAC_PI_2), (1, 3.0 * FRAC_PI_2)] {
            let m = summary_of(&by_comp[c]).unwrap();
            assert!(circ_dist(m.mean.value(), target) < 0.1, "{c}: {:?}", m.mean);
        }
    }

    #[test]
    fn svm_scenarios_centre_where_intended() {
        for (kind, target) in [(ScenarioKind::SvmPi, PI), (ScenarioKind::SvmZero, 0.0)] {
            let s = sim(kind, 500, 4);
            let m = summary_of(&s.truth.state.m[0]).unwrap();
            assert!(circ_dist(m.mean.value(), target) < 0.5, "{kind}: {:?}", m.mean);
        }
    }

    #[test]
    fn scenarios_are_reproducible() {
        for kind in ScenarioKind::ALL {
            let a = sim(kind, 40, 9);
            let b = sim(kind, 40, 9);
            assert_eq!(a, b);
            let bits = |d: &Dataset| d.ys().iter().map(|y| y.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
            assert_eq!(kind.name().parse::<ScenarioKind>().unwrap(), kind);
        }
    }

    fn iv_state(m: f64, rho: f64) -> ParamState {
        ParamState { m: vec![vec![m]], phi: vec![vec![rho.ln()]], ..Default::default() }
    }

    #[test]
    fn independent_model_score_is_exact() {
        let s = sim(ScenarioKind::IvPi, 30, 5);
        let (train, test) = (s.data.subset(&(0..25).collect::<Vec<_>>()), s.data.subset(&(25..30).collect::<Vec<_>>()));
        let spec = default_spec(ModelKind::Iv);
        let draws = vec![iv_state(3.0, 4.0), iv_state(3.3, 6.0)];
        let cfg = PpConfig { n_pred_draws: 3, max_post_draws: 10, n_bootstrap: 0 };
        let got = log_posterior_predictive("iv", &spec, &draws, &train, &test, &cfg, &mut stream_rng(0, 0)).unwrap();
        let joint = |m: f64, r: f64| test.ys().iter().map(|y| vm_logpdf(*y, m, r)).sum::<f64>();
        let want = (0.5 * (joint(3.0, 4.0).exp() + joint(3.3, 6.0).exp())).ln();
        assert!((got.log_pp - want).abs() < 1e-12);
        assert_eq!((got.n_post_draws, got.n_pred_draws, got.n_test), (2, 3, 5));
    }

    #[test]
    fn table_score_matches_nested_average() {
        let (n_post, n_pred, n_test) = (3, 4, 2);
        let log_dens: Vec<f64> = (0..n_post * n_pred * n_test).map(|i| -((i * 7 % 11) as f64) / 3.0).collect();
        let t = PredictiveTable { n_post, n_pred, n_test, log_dens };
        let mut outer = 0.0;
        for j in 0..n_pred {
            let mut inner = 0.0;
            for i in 0..n_post {
                let start = (j * n_post + i) * n_test;
                inner += t.log_dens[start..start + n_test].iter().sum::<f64>().exp();
            }
            outer += inner / n_post as f64;
        }
        let want = (outer / n_pred as f64).ln();
        assert!((t.score(&[1.0, 1.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn repeated_training_point_scores_at_the_fitted_mean() {
        let s = sim(ScenarioKind::SvmPi, 15, 6);
        let mut spec = default_spec(ModelKind::Svm);
        spec.hier.varsigma = 1e-6;
        let mut state = s.truth.state.clone();
        state.phi = vec![vec![state.nu[0]; 15]];
        let test = s.data.subset(&[4]);
        let cfg = PpConfig { n_pred_draws: 20, max_post_draws: 1, n_bootstrap: 0 };
        let got = log_posterior_predictive("svm", &spec, &[state.clone()], &s.data, &test, &cfg, &mut stream_rng(1, 0)).unwrap();
        let want = vm_logpdf(test.ys()[0], state.m[0][4], state.nu[0].exp());
        assert!((got.log_pp - want).abs() < 1e-3, "{} vs {want}", got.log_pp);
    }

    #[test]
    fn every_model_scores_and_is_reproducible() {
        let s = sim(ScenarioKind::Svmc, 30, 7);
        let mut rng = stream_rng(7, 1);
        let (train, test) = split_train_test(&s.data, 6, &mut rng).unwrap();
        let mut set = SamplerSettings::for_kind(ModelKind::Svm);
        set.n_chains = 1;
        set.n_iter = 120;
        set.n_warmup = 60;
        let cfg = PpConfig { n_pred_draws: 5, max_post_draws: 8, n_bootstrap: 20 };
        for kind in ModelKind::ALL {
            let spec = default_spec(kind);
            let a = fit_and_score(&spec, &set, &train, &test, &cfg, 3).unwrap();
            let b = fit_and_score(&spec, &set, &train, &test, &cfg, 3).unwrap();
            assert!(a.log_pp.is_finite() && a.se >= 0.0, "{kind}: {a:?}");
            assert_eq!(a.log_pp.to_bits(), b.log_pp.to_bits());
        }
    }

    #[test]
    fn empty_draws_are_rejected() {
        let s = sim(ScenarioKind::IvPi, 10, 8);
        let spec = default_spec(ModelKind::Iv);
        let r = log_posterior_predictive("iv", &spec, &[], &s.data, &s.data, &PpConfig::default(), &mut stream_rng(0, 0));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    fn score(model: &str, log_pp: f64, se: f64) -> PpScore {
        PpScore { model: model.into(), log_pp, se, n_test: 20, n_pred_draws: 100, n_post_draws: 100, seed: 0 }
    }

    #[test]
    fn selection_cases() {
        assert!(select_model(&[]).is_err());
        let one = select_model(&[score("a", -3.0, 0.1)]).unwrap();
        assert_eq!((one.best.as_str(), one.tie()), ("a", false));
        let ordered = select_model(&[score("a", -30.0, 0.1), score("b", -10.0, 0.1), score("c", -20.0, 0.1)]).unwrap();
        assert_eq!((ordered.best.as_str(), ordered.tie()), ("b", false));
        // Gap 0.5 against a combined SE of √2·0.5 ≈ 0.71, doubled to 1.41.
        let tied = select_model(&[score("a", -10.0, 0.5), score("b", -10.5, 0.5), score("c", -20.0, 0.5)]).unwrap();
        assert_eq!(tied.best, "a");
        assert_eq!(tied.tied_with, vec!["b".to_string()]);
        assert!(tied.admits("b") && !tied.admits("c"));
    }

    #[test]
    fn scores_csv_layout() {
        let mut buf = Vec::new();
        write_scores(&[score("svm", -1.5, 0.25)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "model,log_pp,se,n_test,seed\nsvm,-1.5,0.25,20,0\n");
    }
}
