//! Flat `key=value` run configuration. Later sources override earlier ones:
//! config file, then `--set` pairs, then dedicated flags.

use circsimplex::evalsel::{default_spec, PpConfig};
use circsimplex::gp::GpSpec;
use circsimplex::models::{ModelKind, ModelSpec, Param};
use circsimplex::samplers::{InitMode, SamplerSettings};
use circsimplex::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

const KEYS: &[&str] = &[
    "model", "k", "omega", "sigma", "means", "varsigma", "tau", "alpha", "prior_u", "prior_c", "prior_a", "prior_b",
    "n_iter", "n_warmup", "thin", "chains", "leapfrog_steps", "target_accept", "param", "init", "seed", "threads",
    "n_test", "n_pred", "max_post_draws", "n_bootstrap", "tol",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Input { line, msg: msg.into() }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line).map_err(|e| match e {
                Error::Input { msg, .. } => bad(i + 1, msg),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| bad(0, format!("expected key=value, got '{pair}'")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(bad(0, format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get_str(key)
            .map(|v| v.parse::<T>().map_err(|_| bad(0, format!("cannot parse {key}={v}"))))
            .transpose()
    }

    pub fn model(&self) -> Result<ModelKind> {
        self.get_str("model").ok_or_else(|| bad(0, "no model given"))?.parse()
    }

    pub fn seed(&self) -> Result<u64> {
        Ok(self.get("seed")?.unwrap_or(0))
    }

    /// The scenario-study spec for the model, with any overrides applied.
    pub fn spec(&self) -> Result<ModelSpec> {
        let kind = self.model()?;
        let base = default_spec(kind);
        let mut spec = match self.get::<usize>("k")? {
            Some(k) if k != base.k => ModelSpec::new(kind, k)?.with_gp(base.gp)?,
            _ => base,
        };
        let omega = self.get("omega")?.unwrap_or(spec.gp.omega);
        let sigma = self.get("sigma")?.unwrap_or(spec.gp.sigma);
        spec.gp = GpSpec { omega, sigma, jitter: spec.gp.jitter };
        if let Some(m) = self.get_str("means") {
            let fields = m
                .split(';')
                .map(|f| f.trim().parse::<f64>().map(|v| vec![v]).map_err(|_| bad(0, format!("cannot parse means={m}"))))
                .collect::<Result<Vec<_>>>()?;
            spec.gp_means = fields;
        }
        if let Some(v) = self.get("varsigma")? {
            spec.hier.varsigma = v;
        }
        if let Some(v) = self.get("tau")? {
            spec.hier.tau = v;
        }
        if let Some(v) = self.get("alpha")? {
            spec.dirichlet_alpha = v;
        }
        let p = &mut spec.indep;
        for (key, slot) in [("prior_u", &mut p.u), ("prior_c", &mut p.c), ("prior_a", &mut p.a), ("prior_b", &mut p.b)] {
            if let Some(v) = self.get(key)? {
                *slot = v;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn sampler(&self, kind: ModelKind) -> Result<SamplerSettings> {
        let mut s = SamplerSettings::for_kind(kind);
        if let Some(v) = self.get("n_iter")? {
            s.n_iter = v;
        }
        if let Some(v) = self.get("n_warmup")? {
            s.n_warmup = v;
        }
        if let Some(v) = self.get("thin")? {
            s.thin = v;
        }
        if let Some(v) = self.get("chains")? {
            s.n_chains = v;
        }
        if let Some(v) = self.get("leapfrog_steps")? {
            s.leapfrog_steps = v;
        }
        if let Some(v) = self.get("target_accept")? {
            s.target_accept = v;
        }
        if let Some(v) = self.get_str("param") {
            s.param = match v.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
                "centered" => Param::Centered,
                "noncentered" => Param::NonCentered,
                _ => return Err(bad(0, format!("param must be centered or noncentered, got '{v}'"))),
            };
        }
        if let Some(v) = self.get_str("init") {
            s.init = match v {
                "em" => InitMode::Em,
                "prior" => InitMode::Prior,
                _ => return Err(bad(0, format!("init must be em or prior, got '{v}'"))),
            };
        }
        s.validate()?;
        Ok(s)
    }

    pub fn predictive(&self) -> Result<PpConfig> {
        let mut c = PpConfig::default();
        if let Some(v) = self.get("n_pred")? {
            c.n_pred_draws = v;
        }
        if let Some(v) = self.get("max_post_draws")? {
            c.max_post_draws = v;
        }
        if let Some(v) = self.get("n_bootstrap")? {
            c.n_bootstrap = v;
        }
        Ok(c)
    }
}
