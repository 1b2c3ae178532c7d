mod config;

use circsimplex::dirext::{extract_all, load_dataset, load_pairs, write_dataset, write_observations};
use circsimplex::em::em_for;
use circsimplex::evalsel::{
    fit_and_score, log_posterior_predictive, select_model, split_train_test, write_scores, Scenario, ScenarioKind,
};
use circsimplex::models::{Dataset, ModelKind, ModelSpec};
use circsimplex::numeric::stream_rng;
use circsimplex::samplers::{fit, read_chain_jsonl, summarize, write_chain_jsonl, Chain};
use circsimplex::{Error, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const RHAT_LIMIT: f64 = 1.2;

#[derive(Parser)]
#[command(name = "circsimplex", version, about = "Spatial von Mises models for directions on the simplex")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for chains and Monte Carlo blocks.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario dataset and its ground truth.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Dataset CSV; the ground truth goes next to it as `<stem>.truth.json`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Turn composition pairs into a direction dataset.
    Extract {
        #[arg(long)]
        pairs: PathBuf,
        /// Max-norm distance under which locations count as duplicates.
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run EM and write the fitted state.
    EmInit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sample the posterior; writes chain files and a summary.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score held-out data against saved chains.
    Predict {
        /// Data the chains were fitted on.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        chains: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit several models on a split and pick the best predictive score.
    Select {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated model names.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize saved chains.
    Summarize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        chains: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Status {
    Ok,
    Unconverged,
}

fn load_config(c: &Common, model: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &c.set {
        cfg.set_pair(pair)?;
    }
    if let Some(m) = model {
        cfg.set("model", m)?;
    }
    if let Some(s) = c.seed {
        cfg.set("seed", s.to_string())?;
    }
    if let Some(t) = c.threads {
        cfg.set("threads", t.to_string())?;
    }
    if let Some(t) = cfg.get::<usize>("threads")? {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{text}")?;
            w.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn chain_path(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("chain-{c}.jsonl"))
}

fn load_chains(dir: &Path) -> Result<(ModelSpec, Vec<Chain>)> {
    let mut spec = None;
    let mut chains = Vec::new();
    for c in 0.. {
        let p = chain_path(dir, c);
        if !p.exists() {
            break;
        }
        let (s, chain) = read_chain_jsonl(BufReader::new(File::open(&p)?))?;
        if spec.as_ref().is_some_and(|prev| *prev != s) {
            return Err(Error::Input { line: 1, msg: format!("{} has a different model spec", p.display()) });
        }
        spec = Some(s);
        chains.push(chain);
    }
    let spec = spec.ok_or_else(|| Error::Input { line: 0, msg: format!("no chain files in {}", dir.display()) })?;
    Ok((spec, chains))
}

fn simulate(scenario: &str, n: usize, out: &Path, common: &Common) -> Result<Status> {
    let cfg = load_config(common, None)?;
    let kind: ScenarioKind = scenario.parse()?;
    let sim = Scenario { kind, n_locations: n, seed: cfg.seed()? }.simulate()?;
    let mut w = create(out)?;
    write_dataset(&sim.data, &mut w)?;
    w.flush()?;
    write_json(&sim.truth, Some(&out.with_extension("truth.json")))?;
    eprintln!("wrote {n} observations from scenario {kind}");
    Ok(Status::Ok)
}

fn extract(pairs: &Path, tol: f64, out: &Path) -> Result<Status> {
    let ex = extract_all(&load_pairs(pairs)?, tol);
    for (line, reason) in &ex.skipped {
        eprintln!("line {line}: skipped ({reason})");
    }
    let mut w = create(out)?;
    write_observations(&ex.observations, &mut w)?;
    w.flush()?;
    eprintln!(
        "kept {}, skipped {}, duplicates removed {}",
        ex.observations.len(),
        ex.skipped.len(),
        ex.duplicates_removed
    );
    Ok(Status::Ok)
}

fn em_init(data: &Path, model: Option<&str>, out: &Path, common: &Common) -> Result<Status> {
    let cfg = load_config(common, model)?;
    let spec = cfg.spec()?;
    let data = load_dataset(data)?;
    let mut em = cfg.sampler(spec.kind)?.em;
    if let Some(t) = cfg.get("tol")? {
        em.tol = t;
    }
    let res = em_for(&spec, &data, &em, &mut stream_rng(cfg.seed()?, 0))?;
    write_json(&serde_json::json!({ "model": spec.kind, "objective": res.objective(), "result": res }), Some(out))?;
    Ok(Status::Ok)
}

fn fit_cmd(data: &Path, model: Option<&str>, out: &Path, common: &Common) -> Result<Status> {
    let cfg = load_config(common, model)?;
    let spec = cfg.spec()?;
    let set = cfg.sampler(spec.kind)?;
    let data = load_dataset(data)?;
    let f = fit(&spec, &data, &set, cfg.seed()?)?;
    std::fs::create_dir_all(out)?;
    for (c, chain) in f.chains.iter().enumerate() {
        let mut w = create(&chain_path(out, c))?;
        write_chain_jsonl(chain, &spec, &mut w)?;
        w.flush()?;
    }
    if let Some(msg) = f.aborted() {
        return Err(Error::Numeric(format!("a chain aborted: {msg}")));
    }
    let summary = summarize(&spec, &data, &f.chains)?;
    write_json(&summary, Some(&out.join("summary.json")))?;
    convergence(f.max_rhat())
}

fn convergence(max_rhat: f64) -> Result<Status> {
    if max_rhat > RHAT_LIMIT || max_rhat.is_nan() {
        eprintln!("warning: max split R-hat {max_rhat:.3} exceeds {RHAT_LIMIT}");
        return Ok(Status::Unconverged);
    }
    Ok(Status::Ok)
}

fn predict(train: &Path, test: &Path, chains: &Path, out: Option<&Path>, common: &Common) -> Result<Status> {
    let (spec, chains) = load_chains(chains)?;
    let mut cfg = load_config(common, None)?;
    if cfg.get_str("model").is_none() {
        cfg.set("model", spec.kind.name())?;
    }
    let (train, test) = (load_dataset(train)?, load_dataset(test)?);
    let draws: Vec<_> = chains.iter().flat_map(|c| c.draws.iter().cloned()).collect();
    let pp = cfg.predictive()?;
    let score =
        log_posterior_predictive(spec.kind.name(), &spec, &draws, &train, &test, &pp, &mut stream_rng(cfg.seed()?, 0))?;
    match out {
        Some(p) => {
            let mut w = create(p)?;
            write_scores(&[score], &mut w)?;
            w.flush()?;
        }
        None => write_scores(&[score], std::io::stdout().lock())?,
    }
    Ok(Status::Ok)
}

fn select(data: &Path, models: &[String], n_test: Option<usize>, out: &Path, common: &Common) -> Result<Status> {
    if models.len() < 2 {
        return Err(Error::Input { line: 0, msg: "select needs at least two models".into() });
    }
    let mut cfg = load_config(common, None)?;
    let seed = cfg.seed()?;
    let n_test = match n_test {
        Some(n) => n,
        None => cfg.get("n_test")?.unwrap_or(20),
    };
    let data = load_dataset(data)?;
    let (train, test) = split_train_test(&data, n_test, &mut stream_rng(seed, u64::MAX))?;
    let pp = cfg.predictive()?;
    let mut scores = Vec::new();
    let mut failed = 0;
    for m in models {
        let kind: ModelKind = m.parse()?;
        cfg.set("model", kind.name())?;
        let (spec, set) = (cfg.spec()?, cfg.sampler(kind)?);
        match fit_and_score(&spec, &set, &train, &test, &pp, seed) {
            Ok(s) => {
                eprintln!("{kind}: log pp {:.3} (se {:.3})", s.log_pp, s.se);
                scores.push(s);
            }
            Err(e) => {
                eprintln!("{kind}: failed ({e})");
                failed += 1;
            }
        }
    }
    let mut w = create(out)?;
    write_scores(&scores, &mut w)?;
    w.flush()?;
    let sel = select_model(&scores)?;
    if sel.tie() {
        println!("selected: {} (tied with {})", sel.best, sel.tied_with.join(", "));
    } else {
        println!("selected: {}", sel.best);
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} model(s) failed to score")));
    }
    Ok(Status::Ok)
}

fn summarize_cmd(data: &Path, chains: &Path, out: Option<&Path>) -> Result<Status> {
    let (spec, chains) = load_chains(chains)?;
    let data: Dataset = load_dataset(data)?;
    let summary = summarize(&spec, &data, &chains)?;
    write_json(&summary, out)?;
    let max_rhat = summary.diagnostics.iter().map(|d| d.rhat).fold(1.0, f64::max);
    if chains.len() > 1 {
        return convergence(max_rhat);
    }
    Ok(Status::Ok)
}

fn run(cli: Cli) -> Result<Status> {
    match cli.cmd {
        Command::Simulate { scenario, n, out, common } => simulate(&scenario, n, &out, &common),
        Command::Extract { pairs, tol, out } => extract(&pairs, tol, &out),
        Command::EmInit { data, model, out, common } => em_init(&data, model.as_deref(), &out, &common),
        Command::Fit { data, model, out, common } => fit_cmd(&data, model.as_deref(), &out, &common),
        Command::Predict { train, test, chains, out, common } => predict(&train, &test, &chains, out.as_deref(), &common),
        Command::Select { data, models, n_test, out, common } => select(&data, &models, n_test, &out, &common),
        Command::Summarize { data, chains, out } => summarize_cmd(&data, &chains, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Unconverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
