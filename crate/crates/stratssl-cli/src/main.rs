//! `stratssl` command-line runner. Every subcommand resolves a JSON run
//! configuration, applies flag overrides, writes `report.json`, `report.csv`
//! and `run-manifest.json` to the output directory, and exits 0 on success,
//! 2 on invalid input and 3 on numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stratssl::allocation::{neyman, AllocationInput};
use stratssl::data::DatasetManifest;
use stratssl::inference::PerturbationConfig;
use stratssl::metric::{AccuracyMetric, MetricKind};
use stratssl::pipeline::{analyze, pilot_stratum_sds, AnalysisConfig};
use stratssl::report::{write_analysis_csv, write_comparison_csv, write_study_csv, SCHEMA_VERSION};
use stratssl::rng::derive_seed;
use stratssl::simulation::{compare_designs, run_study, Profile, ScenarioId, ScenarioSpec, StudyOptions};
use stratssl::{Error, Result};

const WORKERS_ENV: &str = "STRATSSL_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "stratssl", version, about = "Semi-supervised accuracy estimation under stratified labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum CommandKind {
    Fit,
    Evaluate,
    Perturb,
    Allocate,
    Simulate,
    CompareDesigns,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the working model (SL, SSL and optional DR/intrinsic θ) with apparent accuracy.
    Fit(Common),
    /// Apparent, cross-validated and ensemble accuracy with influence-based SEs.
    Evaluate(Common),
    /// Evaluate plus perturbation resampling for the SSL estimate; needs a seed.
    Perturb(Common),
    /// Neyman allocation from ρ/σ or from a pilot dataset.
    Allocate(AllocateArgs),
    /// Monte Carlo study of a preset or custom scenario; needs a seed.
    Simulate(SimulateArgs),
    /// Stratified versus uniform labeling on a population scenario.
    CompareDesigns(CompareArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its scalar fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (JSON pointing at a CSV).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for CV partitions and resampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Classification threshold c for the misclassification rate.
    #[arg(long)]
    threshold: Option<f64>,
    /// Number of CV folds K.
    #[arg(long)]
    folds: Option<usize>,
    /// Number of CV partitions averaged.
    #[arg(long)]
    cv_replications: Option<usize>,
    /// Number of perturbation replicates B.
    #[arg(long)]
    perturbations: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct AllocateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated stratum shares ρ.
    #[arg(long, value_delimiter = ',')]
    rho: Option<Vec<f64>>,
    /// Comma-separated stratum influence SDs σ.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    /// Total labeling budget n.
    #[arg(long)]
    budget: Option<usize>,
    /// Mixing weight toward the equal split, in [0, 1].
    #[arg(long)]
    shrinkage: Option<f64>,
    /// Metric whose influence SDs drive a pilot-based allocation (brier or omr).
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario preset name (main-i, main-ii, main-iii, s4-a, s4-b, s5-I, s5-II, s8-gm, custom).
    #[arg(long)]
    scenario: Option<String>,
    /// Study size: smoke, desk or full.
    #[arg(long)]
    profile: Option<String>,
    /// Number of strata (2 or 4 for the main scenarios).
    #[arg(long)]
    strata: Option<usize>,
    /// Labeled units per stratum.
    #[arg(long)]
    n_per_stratum: Option<usize>,
    /// Monte Carlo replicates; overrides the profile.
    #[arg(long)]
    replications: Option<usize>,
    /// JSONL checkpoint; an interrupted study resumes from it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Print the resolved scenario and analysis configuration and exit.
    #[arg(long)]
    dump_spec: bool,
    /// Report each finished replicate on stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Args, Debug, Clone)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenario: Option<String>,
    /// Total labeling budget shared by both designs.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
}

/// Allocation inputs inside a run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AllocationSection {
    rho: Option<Vec<f64>>,
    sigma: Option<Vec<f64>>,
    budget: Option<usize>,
    shrinkage: Option<f64>,
    metric: Option<AccuracyMetric>,
}

/// Resolved run configuration. It is written verbatim to the run manifest;
/// its hash, taken without the output directory, identifies the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    command: Option<CommandKind>,
    dataset: Option<PathBuf>,
    output: Option<PathBuf>,
    seed: Option<u64>,
    analysis: Option<AnalysisConfig>,
    allocation: Option<AllocationSection>,
    scenario: Option<ScenarioSpec>,
    profile: Option<Profile>,
    budget: Option<usize>,
    replications: Option<usize>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation("config", format!("{}: {e}", path.display())))?;
        // relative paths inside a config resolve against its directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn apply_common(&mut self, kind: CommandKind, c: &Common) -> Result<()> {
        if let Some(k) = self.command {
            if k != kind {
                return Err(Error::validation("command", format!("config is for {k:?}, invoked as {kind:?}")));
            }
        }
        self.command = Some(kind);
        if c.dataset.is_some() {
            self.dataset = c.dataset.clone();
        }
        if c.out.is_some() {
            self.output = c.out.clone();
        }
        if c.seed.is_some() {
            self.seed = c.seed;
        }
        Ok(())
    }

    fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("stratssl-out"))
    }

    fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::validation("seed", "required for this command (--seed or \"seed\" in the config)"))
    }

    fn require_dataset(&self) -> Result<PathBuf> {
        let p = self.dataset.clone().ok_or_else(|| Error::validation("dataset", "no dataset manifest given"))?;
        if !p.exists() {
            return Err(Error::validation("dataset", format!("{} does not exist", p.display())));
        }
        Ok(p)
    }
}

/// Scalar analysis overrides shared by the dataset commands.
fn apply_analysis_flags(cfg: &mut AnalysisConfig, c: &Common) {
    if let Some(t) = c.threshold {
        for m in cfg.metrics.iter_mut().filter(|m| m.kind == MetricKind::Omr) {
            m.threshold = t;
        }
    }
    if let Some(k) = c.folds {
        cfg.cv.folds = k;
    }
    if let Some(r) = c.cv_replications {
        cfg.cv.replications = r;
    }
    if let (Some(b), Some(p)) = (c.perturbations, cfg.perturbation.as_mut()) {
        p.replicates = b;
    }
}

fn seed_streams(cfg: &mut AnalysisConfig, seed: u64) {
    cfg.cv.seed = derive_seed(seed, 1);
    if let Some(p) = cfg.perturbation.as_mut() {
        p.seed = derive_seed(seed, 2);
    }
}

fn configure_workers(n: Option<usize>) -> Result<usize> {
    let n = match n {
        Some(0) => return Err(Error::validation("workers", "must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |v| v.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::validation("workers", e.to_string()))?;
    Ok(n)
}

fn parse_scenario(name: Option<&str>, from_config: Option<ScenarioSpec>) -> Result<ScenarioSpec> {
    match (name, from_config) {
        (Some(n), Some(s)) if ScenarioId::parse(n)? != s.id => {
            Err(Error::validation("scenario", format!("--scenario {n} conflicts with the config's {}", s.id.name())))
        }
        (_, Some(s)) => Ok(s),
        (Some(n), None) => Ok(ScenarioSpec::preset(ScenarioId::parse(n)?)),
        (None, None) => Err(Error::validation("scenario", "no scenario given")),
    }
}

fn parse_metric(s: &str) -> Result<AccuracyMetric> {
    match s {
        "brier" => Ok(AccuracyMetric::brier()),
        "omr" => Ok(AccuracyMetric { kind: MetricKind::Omr, threshold: 0.5 }),
        _ => Err(Error::validation("metric", format!("unknown metric '{s}' (brier or omr)"))),
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'a str,
    command: CommandKind,
    result: &'a T,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    cli_version: &'static str,
    library_version: &'static str,
    command: CommandKind,
    argv: Vec<String>,
    seed: Option<u64>,
    workers: usize,
    config_sha256: String,
    report_sha256: String,
    config: &'a RunConfig,
    started_unix: f64,
    finished_unix: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

struct Outputs {
    json: Vec<u8>,
    write_csv: Box<dyn FnOnce(&Path) -> Result<()>>,
}

fn outputs<T: Serialize + 'static>(
    kind: CommandKind,
    result: T,
    csv: impl FnOnce(&Path, &T) -> Result<()> + 'static,
) -> Result<Outputs> {
    let mut json = serde_json::to_vec_pretty(&Envelope { schema: SCHEMA_VERSION, command: kind, result: &result })?;
    json.push(b'\n');
    Ok(Outputs { json, write_csv: Box::new(move |p| csv(p, &result)) })
}

fn run_dataset_command(kind: CommandKind, cfg: &mut RunConfig, c: &Common) -> Result<Outputs> {
    let path = cfg.require_dataset()?;
    let mut analysis = cfg.analysis.clone().unwrap_or_default();
    apply_analysis_flags(&mut analysis, c);
    match kind {
        CommandKind::Fit => {
            analysis.estimators.cross_validated = false;
            analysis.perturbation = None;
        }
        CommandKind::Evaluate => analysis.perturbation = None,
        _ => {
            cfg.require_seed()?;
            let p = analysis.perturbation.get_or_insert_with(PerturbationConfig::default);
            p.keep_replicates = true;
            if let Some(b) = c.perturbations {
                p.replicates = b;
            }
        }
    }
    seed_streams(&mut analysis, cfg.seed.unwrap_or(0));
    analysis.validate()?;
    cfg.analysis = Some(analysis.clone());
    let (_, data) = DatasetManifest::load(&path)?;
    let result = analyze(&data, &analysis)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    outputs(kind, result, write_analysis_csv)
}

#[derive(Serialize)]
struct AllocationReport {
    metric: Option<AccuracyMetric>,
    input: AllocationInput,
    allocation: stratssl::Allocation,
}

fn run_allocate(cfg: &mut RunConfig, a: &AllocateArgs) -> Result<Outputs> {
    let mut sec = cfg.allocation.clone().unwrap_or_default();
    if a.rho.is_some() {
        sec.rho = a.rho.clone();
    }
    if a.sigma.is_some() {
        sec.sigma = a.sigma.clone();
    }
    if a.budget.is_some() {
        sec.budget = a.budget;
    }
    if a.shrinkage.is_some() {
        sec.shrinkage = a.shrinkage;
    }
    if let Some(m) = &a.metric {
        sec.metric = Some(parse_metric(m)?);
    }
    if let (Some(t), Some(m)) = (a.common.threshold, sec.metric.as_mut()) {
        m.threshold = t;
    }
    let budget = sec.budget.ok_or_else(|| Error::validation("budget", "no labeling budget given"))?;
    let (rho, sigma, metric) = match (&sec.rho, &sec.sigma) {
        (Some(r), Some(s)) => (r.clone(), s.clone(), None),
        (None, None) => {
            let path = cfg.require_dataset()?;
            let metric = sec.metric.unwrap_or_else(AccuracyMetric::brier);
            metric.validate()?;
            let analysis = cfg.analysis.clone().unwrap_or_default();
            let (_, data) = DatasetManifest::load(&path)?;
            let (sds, rho) = pilot_stratum_sds(&data, &analysis, &metric)?;
            (rho, sds, Some(metric))
        }
        _ => return Err(Error::validation("sigma", "give both rho and sigma, or neither and a pilot dataset")),
    };
    let input = AllocationInput { rho, sigma, budget, shrinkage: sec.shrinkage.unwrap_or(0.0) };
    let allocation = neyman(&input)?;
    println!("{:>8} {:>10} {:>10} {:>10} {:>8} {:>8}", "stratum", "rho", "sigma", "continuous", "n_s", "share");
    for s in 0..input.rho.len() {
        println!(
            "{:>8} {:>10.4} {:>10.4} {:>10.2} {:>8} {:>8.4}",
            s + 1,
            input.rho[s],
            input.sigma[s],
            allocation.continuous[s],
            allocation.n_s[s],
            allocation.shares[s]
        );
    }
    println!("objective {:.6e}  continuous optimum {:.6e}", allocation.objective, allocation.optimum);
    cfg.allocation = Some(sec);
    outputs(CommandKind::Allocate, AllocationReport { metric, input, allocation }, write_allocation_csv)
}

fn write_allocation_csv(path: &Path, r: &AllocationReport) -> Result<()> {
    let mut out = String::from("schema,stratum,rho,sigma,continuous,n_s,share\n");
    for s in 0..r.input.rho.len() {
        out.push_str(&format!(
            "{SCHEMA_VERSION},{},{:?},{:?},{:?},{},{:?}\n",
            s + 1,
            r.input.rho[s],
            r.input.sigma[s],
            r.allocation.continuous[s],
            r.allocation.n_s[s],
            r.allocation.shares[s]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Returns `None` for `--dump-spec`, which only prints.
fn run_simulate(cfg: &mut RunConfig, a: &SimulateArgs) -> Result<Option<Outputs>> {
    let mut spec = parse_scenario(a.scenario.as_deref(), cfg.scenario.take())?;
    if let Some(s) = a.strata {
        spec.strata = s;
    }
    if let Some(n) = a.n_per_stratum {
        spec.sampling = stratssl::simulation::Sampling::Stratified { n_per_stratum: vec![n; spec.strata] };
    }
    let mut analysis = cfg.analysis.clone().unwrap_or_else(|| spec.default_analysis());
    if let Some(p) = &a.profile {
        cfg.profile = Some(Profile::parse(p)?);
    }
    if let Some(p) = cfg.profile {
        p.apply(&mut spec, &mut analysis);
    }
    if let Some(r) = a.replications.or(cfg.replications) {
        spec.replications = r;
    }
    apply_analysis_flags(&mut analysis, &a.common);
    if let Some(t) = a.common.threshold {
        spec.threshold = t;
    }
    if a.dump_spec {
        let dump = serde_json::json!({ "scenario": spec, "analysis": analysis });
        println!("{}", serde_json::to_string_pretty(&dump)?);
        return Ok(None);
    }
    spec.seed = cfg.require_seed()?;
    spec.validate()?;
    analysis.validate()?;
    cfg.scenario = Some(spec.clone());
    cfg.analysis = Some(analysis.clone());
    let opts = StudyOptions { checkpoint: a.checkpoint.clone(), progress: a.progress };
    let report = run_study(&spec, &analysis, &opts)?;
    if !report.dropped.is_empty() {
        eprintln!("warning: {} replicates failed and were dropped", report.dropped.len());
    }
    outputs(CommandKind::Simulate, report, write_study_csv).map(Some)
}

fn run_compare(cfg: &mut RunConfig, a: &CompareArgs) -> Result<Outputs> {
    let mut spec = parse_scenario(a.scenario.as_deref(), cfg.scenario.take())?;
    spec.seed = cfg.require_seed()?;
    if let Some(t) = a.common.threshold {
        spec.threshold = t;
    }
    let budget = a.budget.or(cfg.budget).ok_or_else(|| Error::validation("budget", "no labeling budget given"))?;
    let reps = a.replications.or(cfg.replications).unwrap_or(200);
    cfg.scenario = Some(spec.clone());
    cfg.budget = Some(budget);
    cfg.replications = Some(reps);
    let cv_reps = cfg.analysis.as_ref().map_or(AnalysisConfig::default().cv.replications, |a| a.cv.replications);
    let cmp = compare_designs(&spec, budget, reps, cv_reps)?;
    outputs(CommandKind::CompareDesigns, cmp, write_comparison_csv)
}

fn run(cli: Cli) -> Result<()> {
    let started = unix_now();
    let (kind, common) = match &cli.command {
        Command::Fit(c) => (CommandKind::Fit, c.clone()),
        Command::Evaluate(c) => (CommandKind::Evaluate, c.clone()),
        Command::Perturb(c) => (CommandKind::Perturb, c.clone()),
        Command::Allocate(a) => (CommandKind::Allocate, a.common.clone()),
        Command::Simulate(a) => (CommandKind::Simulate, a.common.clone()),
        Command::CompareDesigns(a) => (CommandKind::CompareDesigns, a.common.clone()),
    };
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply_common(kind, &common)?;
    let workers = configure_workers(common.workers)?;
    let out = match &cli.command {
        Command::Fit(c) | Command::Evaluate(c) | Command::Perturb(c) => run_dataset_command(kind, &mut cfg, c)?,
        Command::Allocate(a) => run_allocate(&mut cfg, a)?,
        Command::Simulate(a) => match run_simulate(&mut cfg, a)? {
            Some(o) => o,
            None => return Ok(()),
        },
        Command::CompareDesigns(a) => run_compare(&mut cfg, a)?,
    };
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), &out.json)?;
    (out.write_csv)(&dir.join("report.csv"))?;
    let manifest = Manifest {
        tool: "stratssl",
        cli_version: env!("CARGO_PKG_VERSION"),
        library_version: stratssl::VERSION,
        command: kind,
        argv: std::env::args().collect(),
        seed: cfg.seed,
        workers,
        config_sha256: sha256_hex(&serde_json::to_vec(&RunConfig { output: None, ..cfg.clone() })?),
        report_sha256: sha256_hex(&out.json),
        config: &cfg,
        started_unix: started,
        finished_unix: unix_now(),
    };
    std::fs::write(dir.join("run-manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
