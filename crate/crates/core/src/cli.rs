//! Command-line front end.
//!
//! Every subcommand writes its artifacts into the output directory together with a
//! manifest recording the full argument list, so each run can be repeated exactly.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::allocator::{self, AllocatorOptions, ScanStrategy, TaskProbabilityDistribution};
use crate::cost_model::{fit_cost_model, CostModel, FitOptions, DEFAULT_COEFFICIENTS, DEFAULT_W_FLOOR};
use crate::io;
use crate::markov::{self, MarkovChain, MaxPOptions, SegmentInventory, Topology};
use crate::splice_sim::{self, Policy, PolicyKind, SimConfig, Trigger};
use crate::taskdist::{self, DistributionKind, DistributionSpec};

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "SPECALLOC_OUT_DIR";

#[derive(Debug, Parser, Serialize)]
#[command(name = "specalloc", version, about = "Probability-aware allocation for speculative tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Fit T(w) to benchmark timings (CSV `w,t_seconds`) and write the model JSON.
    Fit(FitArgs),
    /// Sample a synthetic task-probability distribution.
    GenDist(GenDistArgs),
    /// Optimal allocation of a budget over a probabilities file.
    Allocate(AllocateArgs),
    /// Optimal, naive and best-constant throughput over a list of budgets.
    Sweep(SweepArgs),
    /// Run the splicing simulator for one policy over several seeds.
    Simulate(SimulateArgs),
    /// Segment consumption probabilities from a given state.
    MaxpTable(MaxpTableArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Not recorded in manifests: outputs are named relative to it.
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    /// Value `g` is pinned to (only `a + d·ln g` is identifiable).
    #[arg(long, default_value_t = DEFAULT_COEFFICIENTS.g)]
    pub g_reference: f64,
    #[arg(long, default_value_t = DEFAULT_W_FLOOR)]
    pub w_floor: f64,
    #[arg(long, default_value = "model.json")]
    pub output: String,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistKind {
    Beta,
    Delta,
    Step,
    Mix,
}

#[derive(Debug, Args, Serialize)]
pub struct DistArgs {
    /// Distribution as a compact spec: delta:P, step:PB[:LOW:HIGH], mix:PA:PB:LOW:HIGH, beta:A:B.
    #[arg(long, conflicts_with = "kind")]
    pub dist: Option<String>,
    #[arg(long, value_enum)]
    pub kind: Option<DistKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Single delta value, or the upper peak of a mixture.
    #[arg(long, default_value_t = 1.0)]
    pub p: f64,
    /// Lower peak of a step or mixture.
    #[arg(long)]
    pub p_b: Option<f64>,
    #[arg(long, default_value_t = 9.0)]
    pub low_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub high_weight: f64,
    #[arg(long, default_value_t = taskdist::DEFAULT_TARGET_SUM)]
    pub target_sum: f64,
}

impl DistArgs {
    fn kind(&self) -> Result<DistributionKind> {
        if let Some(spec) = &self.dist {
            return Ok(spec.parse()?);
        }
        let need = |x: Option<f64>, name: &str| x.with_context(|| format!("--{name} is required for this kind"));
        let kind = match self.kind.context("one of --dist or --kind is required")? {
            DistKind::Beta => DistributionKind::beta(need(self.alpha, "alpha")?, need(self.beta, "beta")?),
            DistKind::Delta => DistributionKind::single_delta(self.p),
            DistKind::Step | DistKind::Mix => DistributionKind::DeltaMixture {
                p_high: self.p,
                p_low: need(self.p_b, "p-b")?,
                low_weight: self.low_weight,
                high_weight: self.high_weight,
            },
        };
        kind.validate()?;
        Ok(kind)
    }

    fn sample(&self, seed: u64) -> Result<TaskProbabilityDistribution> {
        let spec = DistributionSpec::new(self.kind()?, seed).with_target_sum(self.target_sum);
        Ok(taskdist::sample_distribution(&spec)?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenDistArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub dist: DistArgs,
    #[arg(long, default_value = "probs.txt")]
    pub output: String,
}

#[derive(Debug, Args, Serialize)]
pub struct AllocateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Probabilities, one per line or a JSON array.
    #[arg(long)]
    pub probs: PathBuf,
    #[arg(long)]
    pub budget: f64,
    /// Cost model JSON; the benchmark model when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "linear")]
    pub scan: Scan,
    #[arg(long, default_value = "allocation.json")]
    pub output: String,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scan {
    Linear,
    Unimodal,
}

impl From<Scan> for ScanStrategy {
    fn from(s: Scan) -> Self {
        match s {
            Scan::Linear => ScanStrategy::Linear,
            Scan::Unimodal => ScanStrategy::Unimodal,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub dist: DistArgs,
    /// Probabilities file, instead of sampling a distribution.
    #[arg(long, conflicts_with_all = ["dist", "kind"])]
    pub probs: Option<PathBuf>,
    /// Comma-separated budgets, or log:LO:HI:COUNT.
    #[arg(long)]
    pub budgets: String,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "sweep.csv")]
    pub output: String,
}

#[derive(Debug, Args, Serialize)]
pub struct ChainArgs {
    #[arg(long, value_parser = parse_topology, conflicts_with = "chain")]
    pub topology: Option<Topology>,
    #[arg(long, default_value_t = 8000)]
    pub states: usize,
    #[arg(long, default_value_t = 0.99)]
    pub rho_ii: f64,
    /// Dense transition matrix as CSV.
    #[arg(long)]
    pub chain: Option<PathBuf>,
}

fn parse_topology(s: &str) -> std::result::Result<Topology, String> {
    s.parse().map_err(|e: markov::MarkovError| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    s.parse().map_err(|e: splice_sim::SimError| e.to_string())
}

impl ChainArgs {
    fn build(&self) -> Result<MarkovChain> {
        match (&self.chain, self.topology) {
            (Some(path), _) => Ok(io::parse_chain_csv(open(path)?)?),
            (None, Some(t)) => Ok(markov::build_toy_chain(t, self.states, self.rho_ii)?),
            (None, None) => bail!("one of --topology or --chain is required"),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, default_value_t = 5000.0)]
    pub budget: f64,
    #[arg(long, value_parser = parse_policy)]
    pub policy: PolicyKind,
    #[arg(long)]
    pub wct_limit: f64,
    /// Number of replicas, seeded `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Table horizon in segments; twice the budget when omitted.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = markov::DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = markov::DEFAULT_CUTOFF)]
    pub cutoff: f64,
    /// Also reallocate after this much WCT without one.
    #[arg(long)]
    pub trigger_interval: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub preemption_penalty: f64,
    #[arg(long, default_value_t = 200)]
    pub sample_points: usize,
    #[arg(long, default_value_t = 0)]
    pub initial_state: usize,
    /// File name prefix for the outputs.
    #[arg(long, default_value = "sim")]
    pub prefix: String,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mc,
    Analytic,
}

#[derive(Debug, Args, Serialize)]
pub struct MaxpTableArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, default_value_t = 0)]
    pub current: usize,
    /// Horizon in segments; five expected escapes from the current state when omitted.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = markov::DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "mc")]
    pub method: Method,
    #[arg(long, default_value_t = markov::DEFAULT_CUTOFF)]
    pub cutoff: f64,
    #[arg(long)]
    pub j_max: Option<u32>,
    #[arg(long)]
    pub max_entries: Option<usize>,
    #[arg(long, default_value_t = markov::DEFAULT_ANALYTIC_CAP)]
    pub analytic_cap: usize,
    #[arg(long, default_value = "maxp_table.csv")]
    pub output: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    argv: &'a [String],
    command: &'a Command,
    outputs: Vec<String>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_model(path: Option<&PathBuf>) -> Result<CostModel> {
    match path {
        Some(p) => io::parse_model_json(&read(p)?).with_context(|| format!("invalid model {}", p.display())),
        None => Ok(CostModel::benchmark_default()),
    }
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, stem: &str, argv: &[String], command: &Command) -> Result<()> {
        let name = format!("{stem}.manifest.json");
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            argv,
            command,
            outputs: self.written.clone(),
        };
        self.write(&name, |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)?;
            writeln!(w)?;
            Ok(())
        })
    }
}

fn stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

/// Parses `argv` and runs the command: exit 0 on success, 2 on usage errors, 1 on
/// runtime failures.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    // argv[0] is replaced by the tool name so manifests do not depend on the install path.
    let argv: Vec<String> = std::iter::once(env!("CARGO_PKG_NAME").to_string())
        .chain(argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()))
        .collect();
    match execute(&cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(command: &Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Fit(a) => fit(a, command, argv),
        Command::GenDist(a) => gen_dist(a, command, argv),
        Command::Allocate(a) => allocate(a, command, argv),
        Command::Sweep(a) => sweep(a, command, argv),
        Command::Simulate(a) => simulate(a, command, argv),
        Command::MaxpTable(a) => maxp_table(a, command, argv),
    }
}

fn fit(a: &FitArgs, command: &Command, argv: &[String]) -> Result<()> {
    let samples = io::parse_benchmark_csv(open(&a.input)?)?;
    let opts = FitOptions { g_reference: a.g_reference, w_floor: a.w_floor, ..FitOptions::default() };
    let model = fit_cost_model(&samples, &opts)?;
    let mut out = Outputs::new(&a.common.out_dir)?;
    out.write(&a.output, |w| Ok(io::write_model_json(&model, w)?))?;
    println!(
        "w_lo={} w_max={} t_min={} t_serial={}",
        model.w_lo(),
        model.w_max(),
        model.t_min(),
        model.t_serial()
    );
    out.finish(stem(&a.output), argv, command)
}

fn gen_dist(a: &GenDistArgs, command: &Command, argv: &[String]) -> Result<()> {
    let dist = a.dist.sample(a.common.seed)?;
    let mut out = Outputs::new(&a.common.out_dir)?;
    out.write(&a.output, |w| Ok(io::write_probabilities(&dist, w)?))?;
    println!("tasks={} sum={}", dist.len(), dist.sum());
    out.finish(stem(&a.output), argv, command)
}

#[derive(Serialize)]
struct AllocationReport<'a> {
    budget: f64,
    #[serde(flatten)]
    allocation: &'a allocator::Allocation,
    naive_throughput: f64,
    boost: f64,
}

fn allocate(a: &AllocateArgs, command: &Command, argv: &[String]) -> Result<()> {
    let dist = io::parse_probabilities(&read(&a.probs)?)?;
    let model = load_model(a.model.as_ref())?;
    let opts = AllocatorOptions { scan: a.scan.into(), ..AllocatorOptions::default() };
    let opt = allocator::optimal_allocation_with(&dist, a.budget, &model, &opts)?;
    let naive = allocator::naive_allocation(&dist, a.budget, &model)?;
    let report = AllocationReport {
        budget: a.budget,
        allocation: &opt,
        naive_throughput: naive.expected_throughput,
        boost: opt.expected_throughput / naive.expected_throughput,
    };
    let mut out = Outputs::new(&a.common.out_dir)?;
    out.write(&a.output, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    println!(
        "m_star={} throughput={} naive={} boost={}",
        opt.m_star, opt.expected_throughput, naive.expected_throughput, report.boost
    );
    out.finish(stem(&a.output), argv, command)
}

fn sweep(a: &SweepArgs, command: &Command, argv: &[String]) -> Result<()> {
    let dist = match &a.probs {
        Some(p) => io::parse_probabilities(&read(p)?)?,
        None => a.dist.sample(a.common.seed)?,
    };
    let model = load_model(a.model.as_ref())?;
    let budgets = io::parse_budgets(&a.budgets)?;
    let rows = budgets
        .par_iter()
        .map(|&n| -> Result<[f64; 6]> {
            let opt = allocator::optimal_allocation(&dist, n, &model)?;
            let naive = allocator::naive_allocation(&dist, n, &model)?;
            let best = allocator::best_constant_allocation(&dist, n, &model)?;
            Ok([
                n,
                opt.expected_throughput / naive.expected_throughput,
                opt.expected_throughput,
                naive.expected_throughput,
                best.throughput,
                best.w_best,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Outputs::new(&a.common.out_dir)?;
    out.write(&a.output, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["N", "boost", "throughput_opt", "throughput_naive", "throughput_const", "w_best"])?;
        for r in &rows {
            wtr.write_record(r.iter().map(f64::to_string))?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    println!("{} budgets, {} tasks", rows.len(), dist.len());
    out.finish(stem(&a.output), argv, command)
}

fn simulate(a: &SimulateArgs, command: &Command, argv: &[String]) -> Result<()> {
    let chain = a.chain.build()?;
    let model = load_model(a.model.as_ref())?;
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let policy = Policy {
        kind: a.policy,
        budget: a.budget,
        trigger: Trigger { on_transition: true, interval: a.trigger_interval },
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.common.seed.wrapping_add(i)).collect();
    let outcomes = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SimConfig {
                horizon: a.horizon,
                n_samples: a.samples,
                cutoff: a.cutoff,
                preemption_penalty: a.preemption_penalty,
                sample_points: a.sample_points,
                initial_state: a.initial_state,
                ..SimConfig::new(policy, a.wct_limit, seed)
            };
            splice_sim::run_simulation(&chain, &model, &cfg)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let base = format!("{}_{}", a.prefix, a.policy);
    let mut out = Outputs::new(&a.common.out_dir)?;
    for (seed, o) in seeds.iter().zip(&outcomes) {
        out.write(&format!("{base}_seed{seed}.csv"), |w| Ok(io::write_series_csv(&o.series, w)?))?;
    }
    let mean = splice_sim::ensemble_mean(&outcomes);
    out.write(&format!("{base}_mean.csv"), |w| Ok(io::write_series_csv(&mean, w)?))?;
    if let Some(&(t, s)) = mean.last() {
        println!("{}: mean spliced {s} at {t} s over {} seeds", a.policy, outcomes.len());
    }
    out.finish(&base, argv, command)
}

fn maxp_table(a: &MaxpTableArgs, command: &Command, argv: &[String]) -> Result<()> {
    let chain = a.chain.build()?;
    chain.check_state(a.current)?;
    let opts = MaxPOptions {
        cutoff: a.cutoff,
        j_max: a.j_max,
        max_entries: a.max_entries,
        analytic_cap: a.analytic_cap,
        ..MaxPOptions::new(a.horizon.unwrap_or_else(|| chain.default_horizon(a.current)))
    };
    let inv = SegmentInventory::new();
    let table = match a.method {
        Method::Mc => markov::maxp_monte_carlo(&chain, a.current, &inv, &opts, a.samples, a.common.seed)?,
        Method::Analytic => markov::maxp_analytic(&chain, a.current, &inv, &opts)?,
    };
    let mut out = Outputs::new(&a.common.out_dir)?;
    out.write(&a.output, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["rank", "state", "ordinal", "p"])?;
        for (r, e) in table.entries.iter().enumerate() {
            wtr.write_record([(r + 1).to_string(), e.state.to_string(), e.ordinal.to_string(), e.p.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    println!("{} entries, horizon {}", table.len(), table.horizon);
    out.finish(stem(&a.output), argv, command)
}
