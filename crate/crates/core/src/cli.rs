//! Command-line front end.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use crate::audit;
use crate::baseline::{self, ScaConfig};
use crate::experiments::{
    self, aggregate, dbm_to_watt, db_to_linear, gen_channels, mean_series, svg_plot, EePlan, ExperimentPlan, PlanKind,
};
use crate::model::{ChannelSet, ModelError, ProblemSpec, SchemeConfig};
use crate::sitbb::{self, SolveStatus, SolverConfig, WarmStart};

#[derive(Debug, Parser)]
#[command(name = "rsma-globopt", about = "Globally optimal RSMA beamforming", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one instance with branch-and-bound and SCA.
    Solve(SolveArgs),
    /// Two-user rate region from a plan.
    RateRegion(PlanArgs),
    /// Sum rate against SNR from a plan.
    SweepSnr(PlanArgs),
    /// Energy efficiency against transmit power from a plan.
    SweepEe(PlanArgs),
    /// Solve several seeded instances and report run times.
    Bench(BenchArgs),
    /// Run the property and oracle suites.
    Audit(AuditArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InstanceArgs {
    /// Channel file; the first record is used unless --index is given.
    #[arg(long)]
    pub channels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "K", default_value_t = 2)]
    pub users: usize,
    #[arg(long = "M", default_value_t = 2)]
    pub antennas: usize,
    /// Per-user channel variances (comma separated).
    #[arg(long = "var", value_delimiter = ',')]
    pub variances: Vec<f64>,
    #[arg(long = "snr-db")]
    pub snr_db: Option<f64>,
    #[arg(long = "power-dbm")]
    pub power_dbm: Option<f64>,
    #[arg(long, default_value = "rsma")]
    pub scheme: String,
    #[arg(long, default_value = "wsr")]
    pub objective: String,
    #[arg(long, value_delimiter = ',')]
    pub qos: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    #[arg(long, default_value_t = 0.02)]
    pub eta: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub epsilon: f64,
    /// Wall-clock budget per solve in seconds.
    #[arg(long = "max-time", default_value_t = 600.0)]
    pub max_time: f64,
    #[arg(long = "no-warm-start")]
    pub no_warm_start: bool,
    /// Require a nonzero common precoder in the answer.
    #[arg(long = "pc-nonzero")]
    pub pc_nonzero: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[arg(long = "no-sca")]
    pub no_sca: bool,
    /// Write the solver trace to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Exit nonzero unless the result is certified.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// File with one seed per line, replacing the plan's seeds.
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "max-time")]
    pub max_time: Option<f64>,
    #[arg(long = "no-warm-start")]
    pub no_warm_start: bool,
    /// Record wall times in the CSV (breaks byte-identical reruns).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[arg(long, default_value_t = 5)]
    pub count: u64,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Smaller sample counts.
    #[arg(long)]
    pub quick: bool,
}

fn usage(msg: impl Into<String>) -> ModelError {
    ModelError::Problem(msg.into())
}

fn per_user(v: &[f64], k: usize, default: f64, what: &str) -> Result<Vec<f64>, ModelError> {
    match v.len() {
        0 => Ok(vec![default; k]),
        1 => Ok(vec![v[0]; k]),
        n if n == k => Ok(v.to_vec()),
        n => Err(usage(format!("--{what} has {n} entries for {k} users"))),
    }
}

impl InstanceArgs {
    fn channels_for(&self, seed: u64) -> Result<ChannelSet, ModelError> {
        if let Some(path) = &self.channels {
            let f = fs::File::open(path)?;
            let mut recs = ChannelSet::read_records(BufReader::new(f))?;
            if self.index >= recs.len() {
                return Err(usage(format!("channel file has {} records", recs.len())));
            }
            return Ok(recs.swap_remove(self.index));
        }
        let vars = per_user(&self.variances, self.users, 1.0, "var")?;
        Ok(gen_channels(seed, self.users, self.antennas, &vars))
    }

    pub fn problem(&self, seed: u64) -> Result<ProblemSpec, ModelError> {
        let scheme = SchemeConfig::parse(&self.scheme)?;
        if self.pc_nonzero && scheme == SchemeConfig::Mulp {
            return Err(usage("--pc-nonzero contradicts --scheme mulp"));
        }
        let ch = self.channels_for(seed)?;
        let k = ch.users();
        let qos = per_user(&self.qos, k, 0.0, "qos")?;
        let problem = match self.objective.as_str() {
            "wsr" => {
                if self.power_dbm.is_some() {
                    return Err(usage("wsr uses --snr-db, not --power-dbm"));
                }
                let snr = self.snr_db.ok_or_else(|| usage("wsr needs --snr-db"))?;
                ProblemSpec::wsr(ch, per_user(&self.weights, k, 1.0, "weights")?, qos, db_to_linear(snr))?
            }
            "ee" => {
                if self.snr_db.is_some() || !self.weights.is_empty() {
                    return Err(usage("ee uses --power-dbm and unit weights"));
                }
                let dbm = self.power_dbm.ok_or_else(|| usage("ee needs --power-dbm"))?;
                let ee = EePlan::default();
                let ch = ch.scaled(1.0 / ee.noise_var.sqrt());
                let m = ch.antennas();
                ProblemSpec::ee(ch, qos, dbm_to_watt(dbm), ee.mu, ee.static_power(m))?
            }
            other => return Err(usage(format!("unknown objective {other:?}"))),
        };
        problem.with_scheme(scheme)
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            eta: self.eta,
            epsilon: self.epsilon,
            max_wall_time: Duration::from_secs_f64(self.max_time),
            warm_start: if self.no_warm_start { WarmStart::None } else { WarmStart::Sca },
            ..SolverConfig::default()
        }
    }
}

fn print_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

fn run_solve(a: &SolveArgs, out: &mut dyn Write) -> Result<i32, ModelError> {
    let problem = a.instance.problem(a.instance.seed)?;
    let cfg = a.instance.solver_config();
    if !a.no_sca {
        let t = Instant::now();
        let s = baseline::sca_solve(&problem, &ScaConfig::default());
        writeln!(
            out,
            "sca: status={} objective={:.6} feasible={} time={:.3}s",
            s.status.name(),
            s.report.objective,
            s.report.feasible,
            t.elapsed().as_secs_f64()
        )?;
    }
    let o = sitbb::solve(&problem, &cfg)?;
    writeln!(
        out,
        "bb: status={} scheme={} iterations={} nodes={} numerical_failures={} time={:.3}s",
        o.status,
        o.scheme,
        o.iterations,
        o.nodes_explored,
        o.numerical_failures,
        o.wall_time.as_secs_f64()
    )?;
    let mut code = 0;
    match &o.incumbent {
        Some(r) => {
            writeln!(out, "objective: {:.6}", r.objective)?;
            writeln!(out, "rates: {}", print_vec(&r.rates))?;
            writeln!(out, "common rates: {}", print_vec(&r.common_rates))?;
            writeln!(out, "power: {:.6}", r.precoders.total_power())?;
            if o.status == SolveStatus::OptimalCertified {
                writeln!(
                    out,
                    "certificate: optimum in [{:.6}, {:.6}] (delta - eta = {:.6})",
                    r.objective,
                    o.delta_final,
                    o.delta_final - o.eta
                )?;
            }
            let pc: f64 = r.precoders.common.iter().map(|z| z.norm_sqr()).sum();
            if a.instance.pc_nonzero && pc <= 1e-12 {
                writeln!(out, "warning: common precoder is zero")?;
                code = 1;
            }
        }
        None if o.status == SolveStatus::EpsilonEssentialInfeasible => writeln!(out, "certificate: no epsilon-essential feasible point")?,
        None => writeln!(out, "no feasible point found")?,
    }
    if let Some(path) = &a.trace {
        let mut f = fs::File::create(path)?;
        for ev in &o.trace {
            writeln!(f, "{ev}")?;
        }
    }
    if a.strict && o.status == SolveStatus::BudgetExhausted {
        code = 2;
    }
    Ok(code)
}

fn load_plan(a: &PlanArgs, kind: PlanKind) -> Result<ExperimentPlan, ModelError> {
    let mut plan = ExperimentPlan::load(&a.plan)?;
    if plan.kind != kind {
        return Err(usage(format!("plan {} is not a {kind:?} plan", a.plan.display())));
    }
    if let Some(path) = &a.seeds {
        let text = fs::read_to_string(path)?;
        let seeds: Vec<u64> = text
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| usage(format!("bad seed {s:?}"))))
            .collect::<Result<_, _>>()?;
        let first = *seeds.first().ok_or_else(|| usage("seed file is empty"))?;
        if seeds.iter().enumerate().any(|(i, s)| *s != first + i as u64) {
            return Err(usage("seed file must list consecutive seeds"));
        }
        plan.channels.first_seed = first;
        plan.channels.count = seeds.len() as u64;
    }
    if let Some(e) = a.eta {
        plan.solver.eta = e;
    }
    if let Some(e) = a.epsilon {
        plan.solver.epsilon = e;
    }
    if let Some(t) = a.max_time {
        plan.solver.max_time_s = t;
    }
    if a.no_warm_start {
        plan.solver.warm_start = false;
    }
    plan.validate()?;
    Ok(plan)
}

fn run_plan_cmd(a: &PlanArgs, kind: PlanKind, out: &mut dyn Write) -> Result<i32, ModelError> {
    let plan = load_plan(a, kind)?;
    fs::create_dir_all(&a.out)?;
    let rows = experiments::run_plan(&plan, a.jobs)?;
    let csv_path = a.out.join(format!("{}.csv", plan.name));
    experiments::write_csv(fs::File::create(&csv_path)?, &rows, plan.channels.users, a.timing)?;
    writeln!(out, "wrote {}", csv_path.display())?;

    let means = aggregate(&rows);
    let uncertified: usize = means.iter().map(|m| m.skipped).sum();
    for m in &means {
        writeln!(
            out,
            "{:>6} {:>3} x={:<8} mean={} n={} skipped={}",
            m.scheme,
            m.solver.name(),
            m.grid_x,
            m.mean.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            m.count,
            m.skipped
        )?;
    }
    if a.svg {
        let svg = match kind {
            PlanKind::RateRegion => {
                let region = experiments::rate_region(&rows);
                let series: Vec<(String, Vec<(f64, f64)>)> = region
                    .hulls
                    .iter()
                    .map(|((s, k), h)| (format!("{s} {}", k.name()), h.clone()))
                    .collect();
                svg_plot(&plan.name, "R1 [bpcu]", "R2 [bpcu]", &series)
            }
            PlanKind::SumRate => svg_plot(&plan.name, "SNR [dB]", "sum rate [bpcu]", &mean_series(&means)),
            PlanKind::Ee => svg_plot(&plan.name, "P [dBm]", "EE [bits/J/Hz]", &mean_series(&means)),
        };
        let p = a.out.join(format!("{}.svg", plan.name));
        fs::write(&p, svg)?;
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(if a.strict && uncertified > 0 { 2 } else { 0 })
}

fn run_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<i32, ModelError> {
    let cfg = a.instance.solver_config();
    let mut times = Vec::new();
    for i in 0..a.count {
        let seed = a.instance.seed + i;
        let p = a.instance.problem(seed)?;
        let o = sitbb::solve(&p, &cfg)?;
        let t = o.wall_time.as_secs_f64();
        writeln!(
            out,
            "seed={seed} status={} objective={} iterations={} time={t:.3}s",
            o.status,
            o.objective().map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            o.iterations
        )?;
        times.push(t);
    }
    times.sort_by(f64::total_cmp);
    if !times.is_empty() {
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        writeln!(out, "mean={mean:.3}s median={:.3}s", times[times.len() / 2])?;
    }
    Ok(0)
}

fn run_audit(a: &AuditArgs, out: &mut dyn Write) -> Result<i32, ModelError> {
    let results = audit::run_suite(a.quick);
    for r in &results {
        writeln!(out, "{r}")?;
    }
    Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
}

/// Runs one invocation, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32, ModelError> {
    match &cli.command {
        Command::Solve(a) => run_solve(a, out),
        Command::RateRegion(a) => run_plan_cmd(a, PlanKind::RateRegion, out),
        Command::SweepSnr(a) => run_plan_cmd(a, PlanKind::SumRate, out),
        Command::SweepEe(a) => run_plan_cmd(a, PlanKind::Ee, out),
        Command::Bench(a) => run_bench(a, out),
        Command::Audit(a) => run_audit(a, out),
    }
}

/// Process entry point: parses arguments, sets up logging, maps errors to
/// exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("RSMA_GLOBOPT_LOG")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 64 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            64
        }
    }
}

pub fn plan_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.cfg"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("rsma-globopt").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn contradictory_flags_are_rejected() {
        let cli = parse(&["solve", "--scheme", "mulp", "--pc-nonzero", "--snr-db", "10"]);
        let mut buf = Vec::new();
        assert!(run(&cli, &mut buf).is_err());
        assert_eq!(main_with_args(["rsma-globopt", "solve", "--scheme", "mulp", "--pc-nonzero", "--snr-db", "10"]), 64);
    }

    #[test]
    fn missing_snr_is_a_usage_error() {
        let cli = parse(&["solve"]);
        assert!(run(&cli, &mut Vec::new()).is_err());
        assert_ne!(main_with_args(["rsma-globopt", "frobnicate"]), 0);
    }

    #[test]
    fn solve_smoke() {
        let cli = parse(&["solve", "--seed", "7", "--K", "2", "--M", "2", "--snr-db", "10", "--scheme", "mulp", "--eta", "0.05"]);
        let mut buf = Vec::new();
        assert_eq!(run(&cli, &mut buf).unwrap(), 0);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("objective:"), "{text}");
        assert!(text.contains("certificate:"), "{text}");
    }

    #[test]
    fn ee_instance_uses_watts_and_noise() {
        let cli = parse(&["solve", "--objective", "ee", "--power-dbm", "10", "--qos", "1"]);
        let Command::Solve(a) = &cli.command else { unreachable!() };
        let p = a.instance.problem(0).unwrap();
        assert!((p.power - 0.01).abs() < 1e-12);
        assert!((p.mu - 0.35).abs() < 1e-15);
        let raw = gen_channels(0, 2, 2, &[1.0, 1.0]);
        assert!((p.channels.norm_sqr(0) - raw.norm_sqr(0) * 1e4).abs() < 1e-6 * p.channels.norm_sqr(0));
    }
}
