//! Channel generation, experiment plans and result aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{self, ScaConfig, ScaOutcome};
use crate::model::{ChannelMeta, ChannelSet, ModelError, ProblemSpec, SchemeConfig, SolutionReport, C64};
use crate::sitbb::{self, SolveStatus, SolverConfig, SolverOutcome, WarmStart};

/// I.i.d. circularly symmetric Gaussian channels with per-user variance.
///
/// Draws come from ChaCha8 seeded with `seed`, user-major, antenna-minor,
/// real part before imaginary part, each component with variance `var / 2`.
pub fn gen_channels(seed: u64, users: usize, antennas: usize, variances: &[f64]) -> ChannelSet {
    assert_eq!(variances.len(), users, "one variance per user");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = variances
        .iter()
        .map(|&v| {
            let d = Normal::new(0.0, (v / 2.0).sqrt()).expect("variance must be positive");
            (0..antennas)
                .map(|_| {
                    let re = d.sample(&mut rng);
                    let im = d.sample(&mut rng);
                    C64::new(re, im)
                })
                .collect()
        })
        .collect();
    ChannelSet::new(h)
        .expect("gaussian draws are finite")
        .with_meta(ChannelMeta { seed: Some(seed), variances: Some(variances.to_vec()) })
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// dBm to watts.
pub fn dbm_to_watt(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// Rate-region weight exponents: -3, then -1 to 1 in steps of 0.05, then 3.
pub fn region_weight_exponents() -> Vec<f64> {
    let mut x = vec![-3.0];
    x.extend((-20..=20).map(|i| i as f64 / 20.0));
    x.push(3.0);
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    RateRegion,
    SumRate,
    Ee,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub users: usize,
    pub antennas: usize,
    pub variances: Vec<f64>,
    pub first_seed: u64,
    pub count: u64,
}

impl ChannelPlan {
    pub fn seeds(&self) -> Vec<u64> {
        (self.first_seed..self.first_seed + self.count).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverPlan {
    pub eta: f64,
    pub epsilon: f64,
    pub max_time_s: f64,
    pub warm_start: bool,
    pub run_bb: bool,
    pub run_sca: bool,
}

impl Default for SolverPlan {
    fn default() -> Self {
        Self { eta: 0.05, epsilon: 1e-7, max_time_s: 600.0, warm_start: true, run_bb: true, run_sca: true }
    }
}

/// Energy-efficiency constants; powers in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EePlan {
    pub mu: f64,
    pub noise_var: f64,
    pub p_dyn_dbm: f64,
    pub p_sta_mw: f64,
}

impl Default for EePlan {
    fn default() -> Self {
        Self { mu: 0.35, noise_var: 1e-4, p_dyn_dbm: 27.0, p_sta_mw: 1.0 }
    }
}

impl EePlan {
    pub fn static_power(&self, antennas: usize) -> f64 {
        antennas as f64 * dbm_to_watt(self.p_dyn_dbm) + self.p_sta_mw * 1e-3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub kind: PlanKind,
    /// SNR in dB (sum rate), transmit power in dBm (EE) or weight exponent
    /// `x` with `u = (1, 10^x)` (rate region).
    pub grid: Vec<f64>,
    /// QoS thresholds: one per grid point for sum-rate sweeps, otherwise a
    /// single value applied to every user.
    pub qos: Vec<f64>,
    pub schemes: Vec<String>,
    /// Fixed SNR of rate-region plans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub channels: ChannelPlan,
    #[serde(default)]
    pub solver: SolverPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ee: Option<EePlan>,
}

impl ExperimentPlan {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let plan: Self = toml::from_str(text).map_err(|e| ModelError::Parse { line: 0, msg: e.to_string() })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plans serialize")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Problem(format!("plan {}: {m}", self.name)));
        if self.grid.is_empty() {
            return bad("empty grid");
        }
        if self.channels.count == 0 {
            return bad("no channel realizations");
        }
        if self.channels.variances.len() != self.channels.users || self.channels.variances.iter().any(|v| !(*v > 0.0)) {
            return bad("need one positive variance per user");
        }
        match self.kind {
            PlanKind::SumRate if self.qos.len() != self.grid.len() => return bad("qos ladder must pair with the grid"),
            PlanKind::RateRegion | PlanKind::Ee if self.qos.len() != 1 => return bad("qos must hold one value"),
            PlanKind::RateRegion if self.snr_db.is_none() => return bad("rate region needs snr_db"),
            _ => {}
        }
        for s in &self.schemes {
            SchemeConfig::parse(s)?;
        }
        Ok(())
    }

    /// Problem for one realization and grid point, before the scheme is applied.
    pub fn instance(&self, seed: u64, grid_index: usize) -> Result<ProblemSpec, ModelError> {
        let ch = &self.channels;
        let h = gen_channels(seed, ch.users, ch.antennas, &ch.variances);
        let x = self.grid[grid_index];
        let k = ch.users;
        match self.kind {
            PlanKind::SumRate => ProblemSpec::wsr(h, vec![1.0; k], vec![self.qos[grid_index]; k], db_to_linear(x)),
            PlanKind::RateRegion => {
                let mut w = vec![1.0; k];
                w[k - 1] = 10f64.powf(x);
                ProblemSpec::wsr(h, w, vec![self.qos[0]; k], db_to_linear(self.snr_db.unwrap_or(20.0)))
            }
            PlanKind::Ee => {
                let ee = self.ee.clone().unwrap_or_default();
                let h = h.scaled(1.0 / ee.noise_var.sqrt());
                ProblemSpec::ee(h, vec![self.qos[0]; k], dbm_to_watt(x), ee.mu, ee.static_power(ch.antennas))
            }
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            eta: self.solver.eta,
            epsilon: self.solver.epsilon,
            max_wall_time: Duration::from_secs_f64(self.solver.max_time_s),
            warm_start: if self.solver.warm_start { WarmStart::Sca } else { WarmStart::None },
            record_trace: false,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SolverKind {
    Bb,
    Sca,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Bb => "BB",
            SolverKind::Sca => "SCA",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub scheme: String,
    pub grid_x: f64,
    pub solver: SolverKind,
    pub objective: Option<f64>,
    pub rates: Vec<f64>,
    pub common: Vec<f64>,
    pub status: String,
    pub wall_ms: f64,
}

impl ResultRow {
    pub fn certified(&self) -> bool {
        match self.solver {
            SolverKind::Bb => self.status == SolveStatus::OptimalCertified.name(),
            SolverKind::Sca => self.objective.is_some(),
        }
    }
}

/// Both solvers on one problem instance.
#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub problem: ProblemSpec,
    pub bb: Option<SolverOutcome>,
    pub sca: Option<ScaOutcome>,
    pub bb_wall: Duration,
    pub sca_wall: Duration,
}

/// Runs SCA, then BB seeded with the SCA point when warm starts are enabled.
pub fn run_instance(problem: &ProblemSpec, cfg: &SolverConfig, run_bb: bool, run_sca: bool) -> Result<InstanceResult, ModelError> {
    let t0 = Instant::now();
    let sca = (run_sca || (run_bb && cfg.warm_start == WarmStart::Sca))
        .then(|| baseline::sca_solve(problem, &ScaConfig::default()));
    let sca_wall = t0.elapsed();
    let mut bb_cfg = cfg.clone();
    if let (WarmStart::Sca, Some(s)) = (&cfg.warm_start, &sca) {
        bb_cfg.warm_start = if s.report.feasible { WarmStart::Precoders(s.report.precoders.clone()) } else { WarmStart::None };
    }
    let t1 = Instant::now();
    let bb = if run_bb { Some(sitbb::solve(problem, &bb_cfg)?) } else { None };
    let bb_wall = t1.elapsed();
    Ok(InstanceResult { problem: problem.clone(), bb, sca: sca.filter(|_| run_sca), bb_wall, sca_wall })
}

fn report_row(seed: u64, scheme: &str, x: f64, solver: SolverKind, report: Option<&SolutionReport>, status: &str, wall: Duration, k: usize) -> ResultRow {
    ResultRow {
        seed,
        scheme: scheme.to_string(),
        grid_x: x,
        solver,
        objective: report.map(|r| r.objective),
        rates: report.map(|r| r.rates.clone()).unwrap_or_else(|| vec![f64::NAN; k]),
        common: report.map(|r| r.common_rates.clone()).unwrap_or_else(|| vec![f64::NAN; k]),
        status: status.to_string(),
        wall_ms: wall.as_secs_f64() * 1e3,
    }
}

pub fn rows_for(seed: u64, scheme: &str, x: f64, res: &InstanceResult) -> Vec<ResultRow> {
    let k = res.problem.users();
    let mut rows = Vec::new();
    if let Some(bb) = &res.bb {
        rows.push(report_row(seed, scheme, x, SolverKind::Bb, bb.incumbent.as_ref(), bb.status.name(), res.bb_wall, k));
    }
    if let Some(s) = &res.sca {
        let rep = s.report.feasible.then_some(&s.report);
        rows.push(report_row(seed, scheme, x, SolverKind::Sca, rep, s.status.name(), res.sca_wall, k));
    }
    rows
}

/// Every (seed, grid point, scheme) task of a plan, in output order.
pub fn plan_tasks(plan: &ExperimentPlan) -> Vec<(u64, usize, String)> {
    let mut tasks = Vec::new();
    for seed in plan.channels.seeds() {
        for g in 0..plan.grid.len() {
            for s in &plan.schemes {
                tasks.push((seed, g, s.clone()));
            }
        }
    }
    tasks
}

/// Executes a plan on `jobs` workers; rows come back in plan order.
pub fn run_plan(plan: &ExperimentPlan, jobs: usize) -> Result<Vec<ResultRow>, ModelError> {
    plan.validate()?;
    let cfg = plan.solver_config();
    let tasks = plan_tasks(plan);
    let run = |(seed, g, scheme): &(u64, usize, String)| -> Result<Vec<ResultRow>, ModelError> {
        let problem = plan.instance(*seed, *g)?.with_scheme(SchemeConfig::parse(scheme)?)?;
        let res = run_instance(&problem, &cfg, plan.solver.run_bb, plan.solver.run_sca)?;
        log::info!("{} seed={seed} x={} scheme={scheme} done", plan.name, plan.grid[*g]);
        Ok(rows_for(*seed, scheme, plan.grid[*g], &res))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ModelError::Problem(e.to_string()))?;
    let chunks: Vec<Result<Vec<ResultRow>, ModelError>> = pool.install(|| tasks.par_iter().map(run).collect());
    let mut rows = Vec::new();
    for c in chunks {
        rows.extend(c?);
    }
    Ok(rows)
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes rows as CSV. Timing columns are left as `-` unless `timing` is set,
/// which keeps repeated runs byte-identical.
pub fn write_csv<W: Write>(out: W, rows: &[ResultRow], users: usize, timing: bool) -> Result<(), ModelError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["seed".to_string(), "scheme".into(), "grid_x".into(), "solver".into(), "objective".into()];
    header.extend((1..=users).map(|k| format!("R{k}")));
    header.extend((1..=users).map(|k| format!("C{k}")));
    header.push("status".into());
    header.push("wall_ms".into());
    let csv_err = |e: csv::Error| ModelError::Problem(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.seed.to_string(),
            r.scheme.clone(),
            fmt_num(r.grid_x),
            r.solver.name().to_string(),
            r.objective.map(fmt_num).unwrap_or_default(),
        ];
        rec.extend(r.rates.iter().map(|v| fmt_num(*v)));
        rec.extend(r.common.iter().map(|v| fmt_num(*v)));
        rec.push(r.status.clone());
        rec.push(if timing { format!("{:.1}", r.wall_ms) } else { "-".into() });
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanRow {
    pub scheme: String,
    pub solver: SolverKind,
    pub grid_x: f64,
    pub mean: Option<f64>,
    pub count: usize,
    pub skipped: usize,
}

/// Means over seeds per (scheme, solver, grid point), excluding rows without
/// a certified (BB) or feasible (SCA) result and counting them separately.
pub fn aggregate(rows: &[ResultRow]) -> Vec<MeanRow> {
    let mut groups: BTreeMap<(String, SolverKind, u64), (f64, Vec<f64>, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.scheme.clone(), r.solver, r.grid_x.to_bits());
        let e = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (r.grid_x, Vec::new(), 0)
        });
        match (r.certified(), r.objective) {
            (true, Some(v)) => e.1.push(v),
            _ => e.2 += 1,
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (x, vals, skipped) = &groups[&key];
            MeanRow {
                scheme: key.0.clone(),
                solver: key.1,
                grid_x: *x,
                mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                count: vals.len(),
                skipped: *skipped,
            }
        })
        .collect()
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Upper-right boundary of the convex hull of `points` together with their
/// axis projections, ordered by increasing first coordinate. Collinear and
/// duplicate vertices are dropped.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    if points.is_empty() {
        return Vec::new();
    }
    let x_max = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let y_max = points.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0 > 0.0).collect();
    pts.push((0.0, y_max));
    pts.push((x_max, 0.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|a, b| a.0 == b.0);

    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) >= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    if let Some(&last) = hull.last() {
        if last.1 > 0.0 {
            hull.push((last.0, 0.0));
        }
    }
    hull
}

/// Distance from the origin to the hull boundary along direction `theta`
/// (radians, within the first quadrant).
pub fn hull_radius(hull: &[(f64, f64)], theta: f64) -> f64 {
    let d = (theta.cos(), theta.sin());
    let mut best: f64 = 0.0;
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let e = (b.0 - a.0, b.1 - a.1);
        let den = d.0 * e.1 - d.1 * e.0;
        if den.abs() < 1e-15 {
            continue;
        }
        let r = (a.0 * e.1 - a.1 * e.0) / den;
        let s = (a.0 * d.1 - a.1 * d.0) / den;
        if r >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) {
            best = best.max(r);
        }
    }
    if hull.len() == 1 {
        best = 0.0;
    }
    best
}

/// Rate-region boundary points and hulls per (scheme, solver).
#[derive(Debug, Clone, Default)]
pub struct RegionResult {
    pub points: BTreeMap<(String, SolverKind), Vec<(f64, f64)>>,
    pub hulls: BTreeMap<(String, SolverKind), Vec<(f64, f64)>>,
}

pub fn rate_region(rows: &[ResultRow]) -> RegionResult {
    let mut out = RegionResult::default();
    for r in rows.iter().filter(|r| r.certified() && r.rates.len() == 2) {
        out.points
            .entry((r.scheme.clone(), r.solver))
            .or_default()
            .push((r.rates[0].max(0.0), r.rates[1].max(0.0)));
    }
    for (k, pts) in &out.points {
        out.hulls.insert(k.clone(), convex_hull(pts));
    }
    out
}

pub fn sweep_sum_rate(plan: &ExperimentPlan, jobs: usize) -> Result<Vec<ResultRow>, ModelError> {
    if plan.kind != PlanKind::SumRate {
        return Err(ModelError::Problem("not a sum-rate plan".into()));
    }
    run_plan(plan, jobs)
}

pub fn sweep_ee(plan: &ExperimentPlan, jobs: usize) -> Result<Vec<ResultRow>, ModelError> {
    if plan.kind != PlanKind::Ee {
        return Err(ModelError::Problem("not an EE plan".into()));
    }
    run_plan(plan, jobs)
}

pub fn rate_region_plan(plan: &ExperimentPlan, jobs: usize) -> Result<(Vec<ResultRow>, RegionResult), ModelError> {
    if plan.kind != PlanKind::RateRegion || plan.channels.users != 2 {
        return Err(ModelError::Problem("rate regions need a two-user rate-region plan".into()));
    }
    let rows = run_plan(plan, jobs)?;
    let region = rate_region(&rows);
    Ok((rows, region))
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal SVG line plot: axes, one polyline per series, legend.
pub fn svg_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for p in &all {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.1);
        y1 = y1.max(p.1);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    s += &format!("<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>\n", w / 2.0);
    s += &format!("<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", h - m, w - m, h - m);
    s += &format!("<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n", h - m);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        s += &format!("<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n", sx(fx), h - m + 18.0, fx);
        s += &format!("<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n", m - 6.0, sy(fy) + 4.0, fy);
    }
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>\n", w / 2.0, h - 12.0);
    s += &format!("<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{ylabel}</text>\n", h / 2.0, h / 2.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            .collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", path.join(" "));
        let ly = m + 16.0 * i as f64;
        s += &format!("<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n", w - m - 110.0, w - m - 90.0);
        s += &format!("<text x=\"{}\" y=\"{}\">{name}</text>\n", w - m - 85.0, ly + 4.0);
    }
    s += "</svg>\n";
    s
}

/// Series of means per (scheme, solver) for a sweep plot.
pub fn mean_series(means: &[MeanRow]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for m in means {
        if let Some(v) = m.mean {
            map.entry(format!("{} {}", m.scheme, m.solver.name())).or_default().push((m.grid_x, v));
        }
    }
    map.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channels_are_deterministic() {
        let a = gen_channels(7, 2, 3, &[1.0, 0.09]);
        let b = gen_channels(7, 2, 3, &[1.0, 0.09]);
        assert_eq!(a, b);
        assert_ne!(a, gen_channels(8, 2, 3, &[1.0, 0.09]));
    }

    #[test]
    fn empirical_variance_matches() {
        let n = 10_000;
        let vars = [1.0, 0.09];
        let ch = gen_channels(99, 2, n, &vars);
        for (k, v) in vars.iter().enumerate() {
            let emp = ch.norm_sqr(k) / n as f64;
            assert!((emp - v).abs() < 0.05 * v, "user {k}: {emp} vs {v}");
        }
    }

    #[test]
    fn weight_exponents() {
        let x = region_weight_exponents();
        assert_eq!(x.len(), 43);
        assert_eq!(x[0], -3.0);
        assert!((x[1] + 1.0).abs() < 1e-12 && (x[2] + 0.95).abs() < 1e-12);
        assert!((x[41] - 1.0).abs() < 1e-12);
        assert_eq!(x[42], 3.0);
    }

    #[test]
    fn unit_conversions() {
        assert!((dbm_to_watt(27.0) - 0.501187).abs() < 1e-6);
        assert!((EePlan::default().static_power(2) - (2.0 * 0.501187 + 0.001)).abs() < 1e-6);
        assert!((db_to_linear(20.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn hull_examples() {
        let hull = convex_hull(&[(0.0, 2.0), (2.0, 0.0), (1.0, 1.0)]);
        assert_eq!(hull, vec![(0.0, 2.0), (2.0, 0.0)]);
        let hull = convex_hull(&[(1.0, 3.0)]);
        assert_eq!(hull, vec![(0.0, 3.0), (1.0, 3.0), (1.0, 0.0)]);
        let hull = convex_hull(&[(1.0, 1.0), (2.0, 0.5), (1.0, 1.0), (0.5, 1.2)]);
        for w in hull.windows(2) {
            assert!(w[0].0 <= w[1].0);
        }
    }

    #[test]
    fn hull_contains_its_points() {
        let pts: Vec<(f64, f64)> = (0..30).map(|i| {
            let t = i as f64 / 29.0 * std::f64::consts::FRAC_PI_2;
            (3.0 * t.cos() * (1.0 + 0.1 * (5.0 * t).sin()), 2.0 * t.sin())
        }).collect();
        let hull = convex_hull(&pts);
        for p in &pts {
            let r = (p.0 * p.0 + p.1 * p.1).sqrt();
            if r > 0.0 {
                assert!(hull_radius(&hull, p.1.atan2(p.0)) >= r - 1e-9);
            }
        }
    }

    #[test]
    fn aggregate_skips_uncertified() {
        let row = |seed, obj: Option<f64>, status: &str| ResultRow {
            seed,
            scheme: "rsma".into(),
            grid_x: 5.0,
            solver: SolverKind::Bb,
            objective: obj,
            rates: vec![0.0; 2],
            common: vec![0.0; 2],
            status: status.into(),
            wall_ms: 0.0,
        };
        let rows = vec![row(1, Some(2.0), "optimal"), row(2, Some(4.0), "optimal"), row(3, Some(9.0), "budget")];
        let m = aggregate(&rows);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].mean, Some(3.0));
        assert_eq!((m[0].count, m[0].skipped), (2, 1));
    }

    #[test]
    fn plan_text_round_trip() {
        let plan = ExperimentPlan {
            name: "t".into(),
            kind: PlanKind::SumRate,
            grid: vec![5.0, 10.0],
            qos: vec![0.1, 0.2],
            schemes: vec!["rsma".into(), "mulp".into()],
            snr_db: None,
            channels: ChannelPlan { users: 2, antennas: 2, variances: vec![1.0, 1.0], first_seed: 0, count: 2 },
            solver: SolverPlan::default(),
            ee: None,
        };
        let text = plan.to_text();
        let back = ExperimentPlan::parse(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn plan_validation() {
        let text = "name='x'\nkind='sum-rate'\ngrid=[5.0]\nqos=[0.1,0.2]\nschemes=['rsma']\n[channels]\nusers=2\nantennas=2\nvariances=[1.0,1.0]\nfirst_seed=0\ncount=1\n";
        assert!(ExperimentPlan::parse(text).is_err());
    }

    #[test]
    fn csv_is_reproducible() {
        let plan = ExperimentPlan {
            name: "mini".into(),
            kind: PlanKind::SumRate,
            grid: vec![10.0],
            qos: vec![0.1],
            schemes: vec!["mulp".into()],
            snr_db: None,
            channels: ChannelPlan { users: 2, antennas: 2, variances: vec![1.0, 1.0], first_seed: 3, count: 2 },
            solver: SolverPlan { eta: 0.05, ..SolverPlan::default() },
            ee: None,
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&mut a, &run_plan(&plan, 1).unwrap(), 2, false).unwrap();
        write_csv(&mut b, &run_plan(&plan, 1).unwrap(), 2, false).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("seed,scheme,grid_x,solver,objective,R1,R2,C1,C2,status,wall_ms\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2);
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = svg_plot("t", "x", "y", &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0)]), ("b".into(), vec![(0.0, 0.5)])]);
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    }
}
