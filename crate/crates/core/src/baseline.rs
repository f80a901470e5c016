//! Local solver: successive convex approximation over SOCP subproblems.
//!
//! Each SINR constraint `|a|^2 / (I + 1) >= g` is rewritten as
//! `I + 1 <= |a|^2 / g`. The right side is jointly convex in `(a, g)`, so its
//! tangent at the current iterate is a global under-estimator; replacing it by
//! the tangent gives a convex restriction that contains the current point.
//! Every subproblem solution is therefore feasible and no worse than the last
//! iterate, which gives monotone ascent. Energy efficiency uses a Dinkelbach
//! update: with `lambda` set to the current ratio, maximizing
//! `N - lambda D` yields a point whose ratio is at least `lambda`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conic::{self, CVec, ConeKind, ConicProgram, ConicStatus, LinExpr, Sense};
use crate::model::{compute_sinrs, inner, PrecoderSet, ProblemSpec, SchemeConfig, SolutionReport, StreamLayout, C64};
use crate::sitbb::recover_report;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitStrategy {
    /// Common stream along the dominant left singular vector of `[h_1 .. h_K]`,
    /// private streams matched to their channels.
    SvdMrt,
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaConfig {
    pub max_iters: usize,
    pub conv_tol: f64,
    pub init: InitStrategy,
    /// Share of the budget given to the common stream at initialization.
    pub common_fraction: f64,
    /// Step length toward each subproblem solution; a damped step that loses
    /// objective falls back to the full step.
    pub damping: f64,
    /// Extra random restarts, keeping the best result.
    pub restarts: usize,
    pub feas_tol: f64,
    pub solver_tol: f64,
}

impl Default for ScaConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            conv_tol: 1e-6,
            init: InitStrategy::SvdMrt,
            common_fraction: 0.5,
            damping: 1.0,
            restarts: 0,
            feas_tol: crate::model::DEFAULT_FEAS_TOL,
            solver_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaStatus {
    Converged,
    MaxIter,
    /// No feasible iterate was found from this start.
    Infeasible,
}

impl ScaStatus {
    pub fn name(&self) -> &'static str {
        match self {
            ScaStatus::Converged => "SCA-converged",
            ScaStatus::MaxIter => "SCA-maxiter",
            ScaStatus::Infeasible => "SCA-infeasible",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaOutcome {
    pub report: SolutionReport,
    pub status: ScaStatus,
    pub iterations: usize,
    /// Objective of every accepted feasible iterate.
    pub objective_trace: Vec<f64>,
}

fn scaled_to(v: Vec<C64>, power: f64) -> Vec<C64> {
    let n: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    if n == 0.0 || power <= 0.0 {
        return vec![C64::new(0.0, 0.0); v.len()];
    }
    let c = (power / n).sqrt();
    v.into_iter().map(|z| z * c).collect()
}

fn dominant_left_singular(problem: &ProblemSpec) -> Vec<C64> {
    let (k, m) = (problem.users(), problem.antennas());
    let h = DMatrix::from_fn(m, k, |i, j| problem.channels.h(j)[i]);
    let svd = h.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let (best, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    u.column(best).iter().copied().collect()
}

/// Initial precoders spending the full budget.
pub fn init_precoders(problem: &ProblemSpec, strategy: InitStrategy, common_fraction: f64) -> PrecoderSet {
    let layout = problem.layout().expect("scheme must be resolved");
    let (k_users, m) = (problem.users(), problem.antennas());
    let active = layout.private.iter().filter(|a| **a).count();
    let frac = if layout.has_common {
        if active == 0 {
            1.0
        } else {
            common_fraction.clamp(0.0, 1.0)
        }
    } else {
        0.0
    };
    let mut rng = match strategy {
        InitStrategy::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        InitStrategy::SvdMrt => None,
    };
    let draw = |rng: &mut ChaCha8Rng| -> Vec<C64> {
        (0..m)
            .map(|_| C64::new(StandardNormal.sample(rng), StandardNormal.sample(rng)))
            .collect()
    };
    let mut pre = PrecoderSet::zeros(k_users, m);
    if layout.has_common {
        let dir = match rng.as_mut() {
            Some(r) => draw(r),
            None => dominant_left_singular(problem),
        };
        pre.common = scaled_to(dir, frac * problem.power);
    }
    let each = if active > 0 { (1.0 - frac) * problem.power / active as f64 } else { 0.0 };
    for k in 0..k_users {
        if layout.private[k] {
            let dir = match rng.as_mut() {
                Some(r) => draw(r),
                None => problem.channels.h(k).to_vec(),
            };
            pre.private[k] = scaled_to(dir, each);
        }
    }
    pre
}

enum Phase {
    /// Minimize the largest QoS shortfall.
    Restore,
    /// Maximize `N - lambda D`.
    Ascend(f64),
}

struct StepVars {
    common: Option<CVec>,
    private: Vec<Option<CVec>>,
}

const OFF: f64 = 1e-12;

/// Tangent of `|a|^2 / g` at `(a0, g0)`: `2 Re(conj(a0) a) / g0 - |a0|^2 g / g0^2`.
fn tangent(a_re: LinExpr, a_im: LinExpr, a0: C64, g: &LinExpr, g0: f64) -> LinExpr {
    a_re.scale(2.0 * a0.re / g0)
        .add(&a_im.scale(2.0 * a0.im / g0))
        .add(&g.clone().scale(-a0.norm_sqr() / (g0 * g0)))
}

fn build_step(problem: &ProblemSpec, layout: &StreamLayout, pre: &PrecoderSet, phase: &Phase) -> Option<(ConicProgram, StepVars)> {
    let (k_users, m) = (problem.users(), problem.antennas());
    let sinrs = compute_sinrs(&problem.channels, pre).ok()?;
    let ln2 = std::f64::consts::LN_2;
    let mut prog = ConicProgram::new();

    let common = layout.has_common.then(|| prog.add_complex("p_c", m));
    let private: Vec<Option<CVec>> = (0..k_users)
        .map(|k| layout.private[k].then(|| prog.add_complex(&format!("p_{}", k + 1), m)))
        .collect();

    let interference = |k: usize, skip: Option<usize>| -> Vec<LinExpr> {
        let mut rows = Vec::new();
        for (j, pj) in private.iter().enumerate() {
            if let (Some(pj), true) = (pj, Some(j) != skip) {
                rows.push(pj.inner_re(problem.channels.h(k)));
                rows.push(pj.inner_im(problem.channels.h(k)));
            }
        }
        rows.push(LinExpr::constant(1.0));
        rows
    };

    let mut numer = LinExpr::zero();
    let mut rates = vec![LinExpr::zero(); k_users];
    for k in 0..k_users {
        let Some(pk) = private[k] else { continue };
        let h = problem.channels.h(k);
        let a0 = inner(h, &pre.private[k]);
        let g0 = sinrs.private[k];
        if g0 < OFF || a0.norm_sqr() < OFF {
            continue;
        }
        let g = LinExpr::var(prog.add_var(&format!("gamma_{}", k + 1)));
        let r = LinExpr::var(prog.add_var(&format!("r_{}", k + 1)));
        prog.nonneg(g.clone(), "sinr-nonneg");
        let lin = tangent(pk.inner_re(h), pk.inner_im(h), a0, &g, g0);
        let mut rows = vec![lin.scale(0.5), LinExpr::constant(1.0)];
        rows.extend(interference(k, Some(k)));
        prog.push(ConeKind::RotatedSoc, rows, "private-sinr");
        prog.push(ConeKind::Exp, vec![r.clone().scale(ln2), LinExpr::constant(1.0), g.plus_const(1.0)], "private-rate");
        rates[k] = r;
    }

    let mut c_vars = vec![LinExpr::zero(); k_users];
    if let Some(pc) = common {
        let s0 = sinrs.common.iter().cloned().fold(f64::INFINITY, f64::min);
        let a0: Vec<C64> = (0..k_users).map(|k| inner(problem.channels.h(k), &pre.common)).collect();
        if s0 >= OFF && a0.iter().all(|a| a.norm_sqr() >= OFF) {
            let s = LinExpr::var(prog.add_var("s"));
            let rc = LinExpr::var(prog.add_var("R_c"));
            prog.nonneg(s.clone(), "sinr-nonneg");
            for k in 0..k_users {
                let h = problem.channels.h(k);
                let lin = tangent(pc.inner_re(h), pc.inner_im(h), a0[k], &s, s0);
                let mut rows = vec![lin.scale(0.5), LinExpr::constant(1.0)];
                rows.extend(interference(k, None));
                prog.push(ConeKind::RotatedSoc, rows, "common-sinr");
            }
            prog.push(ConeKind::Exp, vec![rc.clone().scale(ln2), LinExpr::constant(1.0), s.plus_const(1.0)], "common-rate");
            let mut total = LinExpr::zero();
            for k in 0..k_users {
                if layout.common_share[k] {
                    let c = LinExpr::var(prog.add_var(&format!("C_{}", k + 1)));
                    prog.nonneg(c.clone(), "common-rate-nonneg");
                    total = total.add(&c);
                    c_vars[k] = c;
                }
            }
            prog.geq(rc, total, "common-rate-budget");
        }
    }

    let slack = matches!(phase, Phase::Restore).then(|| prog.add_var("z"));
    for k in 0..k_users {
        let mut got = c_vars[k].clone().add(&rates[k]);
        if let Some(z) = slack {
            got = got.term(z, 1.0);
        }
        prog.geq(got, LinExpr::constant(problem.qos[k]), "qos");
        numer = numer.add(&c_vars[k].clone().add(&rates[k]).scale(problem.weights[k]));
    }

    let mut entries = Vec::new();
    for v in common.iter().chain(private.iter().flatten()) {
        entries.extend(v.entries());
    }
    prog.soc(LinExpr::constant(problem.power.sqrt()), entries.clone(), "power");

    match (phase, slack) {
        (Phase::Restore, Some(z)) => {
            prog.nonneg(LinExpr::var(z), "slack-nonneg");
            prog.objective = LinExpr::var(z);
            prog.sense = Sense::Minimize;
        }
        (Phase::Ascend(lambda), _) => {
            let mut obj = numer.plus_const(-lambda * problem.static_power);
            if problem.mu > 0.0 {
                let q = prog.add_var("q");
                let mut rows = vec![LinExpr::var(q).scale(0.5), LinExpr::constant(1.0)];
                rows.extend(entries);
                prog.push(ConeKind::RotatedSoc, rows, "power-epigraph");
                obj = obj.term(q, -lambda * problem.mu);
            }
            prog.objective = obj;
            prog.sense = Sense::Maximize;
        }
        _ => unreachable!(),
    }
    Some((prog, StepVars { common, private }))
}

fn precoders_from(vars: &StepVars, x: &[f64], k_users: usize, m: usize) -> PrecoderSet {
    let mut pre = PrecoderSet::zeros(k_users, m);
    if let Some(pc) = vars.common {
        pre.common = pc.value(x);
    }
    for (k, v) in vars.private.iter().enumerate() {
        if let Some(v) = v {
            pre.private[k] = v.value(x);
        }
    }
    pre
}

fn blend(a: &PrecoderSet, b: &PrecoderSet, t: f64) -> PrecoderSet {
    let mix = |u: &[C64], v: &[C64]| u.iter().zip(v).map(|(x, y)| x * (1.0 - t) + y * t).collect();
    PrecoderSet {
        common: mix(&a.common, &b.common),
        private: a.private.iter().zip(&b.private).map(|(u, v)| mix(u, v)).collect(),
    }
}

fn report_for(problem: &ProblemSpec, pre: PrecoderSet, cfg: &ScaConfig) -> SolutionReport {
    match recover_report(problem, pre.clone(), 0.0, cfg.feas_tol, cfg.solver_tol) {
        Some(r) => r,
        None => SolutionReport::evaluate(problem, pre, vec![0.0; problem.users()], cfg.feas_tol)
            .expect("dimensions are consistent"),
    }
}

fn run_from(problem: &ProblemSpec, init: PrecoderSet, cfg: &ScaConfig) -> ScaOutcome {
    let layout = problem.layout().expect("scheme must be resolved");
    let (k_users, m) = (problem.users(), problem.antennas());
    let mut report = report_for(problem, init, cfg);
    let mut iterations = 0;

    while !report.feasible && iterations < cfg.max_iters {
        iterations += 1;
        let Some((prog, vars)) = build_step(problem, &layout, &report.precoders, &Phase::Restore) else { break };
        let sol = conic::solve(&prog, cfg.solver_tol);
        if sol.status != ConicStatus::Optimal {
            break;
        }
        let next = report_for(problem, precoders_from(&vars, &sol.x, k_users, m), cfg);
        let stalled = (report.precoders.total_power() - next.precoders.total_power()).abs() < 1e-14
            && next.precoders == report.precoders;
        report = next;
        if stalled {
            break;
        }
    }
    if !report.feasible {
        return ScaOutcome { report, status: ScaStatus::Infeasible, iterations, objective_trace: Vec::new() };
    }

    let mut trace = vec![report.objective];
    let mut status = ScaStatus::MaxIter;
    while iterations < cfg.max_iters {
        iterations += 1;
        let lambda = report.objective;
        let Some((prog, vars)) = build_step(problem, &layout, &report.precoders, &Phase::Ascend(lambda)) else {
            status = ScaStatus::Converged;
            break;
        };
        let sol = conic::solve(&prog, cfg.solver_tol);
        if sol.status != ConicStatus::Optimal {
            status = ScaStatus::Converged;
            break;
        }
        let full = precoders_from(&vars, &sol.x, k_users, m);
        let mut next = report_for(problem, full.clone(), cfg);
        if cfg.damping < 1.0 {
            let damped = report_for(problem, blend(&report.precoders, &full, cfg.damping), cfg);
            if damped.feasible && damped.objective >= next.objective.min(report.objective) {
                next = damped;
            }
        }
        if !next.feasible || next.objective < report.objective {
            status = ScaStatus::Converged;
            break;
        }
        let change = (next.objective - report.objective) / report.objective.abs().max(1e-12);
        report = next;
        trace.push(report.objective);
        if change < cfg.conv_tol {
            status = ScaStatus::Converged;
            break;
        }
    }
    ScaOutcome { report, status, iterations, objective_trace: trace }
}

fn better(a: &ScaOutcome, b: &ScaOutcome) -> bool {
    match (a.report.feasible, b.report.feasible) {
        (true, false) => true,
        (true, true) => a.report.objective > b.report.objective,
        _ => false,
    }
}

/// Locally optimal precoders from the configured start (and restarts).
///
/// Works on the unit-power form of the problem and maps the result back.
/// An unresolved NOMA order runs both orders and keeps the better result.
pub fn sca_solve(problem: &ProblemSpec, cfg: &ScaConfig) -> ScaOutcome {
    if let SchemeConfig::Noma2(None) = problem.scheme {
        let mut best: Option<ScaOutcome> = None;
        for order in problem.noma_orders() {
            let sub = problem.clone().with_scheme(SchemeConfig::Noma2(Some(order))).expect("two users");
            let cand = sca_solve(&sub, cfg);
            if best.as_ref().map_or(true, |b| better(&cand, b)) {
                best = Some(cand);
            }
        }
        return best.expect("two orders");
    }
    let (norm, scale) = problem.normalized();
    let mut best = run_from(&norm, init_precoders(&norm, cfg.init, cfg.common_fraction), cfg);
    for r in 0..cfg.restarts {
        let seed = match cfg.init {
            InitStrategy::Random(s) => s.wrapping_add(r as u64 + 1),
            InitStrategy::SvdMrt => r as u64,
        };
        let cand = run_from(&norm, init_precoders(&norm, InitStrategy::Random(seed), cfg.common_fraction), cfg);
        if better(&cand, &best) {
            best = cand;
        }
    }
    best.report = best
        .report
        .rescaled(problem, scale, cfg.feas_tol)
        .expect("dimensions are consistent");
    best
}
