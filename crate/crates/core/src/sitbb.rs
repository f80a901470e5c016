//! Successive incumbent transcending branch-and-bound over the nonconvex
//! variables `(gamma_p, s, alpha)`.
//!
//! The engine answers "is there a feasible point with objective at least
//! delta?" on boxes of the SINR/argument space, raising `delta` every time a
//! primal feasible point is recovered. Boxes whose bound exceeds `-epsilon`
//! are discarded; when none remain the incumbent is certified.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::baseline::{self, ScaConfig};
use crate::conic::{self, ConicSolution, ConicStatus, SitVars};
use crate::model::{
    compute_sinrs, inner, ModelError, PrecoderSet, ProblemSpec, SchemeConfig, SolutionReport, StreamLayout,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Rectangle over `gamma_p` (one entry per user), the common SINR `s` and the
/// arguments of `h_k^H p_c` for users `2..K`. MU-LP boxes carry neither `s`
/// nor arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchBox {
    pub gamma: Vec<Interval>,
    pub s: Option<Interval>,
    pub alpha: Vec<Interval>,
}

impl SearchBox {
    /// Dimensions in branching order: gamma_1..gamma_K, s, alpha_2..alpha_K.
    pub fn dims(&self) -> Vec<Interval> {
        let mut d = self.gamma.clone();
        d.extend(self.s);
        d.extend(self.alpha.iter().copied());
        d
    }

    pub fn dim_count(&self) -> usize {
        self.gamma.len() + self.s.iter().count() + self.alpha.len()
    }

    pub fn set_dim(&mut self, j: usize, iv: Interval) {
        let k = self.gamma.len();
        if j < k {
            self.gamma[j] = iv;
        } else if self.s.is_some() && j == k {
            self.s = Some(iv);
        } else {
            let off = k + self.s.iter().count();
            self.alpha[j - off] = iv;
        }
    }

    pub fn validate(&self, users: usize, has_common: bool) -> Result<(), String> {
        if self.gamma.len() != users {
            return Err(format!("box has {} gamma entries for {users} users", self.gamma.len()));
        }
        if has_common != self.s.is_some() {
            return Err("box common-SINR dimension does not match the scheme".into());
        }
        let want_alpha = if has_common { users - 1 } else { 0 };
        if self.alpha.len() != want_alpha {
            return Err(format!("box needs {want_alpha} argument entries"));
        }
        for iv in self.gamma.iter().chain(self.s.iter()) {
            if !(iv.lo >= 0.0 && iv.lo <= iv.hi && iv.hi.is_finite()) {
                return Err(format!("malformed SINR interval {iv:?}"));
            }
        }
        for iv in &self.alpha {
            if !(iv.lo >= 0.0 && iv.lo <= iv.hi && iv.hi <= 2.0 * PI + 1e-12) {
                return Err(format!("malformed argument interval {iv:?}"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &DualPoint) -> bool {
        self.gamma.iter().zip(&x.gamma).all(|(iv, v)| iv.contains(*v))
            && match (self.s, x.s) {
                (Some(iv), Some(v)) => iv.contains(v),
                (None, _) => true,
                (Some(_), None) => false,
            }
            && self.alpha.iter().zip(&x.alpha).all(|(iv, v)| iv.contains(*v))
    }

    pub fn is_subset_of(&self, other: &SearchBox) -> bool {
        self.dims()
            .iter()
            .zip(other.dims())
            .all(|(a, b)| a.lo >= b.lo && a.hi <= b.hi)
    }
}

/// A point of the nonconvex space.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub gamma: Vec<f64>,
    pub s: Option<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WarmStart {
    None,
    Sca,
    Precoders(PrecoderSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub eta: f64,
    pub epsilon: f64,
    pub feas_tol: f64,
    pub solver_tol: f64,
    pub max_iter: u64,
    pub max_wall_time: Duration,
    pub warm_start: WarmStart,
    pub record_trace: bool,
    /// Bound the two children of an expansion concurrently.
    pub parallel_children: bool,
    pub width_scale: WidthScale,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: 0.02,
            epsilon: 1e-7,
            feas_tol: crate::model::DEFAULT_FEAS_TOL,
            solver_tol: 1e-8,
            max_iter: 1_000_000,
            max_wall_time: Duration::from_secs(600),
            warm_start: WarmStart::Sca,
            record_trace: true,
            parallel_children: false,
            width_scale: WidthScale::Rate,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.eta > 0.0) || !(self.epsilon > 0.0) {
            return Err(ModelError::Problem("eta and epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    OptimalCertified,
    EpsilonEssentialInfeasible,
    BudgetExhausted,
}

impl SolveStatus {
    pub fn name(&self) -> &'static str {
        match self {
            SolveStatus::OptimalCertified => "optimal",
            SolveStatus::EpsilonEssentialInfeasible => "infeasible",
            SolveStatus::BudgetExhausted => "budget",
        }
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Expand,
    Reduce,
    Bound,
    Incumbent,
    Prune,
    Fail,
}

impl TraceKind {
    fn name(&self) -> &'static str {
        match self {
            TraceKind::Expand => "expand",
            TraceKind::Reduce => "reduce",
            TraceKind::Bound => "bound",
            TraceKind::Incumbent => "incumbent",
            TraceKind::Prune => "prune",
            TraceKind::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub run: usize,
    pub iter: u64,
    pub node: u64,
    pub parent: Option<u64>,
    pub kind: TraceKind,
    pub beta: f64,
    pub delta: f64,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run={} iter={} node={} event={}", self.run, self.iter, self.node, self.kind.name())?;
        if let Some(p) = self.parent {
            write!(f, " parent={p}")?;
        }
        write!(f, " beta={:e} delta={:e}", self.beta, self.delta)
    }
}

impl FromStr for TraceEvent {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut ev = TraceEvent {
            run: 0,
            iter: 0,
            node: 0,
            parent: None,
            kind: TraceKind::Fail,
            beta: 0.0,
            delta: 0.0,
        };
        let mut seen_kind = false;
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| format!("bad token {tok:?}"))?;
            let bad = |_| format!("bad value in {tok:?}");
            match k {
                "run" => ev.run = v.parse().map_err(|_| format!("bad value in {tok:?}"))?,
                "iter" => ev.iter = v.parse().map_err(|_| format!("bad value in {tok:?}"))?,
                "node" => ev.node = v.parse().map_err(|_| format!("bad value in {tok:?}"))?,
                "parent" => ev.parent = Some(v.parse().map_err(|_| format!("bad value in {tok:?}"))?),
                "beta" => ev.beta = v.parse().map_err(bad)?,
                "delta" => ev.delta = v.parse().map_err(bad)?,
                "event" => {
                    seen_kind = true;
                    ev.kind = match v {
                        "expand" => TraceKind::Expand,
                        "reduce" => TraceKind::Reduce,
                        "bound" => TraceKind::Bound,
                        "incumbent" => TraceKind::Incumbent,
                        "prune" => TraceKind::Prune,
                        "fail" => TraceKind::Fail,
                        _ => return Err(format!("unknown event {v:?}")),
                    }
                }
                _ => return Err(format!("unknown key {k:?}")),
            }
        }
        if !seen_kind {
            return Err("missing event".into());
        }
        Ok(ev)
    }
}

#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub id: u64,
    pub depth: u32,
    pub bx: SearchBox,
    pub beta: f64,
    pub dual_point: Option<DualPoint>,
    pub force_branch: bool,
}

#[derive(Debug, Clone)]
pub struct SolverOutcome {
    pub status: SolveStatus,
    pub incumbent: Option<SolutionReport>,
    /// Resolved scheme of the incumbent (differs from the request for NOMA).
    pub scheme: SchemeConfig,
    pub delta_final: f64,
    pub eta: f64,
    pub iterations: u64,
    pub nodes_explored: u64,
    pub numerical_failures: u64,
    pub wall_time: Duration,
    pub trace: Vec<TraceEvent>,
    /// Every accepted incumbent, in acceptance order.
    pub incumbent_history: Vec<SolutionReport>,
}

impl SolverOutcome {
    pub fn objective(&self) -> Option<f64> {
        self.incumbent.as_ref().map(|r| r.objective)
    }
}

/// Initial box from single-user power bounds and the QoS thresholds.
pub fn initial_box(problem: &ProblemSpec) -> SearchBox {
    let layout = problem.layout().expect("scheme must be resolved");
    let k_users = problem.users();
    let p = problem.power;
    let gains: Vec<f64> = (0..k_users).map(|k| p * problem.channels.norm_sqr(k)).collect();
    let s_hi = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    let gamma = (0..k_users)
        .map(|k| {
            if !layout.private[k] {
                return Interval::point(0.0);
            }
            let qos = problem.qos[k];
            let lo = if layout.has_common && layout.common_share[k] {
                (qos.exp2() / (1.0 + s_hi) - 1.0).max(0.0)
            } else {
                (qos.exp2() - 1.0).max(0.0)
            };
            Interval::new(lo.min(gains[k]), gains[k])
        })
        .collect();
    SearchBox {
        gamma,
        s: layout.has_common.then(|| Interval::new(0.0, s_hi)),
        alpha: if layout.has_common { vec![Interval::new(0.0, 2.0 * PI); k_users - 1] } else { Vec::new() },
    }
}

/// Quantities that drive box reduction for one box.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionTerms {
    pub in_deficit: Vec<bool>,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    /// A user that cannot receive common rate is in deficit.
    pub pinned_deficit: bool,
}

fn log1p2(x: f64) -> f64 {
    (1.0 + x).log2()
}

fn power_floor(problem: &ProblemSpec, layout: &StreamLayout, gamma_lo: &[f64], s_lo: f64) -> f64 {
    let k_users = problem.users();
    let mut total = 0.0;
    for k in 0..k_users {
        if layout.private[k] && gamma_lo[k] > 0.0 {
            total += gamma_lo[k] / problem.channels.norm_sqr(k);
        }
    }
    if layout.has_common && s_lo > 0.0 {
        let worst = (0..k_users)
            .map(|k| 1.0 / problem.channels.norm_sqr(k))
            .fold(0.0, f64::max);
        total += s_lo * worst;
    }
    problem.mu * total + problem.static_power
}

fn max_share_weight(problem: &ProblemSpec, layout: &StreamLayout) -> f64 {
    (0..problem.users())
        .filter(|&k| layout.has_common && layout.common_share[k])
        .map(|k| problem.weights[k])
        .fold(0.0, f64::max)
}

pub fn reduction_terms(bx: &SearchBox, problem: &ProblemSpec) -> ReductionTerms {
    let layout = problem.layout().expect("scheme must be resolved");
    let k_users = problem.users();
    let s_hi = bx.s.map(|s| s.hi).unwrap_or(0.0);
    let in_deficit: Vec<bool> = (0..k_users)
        .map(|k| problem.qos[k] - log1p2(bx.gamma[k].hi) > 0.0)
        .collect();
    let u = max_share_weight(problem, &layout) * log1p2(s_hi)
        + (0..k_users).map(|k| problem.weights[k] * log1p2(bx.gamma[k].hi)).sum::<f64>();
    let mut v = -log1p2(s_hi);
    let mut pinned_deficit = false;
    for k in 0..k_users {
        if in_deficit[k] {
            if layout.has_common && layout.common_share[k] {
                v += problem.qos[k] - log1p2(bx.gamma[k].hi);
            } else {
                pinned_deficit = true;
            }
        }
    }
    let gamma_lo: Vec<f64> = bx.gamma.iter().map(|g| g.lo).collect();
    let w = power_floor(problem, &layout, &gamma_lo, bx.s.map(|s| s.lo).unwrap_or(0.0));
    ReductionTerms { in_deficit, u, v, w, pinned_deficit }
}

/// Cheap infeasibility test: `V > 0` or `U < W delta`.
pub fn quick_infeasibility(bx: &SearchBox, delta: f64, problem: &ProblemSpec) -> bool {
    let t = reduction_terms(bx, problem);
    t.pinned_deficit || t.v > 0.0 || t.u < t.w * delta
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reduction {
    Reduced(SearchBox),
    Infeasible,
}

const COLLAPSE_TOL: f64 = 1e-12;

/// Tightens the SINR bounds of `bx` without removing any dual feasible point.
pub fn reduce_box(bx: &SearchBox, delta: f64, problem: &ProblemSpec) -> Reduction {
    let layout = problem.layout().expect("scheme must be resolved");
    let terms = reduction_terms(bx, problem);
    if terms.pinned_deficit || terms.v > 0.0 || terms.u < terms.w * delta {
        return Reduction::Infeasible;
    }
    let k_users = problem.users();
    let gap = terms.w * delta - terms.u;
    let ratio = |u: f64| if u > 0.0 { gap / u } else { f64::NEG_INFINITY };
    let mut out = bx.clone();

    for k in 0..k_users {
        if !layout.private[k] {
            continue;
        }
        let g = bx.gamma[k];
        let qos = problem.qos[k];
        let from_level = ratio(problem.weights[k]);
        let mut lo2 = if terms.in_deficit[k] {
            from_level.max(terms.v).exp2() * (1.0 + g.hi) - 1.0
        } else {
            (from_level.exp2() * (1.0 + g.hi)).max((terms.v + qos).exp2()) - 1.0
        };
        if !(layout.has_common && layout.common_share[k]) {
            lo2 = lo2.max(qos.exp2() - 1.0);
        }
        out.gamma[k].lo = g.lo.max(lo2);
    }
    if let Some(s) = bx.s {
        let from_level = ratio(max_share_weight(problem, &layout));
        let lo2 = from_level.max(terms.v).exp2() * (1.0 + s.hi) - 1.0;
        out.s = Some(Interval::new(s.lo.max(lo2), s.hi));
    }

    let dm = delta * problem.mu;
    if dm > 0.0 {
        let gamma_lo: Vec<f64> = out.gamma.iter().map(|g| g.lo).collect();
        let w2 = power_floor(problem, &layout, &gamma_lo, out.s.map(|s| s.lo).unwrap_or(0.0));
        let room = (terms.u - delta * w2) / dm;
        for k in 0..k_users {
            if layout.private[k] {
                let cap = out.gamma[k].lo + problem.channels.norm_sqr(k) * room;
                out.gamma[k].hi = out.gamma[k].hi.min(cap);
            }
        }
        if let Some(s) = out.s.as_mut() {
            let hmin = (0..k_users).map(|k| problem.channels.norm_sqr(k)).fold(f64::INFINITY, f64::min);
            s.hi = s.hi.min(s.lo + hmin * room);
        }
    }

    for iv in out.gamma.iter_mut().chain(out.s.iter_mut()) {
        if iv.lo > iv.hi {
            if iv.lo - iv.hi <= COLLAPSE_TOL * iv.hi.abs().max(1.0) {
                iv.lo = iv.hi;
            } else {
                return Reduction::Infeasible;
            }
        }
    }
    Reduction::Reduced(out)
}

/// Widths of `bx` divided by the initial-box widths (zero for fixed dimensions).
pub fn normalized_widths(bx: &SearchBox, init_widths: &[f64]) -> Vec<f64> {
    bx.dims()
        .iter()
        .zip(init_widths)
        .map(|(iv, w0)| if *w0 > 0.0 { iv.width() / w0 } else { 0.0 })
        .collect()
}

/// Bisects the dimension with the largest normalized width (lowest index on ties).
pub fn branch(bx: &SearchBox, init_widths: &[f64]) -> (SearchBox, SearchBox) {
    split_widest(bx, &normalized_widths(bx, init_widths))
}

/// How widths are measured when choosing the branching dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthScale {
    /// Plain interval widths.
    Linear,
    /// SINR intervals measured as the rate spread `log2((1 + hi) / (1 + lo))`;
    /// argument intervals stay linear.
    Rate,
}

pub fn scaled_widths(bx: &SearchBox, scale: WidthScale) -> Vec<f64> {
    let sinr = |iv: &Interval| match scale {
        WidthScale::Linear => iv.width(),
        WidthScale::Rate => ((1.0 + iv.hi) / (1.0 + iv.lo)).log2(),
    };
    let mut w: Vec<f64> = bx.gamma.iter().map(sinr).collect();
    w.extend(bx.s.iter().map(sinr));
    w.extend(bx.alpha.iter().map(|a| a.width()));
    w
}

/// Bisects at the midpoint of the dimension whose width, on `scale` and
/// relative to the root box, is largest.
pub fn branch_scaled(bx: &SearchBox, root_widths: &[f64], scale: WidthScale) -> (SearchBox, SearchBox) {
    split_widest(bx, &normalized_widths_on(&scaled_widths(bx, scale), root_widths))
}

fn normalized_widths_on(widths: &[f64], root: &[f64]) -> Vec<f64> {
    widths.iter().zip(root).map(|(w, w0)| if *w0 > 0.0 { w / w0 } else { 0.0 }).collect()
}

fn split_widest(bx: &SearchBox, widths: &[f64]) -> (SearchBox, SearchBox) {
    let mut j = 0;
    for (i, w) in widths.iter().enumerate() {
        if *w > widths[j] {
            j = i;
        }
    }
    let iv = bx.dims()[j];
    let v = iv.mid();
    let mut lower = bx.clone();
    let mut upper = bx.clone();
    lower.set_dim(j, Interval::new(iv.lo, v));
    upper.set_dim(j, Interval::new(v, iv.hi));
    (lower, upper)
}

/// Recovers `(gamma_p, s, alpha)` from an optimal bounding solution.
pub fn extract_dual_point(sol: &ConicSolution, vars: &SitVars, bx: &SearchBox, problem: &ProblemSpec) -> DualPoint {
    let x = &sol.x;
    let clamp = |v: f64, iv: Interval| v.max(iv.lo).min(iv.hi);
    let gamma = (0..problem.users())
        .map(|k| match vars.gamma_bits[k] {
            Some(i) => clamp(x[i].exp2() - 1.0, bx.gamma[k]),
            None => bx.gamma[k].lo,
        })
        .collect();
    let s = match (vars.s_bits, bx.s) {
        (Some(i), Some(iv)) => Some(clamp(x[i].exp2() - 1.0, iv)),
        (_, iv) => iv.map(|iv| iv.lo),
    };
    let alpha = match vars.common {
        Some(pc) => {
            let pcv = pc.value(x);
            (1..problem.users())
                .map(|k| snap_angle(inner(problem.channels.h(k), &pcv).arg(), bx.alpha[k - 1]))
                .collect()
        }
        None => Vec::new(),
    };
    DualPoint { gamma, s, alpha }
}

/// Nearest corner of `arc` to the angle `theta` mapped into `[0, 2pi)`.
pub fn snap_angle(theta: f64, arc: Interval) -> f64 {
    let a = theta.rem_euclid(2.0 * PI);
    if (a - arc.lo).abs() <= (a - arc.hi).abs() {
        arc.lo
    } else {
        arc.hi
    }
}

/// Bounds a reduced box. Infeasible boxes get `beta = +inf`; numerical trouble
/// keeps the parent's bound and flags the node for branching.
pub fn bound(bx: SearchBox, delta: f64, problem: &ProblemSpec, parent_beta: f64, solver_tol: f64) -> NodeRecord {
    let mut node = NodeRecord {
        id: 0,
        depth: 0,
        bx,
        beta: f64::INFINITY,
        dual_point: None,
        force_branch: false,
    };
    if quick_infeasibility(&node.bx, delta, problem) {
        return node;
    }
    let (prog, vars) = match conic::build_bounding_socp(&node.bx, delta, problem) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("bounding program rejected: {e}");
            node.beta = parent_beta;
            node.force_branch = true;
            return node;
        }
    };
    let sol = conic::solve(&prog, solver_tol);
    match sol.status {
        ConicStatus::Optimal => {
            node.beta = sol.objective;
            node.dual_point = Some(extract_dual_point(&sol, &vars, &node.bx, problem));
        }
        ConicStatus::Infeasible => {}
        ConicStatus::Unbounded | ConicStatus::NumericalFailure => {
            node.beta = parent_beta;
            node.force_branch = true;
        }
    }
    node
}

/// Evaluates the dual objective at `x`. When it is nonpositive the returned
/// precoders are primal feasible; SINRs are recomputed and the common rates
/// re-optimized at level `lp_level`.
pub fn probe_feasible(x: &DualPoint, delta: f64, lp_level: f64, problem: &ProblemSpec, cfg: &SolverConfig) -> Option<SolutionReport> {
    let (prog, vars) = conic::build_gtilde_program(x, delta, problem).ok()?;
    let sol = conic::solve(&prog, cfg.solver_tol);
    if sol.status != ConicStatus::Optimal || sol.x[vars.t] > 0.0 {
        return None;
    }
    let mut pre = vars.precoders(&sol.x, problem.antennas());
    let total = pre.total_power();
    if total > problem.power {
        pre = pre.scaled((problem.power / total).sqrt());
    }
    recover_report(problem, pre, lp_level, cfg.feas_tol, cfg.solver_tol)
}

/// Best common-rate split for given precoders, as a checked report.
pub fn recover_report(problem: &ProblemSpec, pre: PrecoderSet, lp_level: f64, feas_tol: f64, solver_tol: f64) -> Option<SolutionReport> {
    let sinrs = compute_sinrs(&problem.channels, &pre).ok()?;
    let s_star = sinrs.common.iter().cloned().fold(f64::INFINITY, f64::min);
    let (lp, idx) = conic::build_common_rate_lp(&sinrs.private, s_star, pre.total_power(), lp_level, problem).ok()?;
    let lps = conic::solve(&lp, solver_tol);
    if lps.status != ConicStatus::Optimal {
        return None;
    }
    let common: Vec<f64> = idx.iter().map(|i| i.map(|i| lps.x[i].max(0.0)).unwrap_or(0.0)).collect();
    let report = SolutionReport::evaluate(problem, pre, common, feas_tol).ok()?;
    report.feasible.then_some(report)
}

#[derive(Debug)]
struct QueueEntry {
    beta: f64,
    id: u64,
    node: NodeRecord,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for QueueEntry {}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry {
    // Reversed so the max-heap pops the smallest bound, oldest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.beta.total_cmp(&self.beta).then(other.id.cmp(&self.id))
    }
}

struct Engine<'a> {
    problem: &'a ProblemSpec,
    cfg: &'a SolverConfig,
    run: usize,
    iter: u64,
    delta: f64,
    incumbent: Option<SolutionReport>,
    history: Vec<SolutionReport>,
    trace: Vec<TraceEvent>,
    next_id: u64,
    failures: u64,
}

impl Engine<'_> {
    fn log(&mut self, node: u64, parent: Option<u64>, kind: TraceKind, beta: f64) {
        if !self.cfg.record_trace {
            return;
        }
        let ev = TraceEvent {
            run: self.run,
            iter: self.iter,
            node,
            parent,
            kind,
            beta,
            delta: self.delta,
        };
        log::trace!("{ev}");
        self.trace.push(ev);
    }

    fn lp_level(&self) -> f64 {
        if self.incumbent.is_some() {
            self.delta - self.cfg.eta
        } else {
            0.0
        }
    }

    fn process_child(&self, bx: SearchBox, parent_beta: f64) -> (Option<SearchBox>, Option<NodeRecord>, Option<SolutionReport>) {
        match reduce_box(&bx, self.delta, self.problem) {
            Reduction::Infeasible => (None, None, None),
            Reduction::Reduced(rb) => {
                let node = bound(rb.clone(), self.delta, self.problem, parent_beta, self.cfg.solver_tol);
                let found = match (&node.dual_point, node.beta <= 0.0) {
                    (Some(x), true) => probe_feasible(x, self.delta, self.lp_level(), self.problem, self.cfg),
                    _ => None,
                };
                (Some(rb), Some(node), found)
            }
        }
    }

    fn run(mut self, start: Instant) -> (SolveStatus, Self) {
        let root_box = initial_box(self.problem);
        let init_widths: Vec<f64> = root_box.dims().iter().map(|d| d.width()).collect();
        let root_scaled = scaled_widths(&root_box, self.cfg.width_scale);
        let mut queue = BinaryHeap::new();
        let root_id = self.next_id;
        self.next_id += 1;
        self.log(root_id, None, TraceKind::Bound, f64::NEG_INFINITY);
        queue.push(QueueEntry {
            beta: f64::NEG_INFINITY,
            id: root_id,
            node: NodeRecord {
                id: root_id,
                depth: 0,
                bx: root_box,
                beta: f64::NEG_INFINITY,
                dual_point: None,
                force_branch: false,
            },
        });

        while let Some(entry) = queue.pop() {
            if self.iter >= self.cfg.max_iter || start.elapsed() >= self.cfg.max_wall_time {
                return (SolveStatus::BudgetExhausted, self);
            }
            self.iter += 1;
            let parent = entry.node;
            self.log(parent.id, None, TraceKind::Expand, parent.beta);

            let widths = normalized_widths(&parent.bx, &init_widths);
            if widths.iter().all(|w| *w < 1e-12) {
                self.failures += 1;
                self.log(parent.id, None, TraceKind::Fail, parent.beta);
                continue;
            }
            let (lo, hi) = branch_scaled(&parent.bx, &root_scaled, self.cfg.width_scale);
            let results = if self.cfg.parallel_children {
                let me = &self;
                rayon::join(|| me.process_child(lo, parent.beta), || me.process_child(hi, parent.beta))
            } else {
                (self.process_child(lo, parent.beta), self.process_child(hi, parent.beta))
            };

            let mut children = Vec::with_capacity(2);
            let mut best: Option<SolutionReport> = None;
            for (reduced, node, found) in [results.0, results.1] {
                let id = self.next_id;
                self.next_id += 1;
                match (reduced, node) {
                    (None, _) | (_, None) => {
                        self.log(id, Some(parent.id), TraceKind::Reduce, f64::INFINITY);
                        self.log(id, Some(parent.id), TraceKind::Prune, f64::INFINITY);
                    }
                    (Some(_), Some(mut node)) => {
                        node.id = id;
                        node.depth = parent.depth + 1;
                        self.log(id, Some(parent.id), TraceKind::Reduce, node.beta);
                        if node.force_branch {
                            self.failures += 1;
                            self.log(id, Some(parent.id), TraceKind::Fail, node.beta);
                        }
                        self.log(id, Some(parent.id), TraceKind::Bound, node.beta);
                        if let Some(r) = found {
                            if best.as_ref().map_or(true, |b| r.objective > b.objective) {
                                best = Some(r);
                            }
                        }
                        children.push(node);
                    }
                }
            }

            if let Some(r) = best {
                if r.objective > self.delta - self.cfg.eta {
                    self.delta = r.objective + self.cfg.eta;
                    self.log(parent.id, None, TraceKind::Incumbent, r.objective);
                    self.history.push(r.clone());
                    self.incumbent = Some(r);
                }
            }

            for node in children {
                if node.beta > -self.cfg.epsilon {
                    self.log(node.id, Some(parent.id), TraceKind::Prune, node.beta);
                } else {
                    queue.push(QueueEntry { beta: node.beta, id: node.id, node });
                }
            }
        }
        let status = if self.incumbent.is_some() {
            SolveStatus::OptimalCertified
        } else {
            SolveStatus::EpsilonEssentialInfeasible
        };
        (status, self)
    }
}

/// Solves the problem to essential `(epsilon, eta)`-optimality, or certifies
/// that no essentially feasible point exists, within the configured budget.
pub fn solve(problem: &ProblemSpec, cfg: &SolverConfig) -> Result<SolverOutcome, ModelError> {
    cfg.validate()?;
    let start = Instant::now();
    let orders: Vec<SchemeConfig> = match problem.scheme {
        SchemeConfig::Noma2(None) => problem
            .noma_orders()
            .into_iter()
            .map(|o| SchemeConfig::Noma2(Some(o)))
            .collect(),
        s => vec![s],
    };

    let (norm, scale) = problem.normalized();
    let mut best: Option<(SolutionReport, SchemeConfig)> = None;
    let mut statuses = Vec::new();
    let mut out = SolverOutcome {
        status: SolveStatus::EpsilonEssentialInfeasible,
        incumbent: None,
        scheme: orders[0],
        delta_final: 0.0,
        eta: cfg.eta,
        iterations: 0,
        nodes_explored: 0,
        numerical_failures: 0,
        wall_time: Duration::ZERO,
        trace: Vec::new(),
        incumbent_history: Vec::new(),
    };

    for (run, scheme) in orders.iter().enumerate() {
        let sub = norm.clone().with_scheme(*scheme)?;
        let warm = match &cfg.warm_start {
            WarmStart::None => None,
            WarmStart::Sca => Some(baseline::sca_solve(&sub, &ScaConfig::default()).report),
            WarmStart::Precoders(p) => {
                let rotated = p.scaled(1.0 / scale).rotated_canonical(&sub.channels);
                recover_report(&sub, rotated, 0.0, cfg.feas_tol, cfg.solver_tol)
            }
        }
        .filter(|r| r.feasible);

        let mut seed = best.as_ref().map(|(r, _)| r.clone());
        if let Some(w) = warm {
            if seed.as_ref().map_or(true, |s| w.objective > s.objective) {
                seed = Some(w.clone());
                best = Some((w, *scheme));
            }
        }
        let remaining = cfg.max_wall_time.saturating_sub(start.elapsed());
        let run_cfg = SolverConfig { max_wall_time: remaining, ..cfg.clone() };
        let engine = Engine {
            problem: &sub,
            cfg: &run_cfg,
            run,
            iter: 0,
            delta: seed.as_ref().map_or(0.0, |r| r.objective + cfg.eta),
            incumbent: seed,
            history: Vec::new(),
            trace: Vec::new(),
            next_id: 0,
            failures: 0,
        };
        let (status, engine) = engine.run(start);
        statuses.push(status);
        out.iterations += engine.iter;
        out.nodes_explored += engine.next_id;
        out.numerical_failures += engine.failures;
        out.trace.extend(engine.trace);
        out.incumbent_history.extend(engine.history.iter().map(|r| r.rescaled(&problem_for(problem, *scheme), scale, cfg.feas_tol).unwrap_or_else(|_| r.clone())));
        if let Some(last) = engine.history.last() {
            if best.as_ref().map_or(true, |(b, _)| last.objective > b.objective) {
                best = Some((last.clone(), *scheme));
            }
        }
    }

    if let Some((r, scheme)) = best {
        let original = problem_for(problem, scheme);
        let report = r.rescaled(&original, scale, cfg.feas_tol)?;
        out.delta_final = report.objective + cfg.eta;
        out.incumbent = Some(report);
        out.scheme = scheme;
    }
    out.status = if statuses.contains(&SolveStatus::BudgetExhausted) {
        SolveStatus::BudgetExhausted
    } else if out.incumbent.is_some() {
        SolveStatus::OptimalCertified
    } else {
        SolveStatus::EpsilonEssentialInfeasible
    };
    out.wall_time = start.elapsed();
    Ok(out)
}

fn problem_for(problem: &ProblemSpec, scheme: SchemeConfig) -> ProblemSpec {
    let mut p = problem.clone();
    p.scheme = scheme;
    p
}

/// Checks the structural invariants of a trace and returns every violation.
pub fn audit_trace(trace: &[TraceEvent], epsilon: f64) -> Vec<String> {
    use std::collections::{BTreeMap, HashMap};
    let mut problems = Vec::new();
    let mut runs: BTreeMap<usize, Vec<&TraceEvent>> = BTreeMap::new();
    for ev in trace {
        runs.entry(ev.run).or_default().push(ev);
    }
    for (run, events) in runs {
        let mut live: HashMap<u64, f64> = HashMap::new();
        let mut expanded_beta: HashMap<u64, f64> = HashMap::new();
        let mut last_delta = f64::NEG_INFINITY;
        let mut pending: Vec<(u64, f64)> = Vec::new();
        let mut current_iter = 0;
        for ev in events {
            if ev.iter != current_iter {
                for (id, b) in pending.drain(..) {
                    live.insert(id, b);
                }
                current_iter = ev.iter;
            }
            if ev.delta < last_delta {
                problems.push(format!("run {run} iter {}: delta decreased", ev.iter));
            }
            last_delta = ev.delta;
            match ev.kind {
                TraceKind::Expand => {
                    let min_live = live.values().cloned().fold(f64::INFINITY, f64::min);
                    if ev.beta > min_live + 1e-12 {
                        problems.push(format!(
                            "run {run} iter {}: expanded node {} with beta {} while {} was live",
                            ev.iter, ev.node, ev.beta, min_live
                        ));
                    }
                    live.remove(&ev.node);
                    expanded_beta.insert(ev.node, ev.beta);
                }
                TraceKind::Bound => {
                    if let Some(p) = ev.parent {
                        if let Some(&pb) = expanded_beta.get(&p) {
                            if ev.beta < pb - 1e-6 {
                                problems.push(format!(
                                    "run {run} iter {}: child {} bound {} below parent {}",
                                    ev.iter, ev.node, ev.beta, pb
                                ));
                            }
                        }
                        pending.push((ev.node, ev.beta));
                    } else if ev.iter == 0 {
                        live.insert(ev.node, ev.beta);
                    }
                }
                TraceKind::Prune => {
                    if !(ev.beta > -epsilon) {
                        problems.push(format!("run {run} iter {}: pruned node {} with beta {}", ev.iter, ev.node, ev.beta));
                    }
                    pending.retain(|(id, _)| *id != ev.node);
                }
                _ => {}
            }
        }
    }
    problems
}
