//! Independent checks: closed forms, a grid oracle for MU-LP, a sampling
//! oracle for box reduction and structural audits of solver runs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conic::{self, ConicProgram, ConicStatus, LinExpr};
use crate::experiments::gen_channels;
use crate::model::{
    check_feasibility, compute_sinrs, greedy_common_rates, inner, NomaOrder, PrecoderSet, ProblemSpec, SchemeConfig, C64,
};
use crate::sitbb::{self, initial_box, reduce_box, DualPoint, Interval, Reduction, SearchBox, SolverOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct AuditResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for AuditResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// `log2(1 + P ||h||^2)`.
pub fn single_user_capacity(problem: &ProblemSpec) -> f64 {
    (1.0 + problem.power * problem.channels.norm_sqr(0)).log2()
}

/// Trace invariants plus a feasibility re-check of every incumbent.
pub fn audit_outcome(outcome: &SolverOutcome, problem: &ProblemSpec, epsilon: f64, feas_tol: f64) -> Vec<String> {
    let mut issues = sitbb::audit_trace(&outcome.trace, epsilon);
    let candidates: Vec<ProblemSpec> = match problem.scheme {
        SchemeConfig::Noma2(None) => problem
            .noma_orders()
            .into_iter()
            .filter_map(|o| problem.clone().with_scheme(SchemeConfig::Noma2(Some(o))).ok())
            .collect(),
        _ => vec![problem.clone()],
    };
    let passes = |r| {
        candidates
            .iter()
            .any(|p| check_feasibility(p, r, feas_tol).map(|c| c.feasible).unwrap_or(false))
    };
    for (i, r) in outcome.incumbent_history.iter().enumerate() {
        if !passes(r) {
            issues.push(format!("incumbent {i} fails the feasibility check"));
        }
    }
    if let Some(r) = &outcome.incumbent {
        if !passes(r) {
            issues.push("final incumbent fails the feasibility check".into());
        }
    }
    issues
}

/// Minimum-power feasibility test for MU-LP SINR targets, written directly
/// as a second-order-cone program.
fn mulp_targets_feasible(problem: &ProblemSpec, gamma: &[f64], tol: f64) -> bool {
    let (k_users, m) = (problem.users(), problem.antennas());
    let mut prog = ConicProgram::new();
    let p: Vec<_> = (0..k_users).map(|k| prog.add_complex(&format!("w{k}"), m)).collect();
    for k in 0..k_users {
        let h = problem.channels.h(k);
        prog.zero(p[k].inner_im(h), "phase");
        let mut tail = Vec::new();
        for (j, pj) in p.iter().enumerate() {
            if j != k {
                tail.push(pj.inner_re(h).scale(gamma[k].sqrt()));
                tail.push(pj.inner_im(h).scale(gamma[k].sqrt()));
            }
        }
        tail.push(LinExpr::constant(gamma[k].sqrt()));
        prog.soc(p[k].inner_re(h), tail, "sinr");
    }
    let entries: Vec<LinExpr> = p.iter().flat_map(|v| v.entries()).collect();
    prog.soc(LinExpr::constant(problem.power.sqrt()), entries, "power");
    conic::solve(&prog, tol).status == ConicStatus::Optimal
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOracle {
    pub value: f64,
    /// Largest rate gain from moving one cell in every dimension.
    pub slack: f64,
}

/// Best weighted sum rate over an `n x n` grid of SINR targets for two-user
/// MU-LP with zero QoS. The feasible target set is down-closed, so each column
/// is resolved by bisection, which gives the same answer as testing every cell.
pub fn mulp_grid_oracle(problem: &ProblemSpec, n: usize) -> GridOracle {
    assert_eq!(problem.users(), 2, "grid oracle is two-dimensional");
    let top: Vec<f64> = (0..2).map(|k| problem.power * problem.channels.norm_sqr(k)).collect();
    let step: Vec<f64> = top.iter().map(|t| t / (n - 1) as f64).collect();
    let val = |g: [f64; 2]| problem.weights[0] * (1.0 + g[0]).log2() + problem.weights[1] * (1.0 + g[1]).log2();
    let mut best = 0.0f64;
    for i in 0..n {
        let g1 = step[0] * i as f64;
        if !mulp_targets_feasible(problem, &[g1, 0.0], 1e-9) {
            break;
        }
        let (mut lo, mut hi) = (0usize, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if mulp_targets_feasible(problem, &[g1, step[1] * mid as f64], 1e-9) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        best = best.max(val([g1, step[1] * lo as f64]));
    }
    let slack = problem.weights[0] * (1.0 + step[0]).log2() + problem.weights[1] * (1.0 + step[1]).log2();
    GridOracle { value: best, slack }
}

/// A dual-feasible witness: SINR targets reachable by some precoders, with
/// the objective those precoders support.
#[derive(Debug, Clone)]
pub struct Witness {
    pub point: DualPoint,
    pub objective: f64,
}

fn random_precoders(problem: &ProblemSpec, rng: &mut ChaCha8Rng) -> PrecoderSet {
    let layout = problem.layout().expect("resolved scheme");
    let (k_users, m) = (problem.users(), problem.antennas());
    let draw = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<C64> {
        let v: Vec<C64> = (0..m)
            .map(|_| C64::new(StandardNormal.sample(&mut *rng), StandardNormal.sample(&mut *rng)))
            .collect();
        let n: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.into_iter().map(|z| z * (scale / n)).collect()
    };
    let mut shares: Vec<f64> = (0..=k_users).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let total: f64 = shares.iter().sum();
    let budget = problem.power * rng.gen::<f64>().sqrt();
    for s in shares.iter_mut() {
        *s *= budget / total;
    }
    let mut pre = PrecoderSet::zeros(k_users, m);
    if layout.has_common {
        pre.common = draw(rng, shares[k_users].sqrt());
    }
    for k in 0..k_users {
        if layout.private[k] {
            pre.private[k] = draw(rng, shares[k].sqrt());
        }
    }
    pre
}

/// Samples a point of the dual feasible set together with the largest
/// objective level it supports, or `None` when the QoS cannot be met.
pub fn sample_witness(problem: &ProblemSpec, rng: &mut ChaCha8Rng) -> Option<Witness> {
    let layout = problem.layout().expect("resolved scheme");
    let pre = random_precoders(problem, rng).rotated_canonical(&problem.channels);
    let sinrs = compute_sinrs(&problem.channels, &pre).ok()?;
    let k_users = problem.users();
    let gamma: Vec<f64> = (0..k_users)
        .map(|k| if layout.private[k] { sinrs.private[k] * rng.gen::<f64>().powf(0.2) } else { 0.0 })
        .collect();
    let (s, alpha) = if layout.has_common {
        let s = sinrs.common.iter().cloned().fold(f64::INFINITY, f64::min) * rng.gen::<f64>().powf(0.2);
        let alpha = (1..k_users)
            .map(|k| inner(problem.channels.h(k), &pre.common).arg().rem_euclid(2.0 * PI))
            .collect();
        (Some(s), alpha)
    } else {
        (None, Vec::new())
    };
    let common = greedy_common_rates(problem, &layout, &gamma, s.unwrap_or(0.0))?;
    let numer: f64 = (0..k_users)
        .map(|k| problem.weights[k] * (common[k] + (1.0 + gamma[k]).log2()))
        .sum();
    let objective = numer / (problem.mu * pre.total_power() + problem.static_power);
    Some(Witness { point: DualPoint { gamma, s, alpha }, objective })
}

fn around(center: f64, root: Interval, rng: &mut ChaCha8Rng) -> Interval {
    let w = root.width();
    let lo = (center - rng.gen::<f64>() * 0.5 * w).max(root.lo);
    let hi = (center + rng.gen::<f64>() * 0.5 * w).min(root.hi);
    Interval::new(lo.min(hi), hi)
}

/// Random sub-box of the initial box around one witness.
pub fn random_box(root: &SearchBox, w: &Witness, rng: &mut ChaCha8Rng) -> SearchBox {
    SearchBox {
        gamma: root.gamma.iter().zip(&w.point.gamma).map(|(r, c)| around(*c, *r, rng)).collect(),
        s: root.s.zip(w.point.s).map(|(r, c)| around(c, r, rng)),
        alpha: root.alpha.iter().zip(&w.point.alpha).map(|(r, c)| around(*c, *r, rng)).collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NoLossStats {
    pub pairs: usize,
    pub tested: usize,
    pub lost: usize,
}

/// Draws `pairs` random (box, delta) pairs and `samples` witnesses per pair;
/// every witness inside the box at level `delta` must survive the reduction.
pub fn reduction_no_loss(problem: &ProblemSpec, seed: u64, pairs: usize, samples: usize) -> NoLossStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root = initial_box(problem);
    let mut stats = NoLossStats::default();
    let pool: Vec<Witness> = (0..2000).filter_map(|_| sample_witness(problem, &mut rng)).collect();
    if pool.is_empty() {
        return stats;
    }
    for _ in 0..pairs {
        let anchor = &pool[rng.gen_range(0..pool.len())];
        let bx = random_box(&root, anchor, &mut rng);
        let top = pool
            .iter()
            .filter(|w| bx.contains(&w.point))
            .map(|w| w.objective)
            .fold(anchor.objective, f64::max);
        let delta = top * rng.gen_range(0.0..1.05);
        stats.pairs += 1;
        let reduced = reduce_box(&bx, delta, problem);
        for _ in 0..samples {
            let Some(w) = sample_witness(problem, &mut rng) else { continue };
            if w.objective < delta || !bx.contains(&w.point) {
                continue;
            }
            stats.tested += 1;
            let kept = match &reduced {
                Reduction::Reduced(r) => r.contains(&w.point),
                Reduction::Infeasible => false,
            };
            if !kept {
                stats.lost += 1;
            }
        }
    }
    stats
}

/// Instance family used by the reduction audit: WSR and EE variants of
/// RSMA, MU-LP and NOMA on seeded two-user channels.
pub fn audit_instance(index: u64) -> ProblemSpec {
    let ch = gen_channels(100 + index, 2, 2, &[1.0, if index % 2 == 0 { 1.0 } else { 0.3 }]);
    let base = match index % 5 {
        0 => ProblemSpec::wsr(ch, vec![1.0, 1.0], vec![0.3, 0.3], 10.0),
        1 => ProblemSpec::ee(ch, vec![0.2, 0.2], 10.0, 0.35, 2.0),
        2 => ProblemSpec::wsr(ch, vec![1.0, 0.5], vec![0.5, 0.2], 20.0),
        3 => ProblemSpec::ee(ch, vec![0.5, 0.5], 20.0, 0.5, 1.0),
        _ => ProblemSpec::wsr(ch, vec![0.3, 1.0], vec![0.0, 0.4], 10.0),
    }
    .expect("valid audit instance");
    let scheme = match index % 5 {
        3 => SchemeConfig::Mulp,
        4 => SchemeConfig::Noma2(Some(NomaOrder { strong: 0, weak: 1 })),
        _ => SchemeConfig::Rsma,
    };
    base.with_scheme(scheme).expect("two users")
}

/// The suites run by the `audit` command.
pub fn run_suite(quick: bool) -> Vec<AuditResult> {
    let mut out = Vec::new();
    let (pairs, samples) = if quick { (20, 1000) } else { (100, 10_000) };
    for i in 0..5 {
        let p = audit_instance(i);
        let st = reduction_no_loss(&p, 7 + i, pairs, samples);
        out.push(AuditResult {
            name: format!("reduction-no-loss[{i}]"),
            passed: st.lost == 0 && st.tested > 0,
            detail: format!("{} pairs, {} points tested, {} lost", st.pairs, st.tested, st.lost),
        });
    }

    let cfg = sitbb::SolverConfig { eta: 0.01, ..Default::default() };
    let mut worst = 0.0f64;
    let mut trace_issues = Vec::new();
    for seed in 0..if quick { 3 } else { 10 } {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = if seed % 2 == 0 { 2 } else { 4 };
        let power = if seed % 3 == 0 { 1.0 } else { 10.0 };
        let ch = gen_channels(rng.gen(), 1, m, &[1.0]);
        let p = ProblemSpec::wsr(ch, vec![1.0], vec![0.0], power).expect("valid");
        match sitbb::solve(&p, &cfg) {
            Ok(o) => {
                worst = worst.max((o.objective().unwrap_or(f64::NAN) - single_user_capacity(&p)).abs());
                trace_issues.extend(audit_outcome(&o, &p, cfg.epsilon, 1e-6));
            }
            Err(e) => trace_issues.push(e.to_string()),
        }
    }
    out.push(AuditResult {
        name: "single-user-closed-form".into(),
        passed: worst <= cfg.eta + 1e-6,
        detail: format!("largest gap {worst:.2e}"),
    });

    let cfg = sitbb::SolverConfig { eta: 0.02, ..Default::default() };
    let mut worst_excess = f64::NEG_INFINITY;
    for seed in 0..if quick { 2 } else { 10 } {
        let ch = gen_channels(seed, 2, 2, &[1.0, 1.0]);
        let p = ProblemSpec::wsr(ch, vec![1.0, 1.0], vec![0.0, 0.0], 10.0)
            .and_then(|p| p.with_scheme(SchemeConfig::Mulp))
            .expect("valid");
        let oracle = mulp_grid_oracle(&p, 200);
        match sitbb::solve(&p, &cfg) {
            Ok(o) => {
                let gap = (o.objective().unwrap_or(f64::NAN) - oracle.value).abs();
                worst_excess = worst_excess.max(gap - cfg.eta - oracle.slack);
                trace_issues.extend(audit_outcome(&o, &p, cfg.epsilon, 1e-6));
            }
            Err(e) => trace_issues.push(e.to_string()),
        }
    }
    out.push(AuditResult {
        name: "mulp-grid-oracle".into(),
        passed: worst_excess <= 0.0,
        detail: format!("worst excess over eta + grid slack {worst_excess:.2e}"),
    });
    out.push(AuditResult {
        name: "trace-invariants".into(),
        passed: trace_issues.is_empty(),
        detail: if trace_issues.is_empty() { "no violations".into() } else { trace_issues.join("; ") },
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn witnesses_are_primal_consistent() {
        let p = audit_instance(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut n = 0;
        for _ in 0..200 {
            if let Some(w) = sample_witness(&p, &mut rng) {
                assert!(initial_box(&p).contains(&w.point));
                assert!(w.objective >= 0.0);
                n += 1;
            }
        }
        assert!(n > 0);
    }

    #[test]
    fn reduction_keeps_sampled_points() {
        for i in 0..5 {
            let st = reduction_no_loss(&audit_instance(i), i, 10, 300);
            assert_eq!(st.lost, 0, "instance {i}: {st:?}");
            assert!(st.tested > 0, "instance {i}: {st:?}");
        }
    }

    #[test]
    fn grid_oracle_on_orthogonal_channels() {
        let ch = crate::model::ChannelSet::new(vec![
            vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        ])
        .unwrap();
        let p = ProblemSpec::wsr(ch, vec![1.0, 1.0], vec![0.0, 0.0], 10.0)
            .unwrap()
            .with_scheme(SchemeConfig::Mulp)
            .unwrap();
        let g = mulp_grid_oracle(&p, 41);
        let opt = 2.0 * 6f64.log2();
        assert!(g.value <= opt + 1e-9 && g.value >= opt - g.slack, "{g:?}");
    }
}
