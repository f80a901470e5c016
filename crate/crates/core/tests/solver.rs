use std::io::BufReader;

use proptest::prelude::*;

use rsma_globopt::audit::{audit_outcome, single_user_capacity};
use rsma_globopt::baseline::{sca_solve, ScaConfig};
use rsma_globopt::experiments::{dbm_to_watt, gen_channels, run_instance, EePlan};
use rsma_globopt::model::{ChannelSet, ProblemSpec, SchemeConfig, C64};
use rsma_globopt::sitbb::{self, SolveStatus, SolverConfig, TraceEvent};

fn wsr(seed: u64, snr: f64, qos: f64, scheme: SchemeConfig) -> ProblemSpec {
    ProblemSpec::wsr(gen_channels(seed, 2, 2, &[1.0, 1.0]), vec![1.0, 1.0], vec![qos, qos], snr)
        .and_then(|p| p.with_scheme(scheme))
        .unwrap()
}

fn certified(p: &ProblemSpec, cfg: &SolverConfig) -> f64 {
    let o = sitbb::solve(p, cfg).unwrap();
    assert_eq!(o.status, SolveStatus::OptimalCertified);
    assert!(audit_outcome(&o, p, cfg.epsilon, 1e-6).is_empty());
    o.objective().unwrap()
}

#[test]
fn rsma_dominates_mulp_and_noma() {
    let cfg = SolverConfig { eta: 0.05, ..SolverConfig::default() };
    for seed in 30..33 {
        let r = certified(&wsr(seed, 10.0, 0.2, SchemeConfig::Rsma), &cfg);
        let m = certified(&wsr(seed, 10.0, 0.2, SchemeConfig::Mulp), &cfg);
        let n = certified(&wsr(seed, 10.0, 0.2, SchemeConfig::Noma2(None)), &cfg);
        assert!(r >= m.max(n) - 2.0 * cfg.eta, "seed {seed}: {r} {m} {n}");
    }
}

#[test]
fn global_value_is_not_beaten_by_sca() {
    let cfg = SolverConfig { eta: 0.05, warm_start: sitbb::WarmStart::None, ..SolverConfig::default() };
    for seed in 40..43 {
        let p = wsr(seed, 10.0, 0.0, SchemeConfig::Rsma);
        let sca = sca_solve(&p, &ScaConfig::default());
        assert!(sca.report.feasible);
        let bb = certified(&p, &cfg);
        assert!(sca.report.objective <= bb + cfg.eta + 1e-6, "seed {seed}: sca {} bb {bb}", sca.report.objective);
    }
}

#[test]
fn warm_started_run_keeps_the_sca_point() {
    let cfg = SolverConfig { eta: 0.05, ..SolverConfig::default() };
    let p = wsr(7, 15.0, 0.3, SchemeConfig::Rsma);
    let res = run_instance(&p, &cfg, true, true).unwrap();
    let sca = res.sca.unwrap().report.objective;
    let bb = res.bb.unwrap().objective().unwrap();
    assert!(bb >= sca - 1e-6);
}

#[test]
fn swapping_users_mirrors_the_region() {
    let cfg = SolverConfig { eta: 0.01, ..SolverConfig::default() };
    let ch = gen_channels(3, 2, 2, &[1.0, 0.5]);
    let swapped = ChannelSet::new(vec![ch.h(1).to_vec(), ch.h(0).to_vec()]).unwrap();
    let a = ProblemSpec::wsr(ch, vec![1.0, 2.0], vec![0.0, 0.0], 10.0).unwrap().with_scheme(SchemeConfig::Mulp).unwrap();
    let b = ProblemSpec::wsr(swapped, vec![2.0, 1.0], vec![0.0, 0.0], 10.0).unwrap().with_scheme(SchemeConfig::Mulp).unwrap();
    assert!((certified(&a, &cfg) - certified(&b, &cfg)).abs() <= 2.0 * cfg.eta);
}

#[test]
fn energy_efficiency_grows_with_budget() {
    let ee = EePlan::default();
    let cfg = SolverConfig { eta: 0.1, ..SolverConfig::default() };
    let h = gen_channels(5, 2, 2, &[1.0, 1.0]).scaled(1.0 / ee.noise_var.sqrt());
    let mut last = f64::NEG_INFINITY;
    for dbm in [6.0, 12.0, 18.0] {
        let p = ProblemSpec::ee(h.clone(), vec![1.0, 1.0], dbm_to_watt(dbm), ee.mu, ee.static_power(2))
            .and_then(|p| p.with_scheme(SchemeConfig::Mulp))
            .unwrap();
        let v = certified(&p, &cfg);
        let sca = sca_solve(&p, &ScaConfig::default());
        assert!(sca.report.objective <= v + cfg.eta + 1e-6);
        assert!(v >= last - 2.0 * cfg.eta, "{dbm} dBm: {v} after {last}");
        last = v;
    }
}

#[test]
fn unreachable_qos_is_certified_infeasible() {
    let p = wsr(9, 10.0, 20.0, SchemeConfig::Rsma);
    let o = sitbb::solve(&p, &SolverConfig::default()).unwrap();
    assert_eq!(o.status, SolveStatus::EpsilonEssentialInfeasible);
    assert!(o.incumbent.is_none());
}

#[test]
fn trace_survives_a_text_round_trip() {
    let p = wsr(11, 10.0, 0.0, SchemeConfig::Mulp);
    let cfg = SolverConfig { eta: 0.02, ..SolverConfig::default() };
    let o = sitbb::solve(&p, &cfg).unwrap();
    assert!(!o.trace.is_empty());
    let back: Vec<TraceEvent> = o.trace.iter().map(|e| e.to_string().parse().unwrap()).collect();
    assert!(sitbb::audit_trace(&back, cfg.epsilon).is_empty());
    assert_eq!(back.len(), o.trace.len());
}

#[test]
fn channel_file_gives_the_same_answer() {
    let ch = gen_channels(12, 2, 2, &[1.0, 0.3]);
    let mut buf = Vec::new();
    ch.write_record(&mut buf).unwrap();
    let back = ChannelSet::read_records(BufReader::new(&buf[..])).unwrap().remove(0);
    let cfg = SolverConfig { eta: 0.02, ..SolverConfig::default() };
    let mk = |c: ChannelSet| ProblemSpec::wsr(c, vec![1.0, 1.0], vec![0.0, 0.0], 10.0).unwrap().with_scheme(SchemeConfig::Mulp).unwrap();
    assert!((certified(&mk(ch), &cfg) - certified(&mk(back), &cfg)).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn single_user_matches_capacity(re in prop::collection::vec(-2.0f64..2.0, 3), im in prop::collection::vec(-2.0f64..2.0, 3), power in 0.5f64..20.0) {
        let h: Vec<C64> = re.iter().zip(&im).map(|(a, b)| C64::new(*a, *b)).collect();
        prop_assume!(h.iter().map(|z| z.norm_sqr()).sum::<f64>() > 1e-2);
        let p = ProblemSpec::wsr(ChannelSet::new(vec![h]).unwrap(), vec![1.0], vec![0.0], power).unwrap();
        let cfg = SolverConfig { eta: 0.01, ..SolverConfig::default() };
        let o = sitbb::solve(&p, &cfg).unwrap();
        prop_assert!((o.objective().unwrap() - single_user_capacity(&p)).abs() <= cfg.eta);
    }

    #[test]
    fn channel_and_power_scaling_cancel(seed in 0u64..1000, c in 0.2f64..5.0) {
        let cfg = SolverConfig { eta: 0.02, ..SolverConfig::default() };
        let ch = gen_channels(seed, 2, 2, &[1.0, 1.0]);
        let a = ProblemSpec::wsr(ch.clone(), vec![1.0, 1.0], vec![0.0, 0.0], 10.0).unwrap().with_scheme(SchemeConfig::Mulp).unwrap();
        let b = ProblemSpec::wsr(ch.scaled(c), vec![1.0, 1.0], vec![0.0, 0.0], 10.0 / (c * c)).unwrap().with_scheme(SchemeConfig::Mulp).unwrap();
        let fa = sitbb::solve(&a, &cfg).unwrap().objective().unwrap();
        let fb = sitbb::solve(&b, &cfg).unwrap().objective().unwrap();
        prop_assert!((fa - fb).abs() <= 2.0 * cfg.eta);
    }
}
