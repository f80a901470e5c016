use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rsma_globopt::experiments::{ChannelPlan, ExperimentPlan, PlanKind, SolverPlan};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsma-globopt")).args(args).output().unwrap()
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("rsma-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn tiny_plan(dir: &Path, kind: PlanKind, grid: Vec<f64>) -> PathBuf {
    let plan = ExperimentPlan {
        name: "tiny".into(),
        kind,
        qos: if kind == PlanKind::SumRate { vec![0.0; grid.len()] } else { vec![0.0] },
        grid,
        schemes: vec!["mulp".into()],
        snr_db: (kind == PlanKind::RateRegion).then_some(10.0),
        channels: ChannelPlan { users: 2, antennas: 2, variances: vec![1.0, 1.0], first_seed: 3, count: 2 },
        solver: SolverPlan { eta: 0.05, ..SolverPlan::default() },
        ee: None,
    };
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, plan.to_text()).unwrap();
    p
}

#[test]
fn solve_prints_a_certificate() {
    let o = bin(&["solve", "--scheme", "mulp", "--snr-db", "10", "--seed", "4", "--strict"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("status=optimal"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("objective: ")));
    assert!(text.contains("certificate:"));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(bin(&["solve", "--scheme", "mulp", "--pc-nonzero", "--snr-db", "10"]).status.code(), Some(64));
    assert_eq!(bin(&["solve"]).status.code(), Some(64));
    assert_eq!(bin(&["solve", "--scheme", "bogus", "--snr-db", "10"]).status.code(), Some(64));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(64));
}

#[test]
fn sweep_csv_is_reproducible() {
    let dir = scratch("sweep");
    let plan = tiny_plan(&dir, PlanKind::SumRate, vec![5.0, 10.0]);
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let o = bin(&["sweep-snr", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "1"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(std::fs::read_to_string(out.join("tiny.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let mut lines = csvs[0].lines();
    assert_eq!(lines.next().unwrap(), "seed,scheme,grid_x,solver,objective,R1,R2,C1,C2,status,wall_ms");
    // two seeds, two grid points, BB and SCA rows
    assert_eq!(lines.count(), 8);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn plan_kind_and_seed_file_are_checked() {
    let dir = scratch("kind");
    let plan = tiny_plan(&dir, PlanKind::SumRate, vec![10.0]);
    let out = dir.join("out");
    let o = bin(&["sweep-ee", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(64));
    let seeds = dir.join("seeds.txt");
    std::fs::write(&seeds, "4\n9\n").unwrap();
    let o = bin(&["sweep-snr", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", seeds.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(64));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn rate_region_writes_svg() {
    let dir = scratch("region");
    let plan = tiny_plan(&dir, PlanKind::RateRegion, vec![-1.0, 0.0, 1.0]);
    let out = dir.join("out");
    let o = bin(&["rate-region", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap(), "--svg"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(out.join("tiny.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("mulp"));
    let _ = std::fs::remove_dir_all(&dir);
}
