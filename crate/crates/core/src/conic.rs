//! Convex subproblems as solver-agnostic cone programs, plus a clarabel backend.
//!
//! A [`ConicProgram`] is pure data: real variables, a linear objective and a list
//! of cone blocks whose rows are affine expressions. The builders for the
//! bounding problem, the fixed-point feasibility problem and the common-rate LP
//! live here as well.

use std::f64::consts::PI;
use std::fmt;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::model::{ProblemSpec, StreamLayout, C64};
use crate::sitbb::{DualPoint, SearchBox};

/// Affine expression `sum_i coef_i * x_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn term(mut self, i: usize, c: f64) -> Self {
        if c != 0.0 {
            self.terms.push((i, c));
        }
        self
    }

    pub fn plus_const(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn add(mut self, other: &LinExpr) -> Self {
        self.terms.extend_from_slice(&other.terms);
        self.constant += other.constant;
        self
    }

    pub fn scale(mut self, c: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= c;
        }
        self.constant *= c;
        self.terms.retain(|t| t.1 != 0.0);
        self
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.1 == 0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    /// Every row equals zero.
    Zero,
    /// Every row is nonnegative.
    Nonneg,
    /// `rows[0] >= ||rows[1..]||`.
    Soc,
    /// `2 rows[0] rows[1] >= ||rows[2..]||^2` with `rows[0], rows[1] >= 0`.
    RotatedSoc,
    /// `rows[1] * exp(rows[0] / rows[1]) <= rows[2]`.
    Exp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeBlock {
    pub kind: ConeKind,
    pub rows: Vec<LinExpr>,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub vars: Vec<VarBlock>,
    pub n: usize,
    pub objective: LinExpr,
    pub sense: Sense,
    pub blocks: Vec<ConeBlock>,
}

impl Default for ConicProgram {
    fn default() -> Self {
        Self::new()
    }
}

impl ConicProgram {
    pub fn new() -> Self {
        Self {
            vars: Vec::new(),
            n: 0,
            objective: LinExpr::zero(),
            sense: Sense::Minimize,
            blocks: Vec::new(),
        }
    }

    /// Appends a named block of `len` real variables and returns its first index.
    pub fn add_vars(&mut self, name: &str, len: usize) -> usize {
        let start = self.n;
        self.vars.push(VarBlock { name: name.to_string(), start, len });
        self.n += len;
        start
    }

    pub fn add_var(&mut self, name: &str) -> usize {
        self.add_vars(name, 1)
    }

    /// Complex vector of length `m`, stored as interleaved (re, im) pairs.
    pub fn add_complex(&mut self, name: &str, m: usize) -> CVec {
        CVec { start: self.add_vars(name, 2 * m), len: m }
    }

    pub fn var_block(&self, name: &str) -> Option<&VarBlock> {
        self.vars.iter().find(|v| v.name == name)
    }

    pub fn push(&mut self, kind: ConeKind, rows: Vec<LinExpr>, tag: &str) {
        self.blocks.push(ConeBlock { kind, rows, tag: tag.to_string() });
    }

    pub fn zero(&mut self, row: LinExpr, tag: &str) {
        self.push(ConeKind::Zero, vec![row], tag);
    }

    pub fn nonneg(&mut self, row: LinExpr, tag: &str) {
        self.push(ConeKind::Nonneg, vec![row], tag);
    }

    /// `lhs >= rhs`.
    pub fn geq(&mut self, lhs: LinExpr, rhs: LinExpr, tag: &str) {
        self.nonneg(lhs.add(&rhs.scale(-1.0)), tag);
    }

    /// `head >= ||tail||`. Degenerates to a plain inequality when the tail is
    /// identically zero.
    pub fn soc(&mut self, head: LinExpr, tail: Vec<LinExpr>, tag: &str) {
        let tail: Vec<LinExpr> = tail
            .into_iter()
            .filter(|r| !(r.is_constant() && r.constant == 0.0))
            .collect();
        if tail.is_empty() {
            self.nonneg(head, tag);
        } else {
            let mut rows = vec![head];
            rows.extend(tail);
            self.push(ConeKind::Soc, rows, tag);
        }
    }

    pub fn num_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows.len()).sum()
    }

    /// Largest violation of any block at `x` (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| block_violation(b, x))
            .fold(0.0, f64::max)
    }
}

fn block_violation(b: &ConeBlock, x: &[f64]) -> f64 {
    let v: Vec<f64> = b.rows.iter().map(|r| r.eval(x)).collect();
    match b.kind {
        ConeKind::Zero => v.iter().map(|r| r.abs()).fold(0.0, f64::max),
        ConeKind::Nonneg => v.iter().map(|r| (-r).max(0.0)).fold(0.0, f64::max),
        ConeKind::Soc => {
            let tail = v[1..].iter().map(|r| r * r).sum::<f64>().sqrt();
            (tail - v[0]).max(0.0)
        }
        ConeKind::RotatedSoc => {
            let a = (v[0] + v[1]) / 2f64.sqrt();
            let c = (v[0] - v[1]) / 2f64.sqrt();
            let tail = (c * c + v[2..].iter().map(|r| r * r).sum::<f64>()).sqrt();
            (tail - a).max(0.0)
        }
        ConeKind::Exp => {
            let (a, y, z) = (v[0], v[1], v[2]);
            if y <= 0.0 {
                return (-y).max(0.0) + (a.max(0.0)) + (-z).max(0.0);
            }
            (y * (a / y).exp() - z).max(0.0)
        }
    }
}

impl fmt::Display for ConicProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variables {}", self.n)?;
        for v in &self.vars {
            writeln!(f, "  {} [{}..{})", v.name, v.start, v.start + v.len)?;
        }
        let sense = match self.sense {
            Sense::Minimize => "minimize",
            Sense::Maximize => "maximize",
        };
        writeln!(f, "{sense} {}", fmt_expr(&self.objective))?;
        for b in &self.blocks {
            writeln!(f, "{:?} [{}]", b.kind, b.tag)?;
            for r in &b.rows {
                writeln!(f, "  {}", fmt_expr(r))?;
            }
        }
        Ok(())
    }
}

fn fmt_expr(e: &LinExpr) -> String {
    let mut s = String::new();
    for (i, c) in &e.terms {
        s.push_str(&format!("{c:+.6e}*x{i} "));
    }
    s.push_str(&format!("{:+.6e}", e.constant));
    s
}

/// Complex vector variable laid out as (re_0, im_0, re_1, im_1, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CVec {
    pub start: usize,
    pub len: usize,
}

impl CVec {
    pub fn re(&self, m: usize) -> usize {
        self.start + 2 * m
    }

    pub fn im(&self, m: usize) -> usize {
        self.start + 2 * m + 1
    }

    /// `Re(h^H p)`: with `h = a + ib`, `p = x + iy` this is `sum a x + b y`.
    pub fn inner_re(&self, h: &[C64]) -> LinExpr {
        let mut e = LinExpr::zero();
        for (m, z) in h.iter().enumerate() {
            e = e.term(self.re(m), z.re).term(self.im(m), z.im);
        }
        e
    }

    /// `Im(h^H p) = sum a y - b x`.
    pub fn inner_im(&self, h: &[C64]) -> LinExpr {
        let mut e = LinExpr::zero();
        for (m, z) in h.iter().enumerate() {
            e = e.term(self.im(m), z.re).term(self.re(m), -z.im);
        }
        e
    }

    pub fn entries(&self) -> Vec<LinExpr> {
        (0..2 * self.len).map(|i| LinExpr::var(self.start + i)).collect()
    }

    pub fn value(&self, x: &[f64]) -> Vec<C64> {
        (0..self.len).map(|m| C64::new(x[self.re(m)], x[self.im(m)])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConicStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub objective: f64,
    pub x: Vec<f64>,
    pub r_prim: f64,
    pub r_dual: f64,
    pub iterations: u32,
}

impl ConicSolution {
    fn with_status(status: ConicStatus, n: usize) -> Self {
        Self {
            status,
            objective: f64::NAN,
            x: vec![0.0; n],
            r_prim: f64::NAN,
            r_dual: f64::NAN,
            iterations: 0,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == ConicStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

/// Solves `program` with clarabel. Numerical trouble is reported as a status
/// after one retry with different scaling settings.
pub fn solve(program: &ConicProgram, solver_tol: f64) -> ConicSolution {
    solve_with(program, SolveOptions { tol: solver_tol, ..SolveOptions::default() })
}

pub fn solve_with(program: &ConicProgram, opts: SolveOptions) -> ConicSolution {
    // Rows without variables are decided here; the solver never sees them.
    let mut blocks: Vec<&ConeBlock> = Vec::with_capacity(program.blocks.len());
    for b in &program.blocks {
        if b.rows.iter().all(|r| r.is_constant()) {
            if block_violation(b, &[]) > opts.tol {
                return ConicSolution::with_status(ConicStatus::Infeasible, program.n);
            }
        } else {
            blocks.push(b);
        }
    }
    if program.n == 0 {
        let mut s = ConicSolution::with_status(ConicStatus::Optimal, 0);
        s.objective = program.objective.constant;
        s.r_prim = 0.0;
        s.r_dual = 0.0;
        return s;
    }

    let first = run_clarabel(program, &blocks, opts, true);
    match first.status {
        ConicStatus::NumericalFailure => {
            let second = run_clarabel(program, &blocks, opts, false);
            if second.status == ConicStatus::NumericalFailure {
                log::debug!("conic solve failed twice ({} vars, {} rows)", program.n, program.num_rows());
            }
            second
        }
        _ => first,
    }
}

fn run_clarabel(program: &ConicProgram, blocks: &[&ConeBlock], opts: SolveOptions, primary: bool) -> ConicSolution {
    let n = program.n;
    let sign = match program.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut q = vec![0.0; n];
    for &(i, c) in &program.objective.terms {
        q[i] += sign * c;
    }

    let mut ri = Vec::new();
    let mut cj = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut row = 0usize;
    let mut emit = |rows: &[LinExpr], ri: &mut Vec<usize>, cj: &mut Vec<usize>, vals: &mut Vec<f64>, b: &mut Vec<f64>| {
        for r in rows {
            for &(i, c) in &r.terms {
                ri.push(row);
                cj.push(i);
                vals.push(-c);
            }
            b.push(r.constant);
            row += 1;
        }
    };

    // Group consecutive linear rows of the same kind into single cones.
    let mut i = 0;
    while i < blocks.len() {
        let kind = blocks[i].kind;
        match kind {
            ConeKind::Zero | ConeKind::Nonneg => {
                let mut count = 0;
                while i < blocks.len() && blocks[i].kind == kind {
                    emit(&blocks[i].rows, &mut ri, &mut cj, &mut vals, &mut b);
                    count += blocks[i].rows.len();
                    i += 1;
                }
                cones.push(if kind == ConeKind::Zero {
                    SupportedConeT::ZeroConeT(count)
                } else {
                    SupportedConeT::NonnegativeConeT(count)
                });
                continue;
            }
            ConeKind::Soc => {
                emit(&blocks[i].rows, &mut ri, &mut cj, &mut vals, &mut b);
                cones.push(SupportedConeT::SecondOrderConeT(blocks[i].rows.len()));
            }
            ConeKind::RotatedSoc => {
                let r = &blocks[i].rows;
                let h = std::f64::consts::FRAC_1_SQRT_2;
                let mut rows = vec![r[0].clone().scale(h).add(&r[1].clone().scale(h))];
                rows.push(r[0].clone().scale(h).add(&r[1].clone().scale(-h)));
                rows.extend(r[2..].iter().cloned());
                emit(&rows, &mut ri, &mut cj, &mut vals, &mut b);
                cones.push(SupportedConeT::SecondOrderConeT(rows.len()));
            }
            ConeKind::Exp => {
                emit(&blocks[i].rows, &mut ri, &mut cj, &mut vals, &mut b);
                cones.push(SupportedConeT::ExponentialConeT());
            }
        }
        i += 1;
    }
    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, n, ri, cj, vals);
    let p = CscMatrix::zeros((n, n));

    let mut settings = DefaultSettings::<f64> {
        verbose: false,
        max_iter: opts.max_iter,
        tol_gap_abs: opts.tol,
        tol_gap_rel: opts.tol,
        tol_feas: opts.tol,
        presolve_enable: false,
        ..DefaultSettings::default()
    };
    if !primary {
        settings.equilibrate_enable = !settings.equilibrate_enable;
        settings.max_iter = opts.max_iter * 2;
        settings.static_regularization_constant *= 10.0;
    }
    let mut solver = match DefaultSolver::new(&p, &q, &a, &b, &cones, settings) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("clarabel setup failed: {e}");
            return ConicSolution::with_status(ConicStatus::NumericalFailure, n);
        }
    };
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => ConicStatus::Optimal,
        SolverStatus::PrimalInfeasible => ConicStatus::Infeasible,
        SolverStatus::DualInfeasible => ConicStatus::Unbounded,
        _ => ConicStatus::NumericalFailure,
    };
    ConicSolution {
        status,
        objective: sign * sol.obj_val + program.objective.constant,
        x: sol.x.clone(),
        r_prim: sol.r_prim,
        r_dual: sol.r_dual,
        iterations: sol.iterations,
    }
}

/// Convex envelope of the argument-restricted circle set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvelopeCut {
    Cuts {
        user: usize,
        /// `(sin lo, -cos lo)`: `sin lo Re e - cos lo Im e <= 0`.
        lower: (f64, f64),
        /// `(sin hi, -cos hi)`: `sin hi Re e - cos hi Im e >= 0`.
        upper: (f64, f64),
        /// `(a, b)`: `a Re e + b Im e >= (d - t)(a^2 + b^2)`.
        chord: (f64, f64),
    },
    TrivialRelaxation,
}

pub fn envelope_cuts(alpha_lo: f64, alpha_hi: f64, user: usize) -> EnvelopeCut {
    if alpha_hi - alpha_lo > PI {
        return EnvelopeCut::TrivialRelaxation;
    }
    let a = 0.5 * (alpha_lo.cos() + alpha_hi.cos());
    let b = 0.5 * (alpha_lo.sin() + alpha_hi.sin());
    EnvelopeCut::Cuts {
        user,
        lower: (alpha_lo.sin(), -alpha_lo.cos()),
        upper: (alpha_hi.sin(), -alpha_hi.cos()),
        chord: (a, b),
    }
}

/// Variable map shared by the bounding and fixed-point programs.
#[derive(Debug, Clone)]
pub struct SitVars {
    pub common: Option<CVec>,
    pub private: Vec<Option<CVec>>,
    pub d: Vec<Option<usize>>,
    pub c: Vec<Option<usize>>,
    pub gamma_bits: Vec<Option<usize>>,
    pub s_bits: Option<usize>,
    pub t: usize,
}

impl SitVars {
    pub fn precoders(&self, x: &[f64], antennas: usize) -> crate::model::PrecoderSet {
        let zero = vec![C64::new(0.0, 0.0); antennas];
        crate::model::PrecoderSet {
            common: self.common.map(|v| v.value(x)).unwrap_or_else(|| zero.clone()),
            private: self
                .private
                .iter()
                .map(|p| p.map(|v| v.value(x)).unwrap_or_else(|| zero.clone()))
                .collect(),
        }
    }

    pub fn common_rates(&self, x: &[f64]) -> Vec<f64> {
        self.c.iter().map(|c| c.map(|i| x[i]).unwrap_or(0.0)).collect()
    }
}

enum RatePart<'a> {
    Box(&'a SearchBox),
    Fixed(&'a DualPoint),
}

/// Builds the SIT-dual feasibility core. In box mode this is the bounding
/// problem (lower-corner SINR coefficients, rate variables in log domain,
/// envelope cuts); in fixed mode it is the evaluation of the dual objective at
/// a single point (ray constraints on the common-stream arguments).
fn build_sit(problem: &ProblemSpec, layout: &StreamLayout, part: RatePart<'_>, delta: f64) -> (ConicProgram, SitVars) {
    let k_users = problem.users();
    let m = problem.antennas();
    let ch = &problem.channels;
    let mut prog = ConicProgram::new();

    let (sqrt_s, sqrt_g): (f64, Vec<f64>) = match &part {
        RatePart::Box(b) => (
            b.s.map(|s| s.lo.max(0.0).sqrt()).unwrap_or(0.0),
            b.gamma.iter().map(|g| g.lo.max(0.0).sqrt()).collect(),
        ),
        RatePart::Fixed(x) => (
            x.s.unwrap_or(0.0).max(0.0).sqrt(),
            x.gamma.iter().map(|g| g.max(0.0).sqrt()).collect(),
        ),
    };

    let common = layout.has_common.then(|| prog.add_complex("p_c", m));
    let private: Vec<Option<CVec>> = (0..k_users)
        .map(|k| layout.private[k].then(|| prog.add_complex(&format!("p_{}", k + 1), m)))
        .collect();
    let d: Vec<Option<usize>> = (0..k_users)
        .map(|k| (layout.has_common && k > 0).then(|| prog.add_var(&format!("d_{}", k + 1))))
        .collect();
    let c: Vec<Option<usize>> = (0..k_users)
        .map(|k| (layout.has_common && layout.common_share[k]).then(|| prog.add_var(&format!("C_{}", k + 1))))
        .collect();
    let (gamma_bits, s_bits) = match &part {
        RatePart::Box(_) => (
            (0..k_users)
                .map(|k| layout.private[k].then(|| prog.add_var(&format!("gbits_{}", k + 1))))
                .collect(),
            layout.has_common.then(|| prog.add_var("sbits")),
        ),
        RatePart::Fixed(_) => (vec![None; k_users], None),
    };
    let t = prog.add_var("t");
    let tv = LinExpr::var(t);

    // Rotation of the private streams and of the common stream at user 1.
    for k in 0..k_users {
        if let Some(p) = private[k] {
            prog.zero(p.inner_im(ch.h(k)), "rot-private-im");
            prog.nonneg(p.inner_re(ch.h(k)), "rot-private-re");
        }
    }
    if let Some(pc) = common {
        prog.zero(pc.inner_im(ch.h(0)), "rot-common-im");
        prog.nonneg(pc.inner_re(ch.h(0)), "rot-common-re");
    }

    let interference = |k: usize, skip: Option<usize>, coef: f64| -> Vec<LinExpr> {
        let mut rows = Vec::new();
        for (j, p) in private.iter().enumerate() {
            if Some(j) == skip {
                continue;
            }
            if let Some(p) = p {
                rows.push(p.inner_re(ch.h(k)).scale(coef));
                rows.push(p.inner_im(ch.h(k)).scale(coef));
            }
        }
        rows.push(LinExpr::constant(coef));
        rows
    };

    // Common-stream SINR cones.
    if let Some(pc) = common {
        prog.soc(pc.inner_re(ch.h(0)).add(&tv), interference(0, None, sqrt_s), "common-sinr-1");
        for k in 1..k_users {
            let dk = LinExpr::var(d[k].unwrap());
            prog.soc(dk.add(&tv), interference(k, None, sqrt_s), "common-sinr-k");
            prog.nonneg(LinExpr::var(d[k].unwrap()), "d-nonneg");
        }
    }
    // Private-stream SINR cones.
    for k in 0..k_users {
        if let Some(p) = private[k] {
            prog.soc(p.inner_re(ch.h(k)).add(&tv), interference(k, Some(k), sqrt_g[k]), "private-sinr");
        }
    }
    // Argument constraints on e_k = h_k^H p_c.
    if let Some(pc) = common {
        for k in 1..k_users {
            let re = pc.inner_re(ch.h(k));
            let im = pc.inner_im(ch.h(k));
            let dmt = LinExpr::var(d[k].unwrap()).add(&tv.clone().scale(-1.0));
            match &part {
                RatePart::Box(b) => {
                    let arc = b.alpha[k - 1];
                    if let EnvelopeCut::Cuts { lower, upper, chord, .. } = envelope_cuts(arc.lo, arc.hi, k) {
                        let lower_row = re.clone().scale(lower.0).add(&im.clone().scale(lower.1));
                        prog.nonneg(lower_row.scale(-1.0), "arg-cut-lower");
                        let upper_row = re.clone().scale(upper.0).add(&im.clone().scale(upper.1));
                        prog.nonneg(upper_row, "arg-cut-upper");
                        let r2 = chord.0 * chord.0 + chord.1 * chord.1;
                        let chord_row = re.clone().scale(chord.0).add(&im.clone().scale(chord.1));
                        prog.geq(chord_row, dmt.scale(r2), "arg-cut-chord");
                    }
                }
                RatePart::Fixed(x) => {
                    let a = x.alpha[k - 1];
                    let (sa, ca) = a.sin_cos();
                    prog.zero(re.clone().scale(sa).add(&im.clone().scale(-ca)), "arg-ray");
                    let radial = re.scale(ca).add(&im.scale(sa));
                    prog.nonneg(radial.clone(), "arg-ray-radius");
                    prog.geq(radial, dmt, "arg-ray-circle");
                }
            }
        }
    }

    // Rate bookkeeping in bits.
    let gamma_expr = |k: usize| -> LinExpr {
        match &part {
            RatePart::Box(_) => gamma_bits[k].map(LinExpr::var).unwrap_or_default(),
            RatePart::Fixed(x) => LinExpr::constant((1.0 + x.gamma[k].max(0.0)).log2()),
        }
    };
    let s_expr = || -> LinExpr {
        match &part {
            RatePart::Box(_) => s_bits.map(LinExpr::var).unwrap_or_default(),
            RatePart::Fixed(x) => LinExpr::constant((1.0 + x.s.unwrap_or(0.0).max(0.0)).log2()),
        }
    };
    let mut sum_c = LinExpr::zero();
    for k in 0..k_users {
        let qos = problem.qos[k];
        match c[k] {
            Some(ci) => {
                prog.nonneg(LinExpr::var(ci), "common-rate-nonneg");
                prog.geq(LinExpr::var(ci).add(&gamma_expr(k)), LinExpr::constant(qos), "qos");
                sum_c = sum_c.add(&LinExpr::var(ci));
            }
            None => prog.geq(gamma_expr(k), LinExpr::constant(qos), "qos"),
        }
    }
    if layout.has_common {
        prog.geq(s_expr(), sum_c.clone(), "common-rate-budget");
    }
    if let RatePart::Box(b) = &part {
        for k in 0..k_users {
            if let Some(gi) = gamma_bits[k] {
                let g = b.gamma[k];
                prog.geq(LinExpr::var(gi), LinExpr::constant((1.0 + g.lo).log2()), "gamma-box-lo");
                prog.geq(LinExpr::constant((1.0 + g.hi).log2()), LinExpr::var(gi), "gamma-box-hi");
            }
        }
        if let (Some(si), Some(s)) = (s_bits, b.s) {
            prog.geq(LinExpr::var(si), LinExpr::constant((1.0 + s.lo).log2()), "s-box-lo");
            prog.geq(LinExpr::constant((1.0 + s.hi).log2()), LinExpr::var(si), "s-box-hi");
        }
    }

    let mut all_p: Vec<LinExpr> = Vec::new();
    if let Some(pc) = common {
        all_p.extend(pc.entries());
    }
    for p in private.iter().flatten() {
        all_p.extend(p.entries());
    }

    // Objective level constraint: sum u (C + gamma') >= delta (mu ||p||^2 + P_c).
    if delta > 0.0 {
        let mut level = LinExpr::constant(-delta * problem.static_power);
        for k in 0..k_users {
            let u = problem.weights[k];
            if u == 0.0 {
                continue;
            }
            let ck = c[k].map(LinExpr::var).unwrap_or_default();
            level = level.add(&ck.add(&gamma_expr(k)).scale(u));
        }
        let dm = delta * problem.mu;
        if dm == 0.0 {
            prog.nonneg(level, "objective-level");
        } else {
            let mut rows = vec![level.scale(1.0 / (2.0 * dm)), LinExpr::constant(1.0)];
            rows.extend(all_p.iter().cloned());
            prog.push(ConeKind::RotatedSoc, rows, "objective-level");
        }
    }

    prog.soc(LinExpr::constant(problem.power.sqrt()), all_p, "power");
    prog.objective = tv;
    prog.sense = Sense::Minimize;

    (prog, SitVars { common, private, d, c, gamma_bits, s_bits, t })
}

/// Bounding problem over `bx`: minimizes the SIT-dual objective with SINR
/// coefficients at the box lower corner and envelope cuts on the arguments.
pub fn build_bounding_socp(bx: &SearchBox, delta: f64, problem: &ProblemSpec) -> Result<(ConicProgram, SitVars), String> {
    let layout = problem.layout().map_err(|e| e.to_string())?;
    bx.validate(problem.users(), layout.has_common)?;
    Ok(build_sit(problem, &layout, RatePart::Box(bx), delta))
}

/// Dual objective at a fixed point `(gamma_p, s, alpha)`.
pub fn build_gtilde_program(x: &DualPoint, delta: f64, problem: &ProblemSpec) -> Result<(ConicProgram, SitVars), String> {
    let layout = problem.layout().map_err(|e| e.to_string())?;
    if x.gamma.len() != problem.users() {
        return Err("dual point has wrong dimension".into());
    }
    if x.gamma.iter().chain(x.alpha.iter()).chain(x.s.iter()).any(|v| !v.is_finite()) {
        return Err("dual point must be finite".into());
    }
    if layout.has_common && x.alpha.len() + 1 != problem.users() {
        return Err("dual point needs K-1 argument entries".into());
    }
    Ok(build_sit(problem, &layout, RatePart::Fixed(x), delta))
}

/// Best common-rate split for fixed SINRs: maximize `sum u_k C_k` subject to
/// the objective level (skipped when `delta = 0`), the common budget and the
/// QoS-driven lower bounds.
pub fn build_common_rate_lp(
    gamma_p: &[f64],
    s: f64,
    total_power: f64,
    delta: f64,
    problem: &ProblemSpec,
) -> Result<(ConicProgram, Vec<Option<usize>>), String> {
    let layout = problem.layout().map_err(|e| e.to_string())?;
    let k_users = problem.users();
    if gamma_p.len() != k_users {
        return Err("gamma_p has wrong dimension".into());
    }
    let mut prog = ConicProgram::new();
    let c: Vec<Option<usize>> = (0..k_users)
        .map(|k| (layout.has_common && layout.common_share[k]).then(|| prog.add_var(&format!("C_{}", k + 1))))
        .collect();
    let mut sum_c = LinExpr::zero();
    let mut weighted = LinExpr::zero();
    let mut level = LinExpr::constant(-delta * (problem.mu * total_power + problem.static_power));
    for k in 0..k_users {
        let bits = (1.0 + gamma_p[k].max(0.0)).log2();
        let floor = (problem.qos[k] - bits).max(0.0);
        let ck = c[k].map(LinExpr::var).unwrap_or_default();
        prog.geq(ck.clone(), LinExpr::constant(floor), "qos-floor");
        sum_c = sum_c.add(&ck);
        weighted = weighted.add(&ck.clone().scale(problem.weights[k]));
        level = level.add(&ck.plus_const(bits).scale(problem.weights[k]));
    }
    if layout.has_common {
        prog.geq(LinExpr::constant((1.0 + s.max(0.0)).log2()), sum_c, "common-rate-budget");
    }
    if delta > 0.0 {
        prog.nonneg(level, "objective-level");
    }
    prog.objective = weighted;
    prog.sense = Sense::Maximize;
    Ok((prog, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSet, PrecoderSet, SchemeConfig};
    use crate::sitbb::{initial_box, Interval};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn tiny_lp() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x");
        p.geq(LinExpr::var(x), LinExpr::constant(1.0), "x>=1");
        p.objective = LinExpr::var(x);
        let s = solve(&p, 1e-8);
        assert_eq!(s.status, ConicStatus::Optimal);
        assert!((s.x[x] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn mrt_soc() {
        // min ||p|| s.t. Re(h^H p) >= 1, Im(h^H p) = 0 with h = [1, 0].
        let h = [c(1.0, 0.0), c(0.0, 0.0)];
        let mut prog = ConicProgram::new();
        let p = prog.add_complex("p", 2);
        let r = prog.add_var("r");
        prog.geq(p.inner_re(&h), LinExpr::constant(1.0), "gain");
        prog.zero(p.inner_im(&h), "phase");
        prog.soc(LinExpr::var(r), p.entries(), "norm");
        prog.objective = LinExpr::var(r);
        let s = solve(&prog, 1e-8);
        assert_eq!(s.status, ConicStatus::Optimal);
        assert!((s.objective - 1.0).abs() < 1e-7);
        let v = p.value(&s.x);
        assert!((v[0] - c(1.0, 0.0)).norm() < 1e-6 && v[1].norm() < 1e-6);
    }

    #[test]
    fn min_power_closed_form() {
        // min ||p||^2 s.t. |h^H p|^2 >= g has value g / ||h||^2 with p = sqrt(g) h / ||h||^2.
        let h = [c(0.3, -1.1), c(2.0, 0.4), c(-0.7, 0.2)];
        let hn: f64 = h.iter().map(|z| z.norm_sqr()).sum();
        let g: f64 = 2.5;
        let mut prog = ConicProgram::new();
        let p = prog.add_complex("p", 3);
        let y = prog.add_var("y");
        prog.geq(p.inner_re(&h), LinExpr::constant(g.sqrt()), "gain");
        prog.zero(p.inner_im(&h), "phase");
        let mut rows = vec![LinExpr::var(y).scale(0.5), LinExpr::constant(1.0)];
        rows.extend(p.entries());
        prog.push(ConeKind::RotatedSoc, rows, "epigraph");
        prog.objective = LinExpr::var(y);
        let s = solve(&prog, 1e-10);
        assert_eq!(s.status, ConicStatus::Optimal);
        assert!((s.objective - g / hn).abs() < 1e-8, "{} vs {}", s.objective, g / hn);
        let v = p.value(&s.x);
        for (vm, hm) in v.iter().zip(&h) {
            assert!((vm - hm * (g.sqrt() / hn)).norm() < 1e-6);
        }
    }

    #[test]
    fn exp_cone_log() {
        // max r s.t. r ln2 <= ln(1 + 3) gives r = 2.
        let mut prog = ConicProgram::new();
        let r = prog.add_var("r");
        prog.push(
            ConeKind::Exp,
            vec![LinExpr::var(r).scale(std::f64::consts::LN_2), LinExpr::constant(1.0), LinExpr::constant(4.0)],
            "log",
        );
        prog.objective = LinExpr::var(r);
        prog.sense = Sense::Maximize;
        let s = solve(&prog, 1e-9);
        assert_eq!(s.status, ConicStatus::Optimal);
        assert!((s.x[r] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_and_constant_rows() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x");
        p.geq(LinExpr::var(x), LinExpr::constant(2.0), "lo");
        p.geq(LinExpr::constant(1.0), LinExpr::var(x), "hi");
        assert_eq!(solve(&p, 1e-8).status, ConicStatus::Infeasible);

        let mut q = ConicProgram::new();
        q.nonneg(LinExpr::constant(-1.0), "never");
        assert_eq!(solve(&q, 1e-8).status, ConicStatus::Infeasible);
        let mut q = ConicProgram::new();
        q.nonneg(LinExpr::constant(1.0), "always");
        assert_eq!(solve(&q, 1e-8).status, ConicStatus::Optimal);
    }

    #[test]
    fn envelope_examples() {
        match envelope_cuts(0.0, 0.0, 1) {
            EnvelopeCut::Cuts { lower, upper, chord, .. } => {
                assert_eq!(lower, (0.0, -1.0));
                assert_eq!(upper, (0.0, -1.0));
                assert_eq!(chord, (1.0, 0.0));
            }
            _ => panic!(),
        }
        match envelope_cuts(0.0, PI / 2.0, 1) {
            EnvelopeCut::Cuts { chord, .. } => {
                assert!((chord.0 - 0.5).abs() < 1e-15 && (chord.1 - 0.5).abs() < 1e-15);
            }
            _ => panic!(),
        }
        assert_eq!(envelope_cuts(0.0, 1.5 * PI, 1), EnvelopeCut::TrivialRelaxation);
    }

    proptest! {
        #[test]
        fn envelope_is_sound(lo in 0.0..(2.0 * PI), width in 0.0..PI, frac in 0.0..1.0f64, r in 0.0..10.0f64, slack in 0.0..1.0f64) {
            let hi = (lo + width).min(2.0 * PI);
            let ang = lo + frac * (hi - lo);
            let e = C64::from_polar(r, ang);
            let dmt = r * (1.0 - slack) - slack;
            if let EnvelopeCut::Cuts { lower, upper, chord, .. } = envelope_cuts(lo, hi, 1) {
                prop_assert!(lower.0 * e.re + lower.1 * e.im <= 1e-9);
                prop_assert!(upper.0 * e.re + upper.1 * e.im >= -1e-9);
                let r2 = chord.0 * chord.0 + chord.1 * chord.1;
                prop_assert!(chord.0 * e.re + chord.1 * e.im - dmt * r2 >= -1e-9);
            }
        }
    }

    #[test]
    fn common_rate_lp_examples() {
        let ch = ChannelSet::new(vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]]).unwrap();
        let solve_lp = |u: Vec<f64>, qos: Vec<f64>| {
            let p = ProblemSpec::wsr(ch.clone(), u, qos, 10.0).unwrap();
            let (prog, idx) = build_common_rate_lp(&[1.0, 1.0], 3.0, 0.0, 0.0, &p).unwrap();
            let s = solve(&prog, 1e-9);
            assert_eq!(s.status, ConicStatus::Optimal);
            let cv: Vec<f64> = idx.iter().map(|i| s.x[i.unwrap()]).collect();
            (cv, s.objective)
        };
        let (cv, _) = solve_lp(vec![1.0, 1.0], vec![0.0, 0.0]);
        assert!((cv[0] + cv[1] - 2.0).abs() < 1e-6);
        let (cv, v) = solve_lp(vec![2.0, 1.0], vec![0.0, 0.0]);
        assert!((cv[0] - 2.0).abs() < 1e-6 && cv[1].abs() < 1e-6 && (v - 4.0).abs() < 1e-6);
        let (cv, _) = solve_lp(vec![1.0, 1.0], vec![3.0, 0.0]);
        assert!((cv[0] - 2.0).abs() < 1e-6 && cv[1].abs() < 1e-6);
    }

    fn seeded_problem() -> ProblemSpec {
        let ch = crate::experiments::gen_channels(3, 2, 2, &[1.0, 1.0]);
        ProblemSpec::wsr(ch, vec![1.0, 1.0], vec![0.0, 0.0], 10.0).unwrap()
    }

    #[test]
    fn mulp_program_has_no_common_blocks() {
        let p = seeded_problem().with_scheme(SchemeConfig::Mulp).unwrap();
        let bx = initial_box(&p);
        let (prog, vars) = build_bounding_socp(&bx, 0.0, &p).unwrap();
        assert!(vars.common.is_none() && vars.d.iter().all(|d| d.is_none()));
        assert!(prog.var_block("p_c").is_none());
        assert!(prog.blocks.iter().all(|b| !b.tag.starts_with("arg") && !b.tag.starts_with("common")));
    }

    #[test]
    fn zero_delta_omits_level_constraint() {
        let p = seeded_problem();
        let (prog, _) = build_bounding_socp(&initial_box(&p), 0.0, &p).unwrap();
        assert!(prog.blocks.iter().all(|b| b.tag != "objective-level"));
        let (prog, _) = build_bounding_socp(&initial_box(&p), 1.0, &p).unwrap();
        assert!(prog.blocks.iter().any(|b| b.tag == "objective-level"));
    }

    #[test]
    fn noma_program_pins_streams() {
        let order = crate::model::NomaOrder { strong: 0, weak: 1 };
        let p = seeded_problem().with_scheme(SchemeConfig::Noma2(Some(order))).unwrap();
        let (prog, vars) = build_bounding_socp(&initial_box(&p), 0.5, &p).unwrap();
        assert!(vars.private[1].is_none() && vars.c[0].is_none());
        assert!(vars.private[0].is_some() && vars.c[1].is_some());
        assert!(prog.var_block("p_2").is_none() && prog.var_block("C_1").is_none());
    }

    #[test]
    fn gtilde_zero_point_is_feasible() {
        let p = seeded_problem();
        let x = DualPoint { gamma: vec![0.0, 0.0], s: Some(0.0), alpha: vec![1.234] };
        let (prog, _) = build_gtilde_program(&x, 0.0, &p).unwrap();
        let s = solve(&prog, 1e-8);
        assert_eq!(s.status, ConicStatus::Optimal);
        assert!(s.objective <= 1e-7);
    }

    #[test]
    fn gtilde_rejects_unreachable_level() {
        let p = seeded_problem();
        let cap: f64 = (0..2).map(|k| (1.0 + p.power * p.channels.norm_sqr(k)).log2()).sum();
        let x = DualPoint { gamma: vec![1.0, 1.0], s: Some(1.0), alpha: vec![0.5] };
        let (prog, _) = build_gtilde_program(&x, 10.0 * cap, &p).unwrap();
        let s = solve(&prog, 1e-8);
        assert!(s.status == ConicStatus::Infeasible || s.objective > 0.0);
    }

    #[test]
    fn bounding_on_full_box_with_zero_level_is_nonpositive() {
        let p = seeded_problem();
        let (prog, _) = build_bounding_socp(&initial_box(&p), 0.0, &p).unwrap();
        let s = solve(&prog, 1e-8);
        assert_eq!(s.status, ConicStatus::Optimal);
        assert!(s.objective <= 1e-8);
    }

    #[test]
    fn bounding_is_monotone_in_the_box() {
        let p = seeded_problem();
        let full = initial_box(&p);
        let mut sub = full.clone();
        sub.gamma[0] = Interval::new(full.gamma[0].mid(), full.gamma[0].hi);
        sub.alpha[0] = Interval::new(0.0, PI);
        let beta = |b: &SearchBox| solve(&build_bounding_socp(b, 1.0, &p).unwrap().0, 1e-8).objective;
        assert!(beta(&sub) >= beta(&full) - 1e-7);
    }

    #[test]
    fn sit_vars_round_trip_precoders() {
        let p = seeded_problem();
        let (prog, vars) = build_bounding_socp(&initial_box(&p), 0.0, &p).unwrap();
        let x: Vec<f64> = (0..prog.n).map(|i| i as f64).collect();
        let pre: PrecoderSet = vars.precoders(&x, 2);
        assert_eq!(pre.common[0], c(0.0, 1.0));
        assert_eq!(pre.private.len(), 2);
        let dump = format!("{prog}");
        assert!(dump.contains("p_c") && dump.contains("[power]"));
    }
}
