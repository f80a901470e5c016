//! Physical problem description: channels, precoders, SINRs, rates and the
//! scheme restrictions (RSMA, MU-LP, two-user NOMA).
//!
//! All channels are noise-normalized, so every SINR is evaluated with unit
//! noise power. Rates are in bits per channel use (base-2 logarithms).

use std::fmt;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

/// Default absolute tolerance used when validating constraints.
pub const DEFAULT_FEAS_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid channel set: {0}")]
    Channel(String),
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("invalid scheme: {0}")]
    Scheme(String),
    #[error("channel file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e.to_string())
    }
}

/// `h^H p` for complex vectors of equal length.
pub fn inner(h: &[C64], p: &[C64]) -> C64 {
    h.iter().zip(p).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelMeta {
    pub seed: Option<u64>,
    pub variances: Option<Vec<f64>>,
}

/// Downlink channels `h_1..h_K` of an `M`-antenna transmitter, already divided
/// by the noise standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    users: Vec<Vec<C64>>,
    pub meta: ChannelMeta,
}

impl ChannelSet {
    pub fn new(users: Vec<Vec<C64>>) -> Result<Self, ModelError> {
        if users.is_empty() {
            return Err(ModelError::Channel("K must be at least 1".into()));
        }
        let m = users[0].len();
        if m == 0 {
            return Err(ModelError::Channel("M must be at least 1".into()));
        }
        if users.iter().any(|h| h.len() != m) {
            return Err(ModelError::Dimension("all channels must have length M".into()));
        }
        if users
            .iter()
            .flatten()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(ModelError::Channel("channel entries must be finite".into()));
        }
        if users.iter().all(|h| norm_sqr(h) == 0.0) {
            return Err(ModelError::Channel("at least one channel must be nonzero".into()));
        }
        Ok(Self {
            users,
            meta: ChannelMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: ChannelMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn users(&self) -> usize {
        self.users.len()
    }

    pub fn antennas(&self) -> usize {
        self.users[0].len()
    }

    pub fn h(&self, k: usize) -> &[C64] {
        &self.users[k]
    }

    pub fn norm_sqr(&self, k: usize) -> f64 {
        norm_sqr(&self.users[k])
    }

    /// Multiplies every channel by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            users: self
                .users
                .iter()
                .map(|h| h.iter().map(|z| z * c).collect())
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Writes one record in the text channel format.
    pub fn write_record<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        if let Some(seed) = self.meta.seed {
            writeln!(out, "# seed={seed}")?;
        }
        if let Some(v) = &self.meta.variances {
            let list: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "# variances={}", list.join(","))?;
        }
        writeln!(out, "{} {}", self.users(), self.antennas())?;
        for h in &self.users {
            let row: Vec<String> = h.iter().map(|z| format!("{},{}", z.re, z.im)).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }

    /// Parses every record of a channel file. Records are whitespace-separated
    /// tokens: `K M` followed by `K*M` entries `re,im` (user-major). Lines
    /// starting with `#` carry `seed=` / `variances=` metadata for the next record.
    pub fn read_records<R: BufRead>(input: R) -> Result<Vec<ChannelSet>, ModelError> {
        let mut records = Vec::new();
        let mut meta = ChannelMeta::default();
        let mut header: Option<(usize, usize)> = None;
        let mut entries: Vec<C64> = Vec::new();
        let mut pending_head: Vec<usize> = Vec::new();

        for (idx, line) in input.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| ModelError::Io(e.to_string()))?;
            let trimmed = line.trim();
            if let Some(rest) = trimmed.strip_prefix('#') {
                parse_meta(rest.trim(), &mut meta, lineno)?;
                continue;
            }
            for tok in trimmed.split_whitespace() {
                match header {
                    None => {
                        let v: usize = tok.parse().map_err(|_| ModelError::Parse {
                            line: lineno,
                            msg: format!("expected integer, got {tok:?}"),
                        })?;
                        pending_head.push(v);
                        if pending_head.len() == 2 {
                            header = Some((pending_head[0], pending_head[1]));
                            pending_head.clear();
                        }
                    }
                    Some((k, m)) => {
                        entries.push(parse_complex(tok, lineno)?);
                        if entries.len() == k * m {
                            let users = entries.chunks(m).map(|c| c.to_vec()).collect();
                            let set = ChannelSet::new(users)?.with_meta(std::mem::take(&mut meta));
                            records.push(set);
                            entries.clear();
                            header = None;
                        }
                    }
                }
            }
        }
        if header.is_some() || !pending_head.is_empty() {
            return Err(ModelError::Parse {
                line: 0,
                msg: "truncated record at end of input".into(),
            });
        }
        Ok(records)
    }
}

fn parse_meta(rest: &str, meta: &mut ChannelMeta, line: usize) -> Result<(), ModelError> {
    let bad = |msg: String| ModelError::Parse { line, msg };
    if let Some(v) = rest.strip_prefix("seed=") {
        meta.seed = Some(v.trim().parse().map_err(|_| bad(format!("bad seed {v:?}")))?);
    } else if let Some(v) = rest.strip_prefix("variances=") {
        let vals: Result<Vec<f64>, _> = v.split(',').map(|x| x.trim().parse::<f64>()).collect();
        meta.variances = Some(vals.map_err(|_| bad(format!("bad variances {v:?}")))?);
    }
    Ok(())
}

fn parse_complex(tok: &str, line: usize) -> Result<C64, ModelError> {
    let err = || ModelError::Parse {
        line,
        msg: format!("expected re,im pair, got {tok:?}"),
    };
    let (re, im) = tok.split_once(',').ok_or_else(err)?;
    Ok(C64::new(
        re.parse().map_err(|_| err())?,
        im.parse().map_err(|_| err())?,
    ))
}

/// Common precoder `p_c` and private precoders `p_1..p_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet {
    pub common: Vec<C64>,
    pub private: Vec<Vec<C64>>,
}

impl PrecoderSet {
    pub fn zeros(users: usize, antennas: usize) -> Self {
        Self {
            common: vec![C64::new(0.0, 0.0); antennas],
            private: vec![vec![C64::new(0.0, 0.0); antennas]; users],
        }
    }

    pub fn total_power(&self) -> f64 {
        norm_sqr(&self.common) + self.private.iter().map(|p| norm_sqr(p)).sum::<f64>()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            common: self.common.iter().map(|z| z * c).collect(),
            private: self
                .private
                .iter()
                .map(|p| p.iter().map(|z| z * c).collect())
                .collect(),
        }
    }

    /// Rotates every stream so that `h_k^H p_k` and `h_1^H p_c` are real and
    /// nonnegative. SINRs are unchanged.
    pub fn rotated_canonical(&self, channels: &ChannelSet) -> Self {
        let rotate = |p: &[C64], h: &[C64]| -> Vec<C64> {
            let g = inner(h, p);
            if g.norm() == 0.0 {
                return p.to_vec();
            }
            let phase = C64::from_polar(1.0, -g.arg());
            p.iter().map(|z| z * phase).collect()
        };
        Self {
            common: rotate(&self.common, channels.h(0)),
            private: self
                .private
                .iter()
                .enumerate()
                .map(|(k, p)| rotate(p, channels.h(k)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sinrs {
    pub common: Vec<f64>,
    pub private: Vec<f64>,
}

/// Common and private SINRs of every user under unit noise.
pub fn compute_sinrs(channels: &ChannelSet, precoders: &PrecoderSet) -> Result<Sinrs, ModelError> {
    let k = channels.users();
    let m = channels.antennas();
    if precoders.private.len() != k {
        return Err(ModelError::Dimension(format!(
            "{} private precoders for {k} users",
            precoders.private.len()
        )));
    }
    if precoders.common.len() != m || precoders.private.iter().any(|p| p.len() != m) {
        return Err(ModelError::Dimension(format!("precoders must have length {m}")));
    }
    let mut common = Vec::with_capacity(k);
    let mut private = Vec::with_capacity(k);
    for user in 0..k {
        let h = channels.h(user);
        let gains: Vec<f64> = precoders.private.iter().map(|p| inner(h, p).norm_sqr()).collect();
        let all: f64 = gains.iter().sum();
        let desired = gains[user];
        common.push(inner(h, &precoders.common).norm_sqr() / (all + 1.0));
        private.push(desired / (all - desired + 1.0));
    }
    Ok(Sinrs { common, private })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct NomaOrder {
    /// User that decodes the other's message and keeps a private stream.
    pub strong: usize,
    /// User whose whole message travels on the common stream.
    pub weak: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeConfig {
    Rsma,
    Mulp,
    /// Two-user NOMA. `None` means both decoding orders are tried.
    Noma2(Option<NomaOrder>),
}

impl SchemeConfig {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeConfig::Rsma => "rsma",
            SchemeConfig::Mulp => "mulp",
            SchemeConfig::Noma2(_) => "noma",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "rsma" => Ok(SchemeConfig::Rsma),
            "mulp" | "mu-lp" => Ok(SchemeConfig::Mulp),
            "noma" | "noma2" => Ok(SchemeConfig::Noma2(None)),
            other => Err(ModelError::Scheme(format!("unknown scheme {other:?}"))),
        }
    }

    pub fn has_common(&self) -> bool {
        !matches!(self, SchemeConfig::Mulp)
    }
}

impl fmt::Display for SchemeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which streams and common-rate shares exist under a resolved scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamLayout {
    pub has_common: bool,
    pub private: Vec<bool>,
    pub common_share: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Wsr,
    Ee,
}

/// One instance of the combined WSR / EE problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub channels: ChannelSet,
    pub weights: Vec<f64>,
    pub qos: Vec<f64>,
    pub power: f64,
    pub mu: f64,
    pub static_power: f64,
    pub scheme: SchemeConfig,
    pub objective: ObjectiveKind,
}

impl ProblemSpec {
    /// Weighted sum rate maximization (`mu = 0`, static power 1).
    pub fn wsr(
        channels: ChannelSet,
        weights: Vec<f64>,
        qos: Vec<f64>,
        power: f64,
    ) -> Result<Self, ModelError> {
        let p = Self {
            channels,
            weights,
            qos,
            power,
            mu: 0.0,
            static_power: 1.0,
            scheme: SchemeConfig::Rsma,
            objective: ObjectiveKind::Wsr,
        };
        p.validate()?;
        Ok(p)
    }

    /// Energy efficiency maximization (unit weights).
    pub fn ee(
        channels: ChannelSet,
        qos: Vec<f64>,
        power: f64,
        mu: f64,
        static_power: f64,
    ) -> Result<Self, ModelError> {
        let k = channels.users();
        let p = Self {
            channels,
            weights: vec![1.0; k],
            qos,
            power,
            mu,
            static_power,
            scheme: SchemeConfig::Rsma,
            objective: ObjectiveKind::Ee,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_scheme(self, scheme: SchemeConfig) -> Result<Self, ModelError> {
        apply_scheme(scheme, &self)
    }

    pub fn users(&self) -> usize {
        self.channels.users()
    }

    pub fn antennas(&self) -> usize {
        self.channels.antennas()
    }

    fn validate(&self) -> Result<(), ModelError> {
        let k = self.users();
        if self.weights.len() != k || self.qos.len() != k {
            return Err(ModelError::Dimension(format!(
                "weights and qos must have length K={k}"
            )));
        }
        if self.weights.iter().any(|u| !(*u >= 0.0) || !u.is_finite()) {
            return Err(ModelError::Problem("weights must be finite and nonnegative".into()));
        }
        if self.weights.iter().all(|u| *u == 0.0) {
            return Err(ModelError::Problem("weight vector must be nonzero".into()));
        }
        if self.qos.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(ModelError::Problem("qos thresholds must be finite and >= 0".into()));
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            return Err(ModelError::Problem("power budget must be positive".into()));
        }
        if !(self.mu >= 0.0) || !(self.static_power > 0.0) {
            return Err(ModelError::Problem("need mu >= 0 and static power > 0".into()));
        }
        match self.objective {
            ObjectiveKind::Wsr if self.mu != 0.0 || self.static_power != 1.0 => Err(
                ModelError::Problem("WSR mode requires mu = 0 and static power = 1".into()),
            ),
            ObjectiveKind::Ee if self.weights.iter().any(|u| *u != 1.0) => {
                Err(ModelError::Problem("EE mode requires unit weights".into()))
            }
            _ => Ok(()),
        }
    }

    /// Stream layout for a resolved scheme. Fails for NOMA without a fixed order.
    pub fn layout(&self) -> Result<StreamLayout, ModelError> {
        let k = self.users();
        Ok(match self.scheme {
            SchemeConfig::Rsma => StreamLayout {
                has_common: true,
                private: vec![true; k],
                common_share: vec![true; k],
            },
            SchemeConfig::Mulp => StreamLayout {
                has_common: false,
                private: vec![true; k],
                common_share: vec![false; k],
            },
            SchemeConfig::Noma2(Some(order)) => StreamLayout {
                has_common: true,
                private: (0..k).map(|i| i == order.strong).collect(),
                common_share: (0..k).map(|i| i == order.weak).collect(),
            },
            SchemeConfig::Noma2(None) => {
                return Err(ModelError::Scheme("NOMA decoding order is unresolved".into()))
            }
        })
    }

    /// Decoding orders to solve for this problem, strongest channel first.
    pub fn noma_orders(&self) -> Vec<NomaOrder> {
        match self.scheme {
            SchemeConfig::Noma2(Some(o)) => vec![o],
            SchemeConfig::Noma2(None) => {
                let (a, b) = if self.channels.norm_sqr(1) > self.channels.norm_sqr(0) {
                    (1, 0)
                } else {
                    (0, 1)
                };
                vec![
                    NomaOrder { strong: a, weak: b },
                    NomaOrder { strong: b, weak: a },
                ]
            }
            _ => Vec::new(),
        }
    }

    /// Rescales to unit power budget: `h' = sqrt(P) h`, `P' = 1`, `mu' = mu P`.
    /// Returns the factor `c` such that precoders map back as `p = c p'`.
    pub fn normalized(&self) -> (ProblemSpec, f64) {
        let c = self.power.sqrt();
        let mut p = self.clone();
        p.channels = self.channels.scaled(c);
        p.power = 1.0;
        p.mu = self.mu * self.power;
        (p, c)
    }
}

/// Returns `problem` restricted to `scheme`.
pub fn apply_scheme(scheme: SchemeConfig, problem: &ProblemSpec) -> Result<ProblemSpec, ModelError> {
    if let SchemeConfig::Noma2(order) = scheme {
        if problem.users() != 2 {
            return Err(ModelError::Scheme(format!(
                "two-user NOMA needs K = 2, got K = {}",
                problem.users()
            )));
        }
        if let Some(o) = order {
            if o.strong == o.weak || o.strong > 1 || o.weak > 1 {
                return Err(ModelError::Scheme("NOMA order must be a permutation of users".into()));
            }
        }
    }
    let mut p = problem.clone();
    p.scheme = scheme;
    Ok(p)
}

/// Combined objective: weighted rate over consumed power. Equals the weighted
/// sum rate when `mu = 0` and the static power is 1.
pub fn objective_value(problem: &ProblemSpec, precoders: &PrecoderSet, common: &[f64], gamma_p: &[f64]) -> f64 {
    let num: f64 = problem
        .weights
        .iter()
        .zip(common)
        .zip(gamma_p)
        .map(|((u, c), g)| u * (c + (1.0 + g).log2()))
        .sum();
    num / (problem.mu * precoders.total_power() + problem.static_power)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintId {
    Power,
    CommonRate,
    CommonNonneg(usize),
    Qos(usize),
    SchemeCommonStream,
    SchemeCommonShare(usize),
    SchemePrivateStream(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: ConstraintId,
    pub magnitude: f64,
}

/// A candidate solution with every derived quantity recomputed from its precoders.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionReport {
    pub precoders: PrecoderSet,
    pub common_rates: Vec<f64>,
    pub gamma_p: Vec<f64>,
    pub gamma_c: Vec<f64>,
    pub rates: Vec<f64>,
    pub objective: f64,
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

impl SolutionReport {
    pub fn evaluate(
        problem: &ProblemSpec,
        precoders: PrecoderSet,
        common_rates: Vec<f64>,
        feas_tol: f64,
    ) -> Result<Self, ModelError> {
        let k = problem.users();
        if common_rates.len() != k {
            return Err(ModelError::Dimension(format!("{} common rates for {k} users", common_rates.len())));
        }
        let sinrs = compute_sinrs(&problem.channels, &precoders)?;
        let rates: Vec<f64> = (0..k)
            .map(|i| common_rates[i] + (1.0 + sinrs.private[i]).log2())
            .collect();
        let mut violations = Vec::new();
        let mut flag = |constraint, magnitude: f64| {
            if magnitude > feas_tol {
                violations.push(Violation { constraint, magnitude });
            }
        };

        flag(ConstraintId::Power, precoders.total_power() - problem.power);
        let min_common = sinrs.common.iter().cloned().fold(f64::INFINITY, f64::min);
        let total_c: f64 = common_rates.iter().sum();
        flag(ConstraintId::CommonRate, total_c - (1.0 + min_common).log2());
        for i in 0..k {
            flag(ConstraintId::CommonNonneg(i), -common_rates[i]);
            flag(ConstraintId::Qos(i), problem.qos[i] - rates[i]);
        }
        match problem.scheme {
            SchemeConfig::Mulp => {
                flag(ConstraintId::SchemeCommonStream, norm_sqr(&precoders.common).sqrt());
                for i in 0..k {
                    flag(ConstraintId::SchemeCommonShare(i), common_rates[i].abs());
                }
            }
            SchemeConfig::Noma2(Some(o)) => {
                flag(ConstraintId::SchemePrivateStream(o.weak), norm_sqr(&precoders.private[o.weak]).sqrt());
                flag(ConstraintId::SchemeCommonShare(o.strong), common_rates[o.strong].abs());
            }
            _ => {}
        }

        let objective = objective_value(problem, &precoders, &common_rates, &sinrs.private);
        Ok(Self {
            precoders,
            common_rates,
            gamma_p: sinrs.private,
            gamma_c: sinrs.common,
            rates,
            objective,
            feasible: violations.is_empty(),
            violations,
        })
    }

    /// Maps precoders from a normalized problem back to the original scale.
    pub fn rescaled(&self, problem: &ProblemSpec, c: f64, feas_tol: f64) -> Result<Self, ModelError> {
        Self::evaluate(problem, self.precoders.scaled(c), self.common_rates.clone(), feas_tol)
    }
}

/// Re-derives SINRs, rates and constraint violations of `report` under `problem`.
pub fn check_feasibility(problem: &ProblemSpec, report: &SolutionReport, feas_tol: f64) -> Result<SolutionReport, ModelError> {
    SolutionReport::evaluate(problem, report.precoders.clone(), report.common_rates.clone(), feas_tol)
}

/// Largest common-rate allocation for fixed SINRs: every user gets its QoS
/// deficit, the remaining common budget goes to the largest weight among users
/// allowed a share. `None` when the deficits exceed the budget.
pub fn greedy_common_rates(problem: &ProblemSpec, layout: &StreamLayout, gamma_p: &[f64], common_sinr: f64) -> Option<Vec<f64>> {
    let k = problem.users();
    let budget = if layout.has_common { (1.0 + common_sinr.max(0.0)).log2() } else { 0.0 };
    let mut c = vec![0.0; k];
    for i in 0..k {
        let deficit = (problem.qos[i] - (1.0 + gamma_p[i]).log2()).max(0.0);
        if deficit > 0.0 && !layout.common_share[i] {
            return None;
        }
        c[i] = deficit;
    }
    let used: f64 = c.iter().sum();
    if used > budget {
        return None;
    }
    let best = (0..k)
        .filter(|&i| layout.common_share[i])
        .max_by(|&a, &b| problem.weights[a].total_cmp(&problem.weights[b]).then(b.cmp(&a)));
    if let Some(i) = best {
        c[i] += budget - used;
    }
    Some(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn orthogonal() -> ChannelSet {
        ChannelSet::new(vec![vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]]).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, m: usize) -> Vec<C64> {
        (0..m).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn sinrs_on_orthogonal_channels() {
        let pre = PrecoderSet {
            common: vec![c(0.0, 0.0); 2],
            private: vec![vec![c(2.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]],
        };
        let s = compute_sinrs(&orthogonal(), &pre).unwrap();
        assert_eq!(s.private, vec![4.0, 1.0]);
        assert_eq!(s.common, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_precoders_give_zero_sinr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = ChannelSet::new(vec![random_vec(&mut rng, 3), random_vec(&mut rng, 3)]).unwrap();
        let s = compute_sinrs(&ch, &PrecoderSet::zeros(2, 3)).unwrap();
        assert!(s.private.iter().chain(&s.common).all(|&x| x == 0.0));
    }

    #[test]
    fn sinrs_match_independent_formula() {
        // Written out with explicit real arithmetic rather than complex helpers.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let h = vec![random_vec(&mut rng, 2), random_vec(&mut rng, 2)];
            let pre = PrecoderSet {
                common: random_vec(&mut rng, 2),
                private: vec![random_vec(&mut rng, 2), random_vec(&mut rng, 2)],
            };
            let gain = |hk: &[C64], p: &[C64]| {
                let mut re = 0.0;
                let mut im = 0.0;
                for m in 0..hk.len() {
                    re += hk[m].re * p[m].re + hk[m].im * p[m].im;
                    im += hk[m].re * p[m].im - hk[m].im * p[m].re;
                }
                re * re + im * im
            };
            let s = compute_sinrs(&ChannelSet::new(h.clone()).unwrap(), &pre).unwrap();
            for k in 0..2 {
                let o = 1 - k;
                let gp = gain(&h[k], &pre.private[k]) / (gain(&h[k], &pre.private[o]) + 1.0);
                let gc = gain(&h[k], &pre.common)
                    / (gain(&h[k], &pre.private[0]) + gain(&h[k], &pre.private[1]) + 1.0);
                assert!((s.private[k] - gp).abs() < 1e-12);
                assert!((s.common[k] - gc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinr_dimension_mismatch() {
        let pre = PrecoderSet::zeros(3, 2);
        assert!(matches!(compute_sinrs(&orthogonal(), &pre), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn sinrs_invariant_under_channel_power_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ch = ChannelSet::new(vec![random_vec(&mut rng, 2), random_vec(&mut rng, 2)]).unwrap();
        let pre = PrecoderSet {
            common: random_vec(&mut rng, 2),
            private: vec![random_vec(&mut rng, 2), random_vec(&mut rng, 2)],
        };
        let scale = 7.5;
        let a = compute_sinrs(&ch, &pre).unwrap();
        let b = compute_sinrs(&ch.scaled(scale), &pre.scaled(1.0 / scale)).unwrap();
        for (x, y) in a.private.iter().chain(&a.common).zip(b.private.iter().chain(&b.common)) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn rotation_keeps_sinrs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ch = ChannelSet::new(vec![random_vec(&mut rng, 3), random_vec(&mut rng, 3)]).unwrap();
        let pre = PrecoderSet {
            common: random_vec(&mut rng, 3),
            private: vec![random_vec(&mut rng, 3), random_vec(&mut rng, 3)],
        };
        let rot = pre.rotated_canonical(&ch);
        let a = compute_sinrs(&ch, &pre).unwrap();
        let b = compute_sinrs(&ch, &rot).unwrap();
        for (x, y) in a.private.iter().chain(&a.common).zip(b.private.iter().chain(&b.common)) {
            assert!((x - y).abs() < 1e-12);
        }
        for k in 0..2 {
            let g = inner(ch.h(k), &rot.private[k]);
            assert!(g.im.abs() < 1e-12 && g.re >= 0.0);
        }
        assert!(inner(ch.h(0), &rot.common).im.abs() < 1e-12);
    }

    fn two_user(qos: Vec<f64>) -> ProblemSpec {
        ProblemSpec::wsr(orthogonal(), vec![1.0, 1.0], qos, 10.0).unwrap()
    }

    #[test]
    fn objective_arithmetic() {
        let p = two_user(vec![0.0, 0.0]);
        let pre = PrecoderSet::zeros(2, 2);
        assert!((objective_value(&p, &pre, &[0.0, 0.0], &[1.0, 3.0]) - 3.0).abs() < 1e-15);

        let mut p2 = p.clone();
        p2.weights = vec![1.0, 0.0];
        assert!((objective_value(&p2, &pre, &[2.0, 5.0], &[0.0, 7.0]) - 2.0).abs() < 1e-15);

        let ee = ProblemSpec::ee(orthogonal(), vec![0.0, 0.0], 10.0, 0.35, 1.0).unwrap();
        let pre = PrecoderSet {
            common: vec![c(1.0, 0.0), c(0.0, 0.0)],
            private: vec![vec![c(0.0, 1.0), c(0.0, 0.0)], vec![c(0.0, 0.0); 2]],
        };
        let v = objective_value(&ee, &pre, &[1.0, 0.0], &[1.0, 1.0]);
        assert!((v - 3.0 / 1.7).abs() < 1e-12);
        assert!((v - 1.7647).abs() < 1e-4);
    }

    #[test]
    fn zero_precoder_feasibility() {
        let pre = PrecoderSet::zeros(2, 2);
        let r = SolutionReport::evaluate(&two_user(vec![0.0, 0.0]), pre.clone(), vec![0.0, 0.0], 1e-6).unwrap();
        assert!(r.feasible);
        assert_eq!(r.objective, 0.0);

        let r = SolutionReport::evaluate(&two_user(vec![1.0, 1.0]), pre, vec![0.0, 0.0], 1e-6).unwrap();
        assert!(!r.feasible);
        assert!(r.violations.iter().any(|v| v.constraint == ConstraintId::Qos(0)));
        assert!(r.violations.iter().any(|v| v.constraint == ConstraintId::Qos(1)));
    }

    #[test]
    fn scheme_restrictions() {
        let p = two_user(vec![0.0, 0.0]);
        assert!(apply_scheme(SchemeConfig::Noma2(None), &p).is_ok());
        let ch3 = ChannelSet::new(vec![vec![c(1.0, 0.0)]; 3]).unwrap();
        let p3 = ProblemSpec::wsr(ch3, vec![1.0; 3], vec![0.0; 3], 1.0).unwrap();
        assert!(matches!(apply_scheme(SchemeConfig::Noma2(None), &p3), Err(ModelError::Scheme(_))));

        let mulp = p.clone().with_scheme(SchemeConfig::Mulp).unwrap();
        let layout = mulp.layout().unwrap();
        assert!(!layout.has_common && layout.common_share.iter().all(|s| !s));

        let order = NomaOrder { strong: 0, weak: 1 };
        let noma = p.with_scheme(SchemeConfig::Noma2(Some(order))).unwrap();
        let layout = noma.layout().unwrap();
        assert_eq!(layout.private, vec![true, false]);
        assert_eq!(layout.common_share, vec![false, true]);

        let mut pre = PrecoderSet::zeros(2, 2);
        pre.private[1][0] = c(1.0, 0.0);
        let r = SolutionReport::evaluate(&noma, pre, vec![0.0, 0.0], 1e-6).unwrap();
        assert!(r.violations.iter().any(|v| v.constraint == ConstraintId::SchemePrivateStream(1)));
    }

    #[test]
    fn construction_invariants() {
        assert!(ChannelSet::new(vec![]).is_err());
        assert!(ChannelSet::new(vec![vec![c(0.0, 0.0)]]).is_err());
        assert!(ChannelSet::new(vec![vec![c(f64::NAN, 0.0)]]).is_err());
        let ch = orthogonal();
        assert!(ProblemSpec::wsr(ch.clone(), vec![0.0, 0.0], vec![0.0, 0.0], 1.0).is_err());
        assert!(ProblemSpec::wsr(ch.clone(), vec![1.0, 1.0], vec![0.0, 0.0], 0.0).is_err());
        assert!(ProblemSpec::ee(ch, vec![0.0, 0.0], 1.0, 0.35, 0.0).is_err());
    }

    #[test]
    fn channel_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = ChannelSet::new(vec![random_vec(&mut rng, 3), random_vec(&mut rng, 3)])
            .unwrap()
            .with_meta(ChannelMeta { seed: Some(42), variances: Some(vec![1.0, 0.09]) });
        let mut buf = Vec::new();
        ch.write_record(&mut buf).unwrap();
        ch.write_record(&mut buf).unwrap();
        let back = ChannelSet::read_records(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], ch);
        assert_eq!(back[1], ch);
    }

    #[test]
    fn channel_file_errors() {
        assert!(ChannelSet::read_records("2 1\n1,0\n".as_bytes()).is_err());
        assert!(ChannelSet::read_records("1 1\n1;0\n".as_bytes()).is_err());
        assert!(ChannelSet::read_records("x 1\n".as_bytes()).is_err());
    }

    #[test]
    fn greedy_allocation() {
        let p = two_user(vec![0.0, 0.0]);
        let layout = p.layout().unwrap();
        let c = greedy_common_rates(&p, &layout, &[1.0, 1.0], 3.0).unwrap();
        assert!((c.iter().sum::<f64>() - 2.0).abs() < 1e-15);

        let mut pw = p.clone();
        pw.weights = vec![2.0, 1.0];
        assert_eq!(greedy_common_rates(&pw, &layout, &[1.0, 1.0], 3.0).unwrap(), vec![2.0, 0.0]);

        let pq = two_user(vec![3.0, 0.0]);
        assert_eq!(greedy_common_rates(&pq, &layout, &[1.0, 1.0], 3.0).unwrap(), vec![2.0, 0.0]);
        let pq = two_user(vec![4.0, 0.0]);
        assert!(greedy_common_rates(&pq, &layout, &[1.0, 1.0], 3.0).is_none());
    }
}
