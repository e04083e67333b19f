//! Perception games: multistage runs cut into sets by a termination rule,
//! quasirandomness and resonance statistics on the dialogue sequences, and
//! detection of affine invariants of (ω, θ) windows.

use std::fmt;
use std::sync::Arc;

use crate::dialogue::WindowFunctionals;
use crate::engine::{GameSpec, Grid, Trajectory};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tactics::{run_windows, CommentRule, Segmenter, TacticalTrace, WindowEnd};

#[derive(Debug, Clone, Copy)]
pub struct SetInput<'a> {
    pub t: f64,
    pub t_start: f64,
    pub phi: &'a [f64],
    pub phi_start: &'a [f64],
    /// Dialogue state in force when the set began.
    pub omega_start: &'a [f64],
}

/// Ends a set when the predicate holds, or when the set has lasted `guard`.
#[derive(Clone)]
pub struct SetTerminationRule {
    pub guard: f64,
    predicate: Arc<dyn Fn(&SetInput<'_>) -> bool + Send + Sync>,
}

impl fmt::Debug for SetTerminationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SetTerminationRule").field("guard", &self.guard).finish_non_exhaustive()
    }
}

impl SetTerminationRule {
    pub fn new<F>(guard: f64, predicate: F) -> Self
    where
        F: Fn(&SetInput<'_>) -> bool + Send + Sync + 'static,
    {
        SetTerminationRule {
            guard,
            predicate: Arc::new(predicate),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.guard > 0.0) {
            return Err(Error::contract(format!("set guard must be positive, got {}", self.guard)));
        }
        Ok(())
    }

    pub fn fires(&self, input: &SetInput<'_>) -> bool {
        (self.predicate)(input)
    }

    /// Guard length in whole steps of `h`, at least one.
    pub fn guard_steps(&self, h: f64) -> usize {
        if self.guard.is_infinite() {
            return usize::MAX;
        }
        ((self.guard / h - 1e-9).ceil() as usize).max(1)
    }
}

#[derive(Clone, Debug)]
pub struct PerceptionSpec {
    pub game: GameSpec,
    pub sets: SetTerminationRule,
    pub functionals: WindowFunctionals,
    /// Comment rule; frozen for a plain perception game.
    pub rule: CommentRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetRecord {
    pub start_node: usize,
    pub end_node: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub phi_start: Vec<f64>,
    pub phi_end: Vec<f64>,
    pub end: WindowEnd,
}

impl SetRecord {
    pub fn guarded(&self) -> bool {
        self.end == WindowEnd::Guard
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionRun {
    pub trace: TacticalTrace,
    pub sets: Vec<SetRecord>,
}

pub fn run_perception_sets(spec: &PerceptionSpec, horizon: f64, h: f64) -> Result<PerceptionRun> {
    let grid = Grid::new(spec.game.t0, horizon, h)?;
    let trace = run_windows(
        &spec.game,
        grid,
        &Segmenter::Sets(spec.sets.clone()),
        &spec.functionals,
        Some(&spec.rule),
    )?;
    let sets = set_records(&trace);
    Ok(PerceptionRun { trace, sets })
}

fn set_records(trace: &TacticalTrace) -> Vec<SetRecord> {
    let tr = &trace.transcript;
    let traj = &trace.trajectory;
    tr.nodes
        .windows(2)
        .zip(&trace.ends)
        .map(|(w, end)| SetRecord {
            start_node: w[0],
            end_node: w[1],
            t_start: traj.times[w[0]],
            t_end: traj.times[w[1]],
            phi_start: traj.phi[w[0]].clone(),
            phi_end: traj.phi[w[1]].clone(),
            end: *end,
        })
        .collect()
}

/// Pearson correlation, or `None` when either sample has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub const QUASIRANDOM_THRESHOLD: f64 = 0.3;
pub const RESONANCE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuasirandomTest {
    /// Lag-1 serial correlation; 0 when degenerate.
    pub autocorr: f64,
    pub degenerate: bool,
    pub threshold: f64,
    pub quasirandom: bool,
}

/// Lag-1 serial correlation test: quasirandom iff |r| < threshold.
pub fn test_quasirandom(seq: &[f64], threshold: f64) -> Result<QuasirandomTest> {
    if seq.len() < 8 {
        return Err(Error::contract(format!("quasirandom test needs at least 8 values, got {}", seq.len())));
    }
    let r = pearson(&seq[..seq.len() - 1], &seq[1..]);
    Ok(QuasirandomTest {
        autocorr: r.unwrap_or(0.0),
        degenerate: r.is_none(),
        threshold,
        quasirandom: r.is_some_and(|r| r.abs() < threshold),
    })
}

/// Whether ε drifts slower than the sets change: the mean ε variation per
/// window must not exceed the range ε covers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimescaleCheck {
    pub variation_per_window: f64,
    pub eps_range: f64,
    pub satisfied: bool,
}

pub fn timescale_check(eps: &[Vec<f64>], windows: usize) -> TimescaleCheck {
    let mut variation = 0.0;
    for w in eps.windows(2) {
        variation += w[0]
            .iter()
            .zip(&w[1])
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    }
    let dim = eps.first().map_or(0, Vec::len);
    let mut range = 0.0_f64;
    for j in 0..dim {
        let (lo, hi) = eps
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e[j]), hi.max(e[j])));
        range = range.max(hi - lo);
    }
    let per_window = variation / windows.max(1) as f64;
    TimescaleCheck {
        variation_per_window: per_window,
        eps_range: range,
        satisfied: range == 0.0 || per_window <= range,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceStatistic {
    /// Correlation per component; 0 where a component is degenerate.
    pub corr: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub threshold: f64,
    pub resonant: bool,
    pub timescale: Option<TimescaleCheck>,
    /// Set when the timescale condition is known to fail.
    pub warning: bool,
}

/// Componentwise Pearson correlation of `{v_n}` against `{ω_n}`.
pub fn detect_resonance(
    v: &[Vec<f64>],
    omega: &[Vec<f64>],
    threshold: f64,
    timescale: Option<TimescaleCheck>,
) -> Result<ResonanceStatistic> {
    if v.len() != omega.len() {
        return Err(Error::contract(format!("{} v values against {} ω values", v.len(), omega.len())));
    }
    if v.len() < 8 {
        return Err(Error::contract(format!("resonance needs at least 8 windows, got {}", v.len())));
    }
    let dim = v[0].len();
    if dim == 0 || omega[0].len() != dim {
        return Err(Error::contract("v and ω must have the same nonzero dimension"));
    }
    let mut corr = Vec::with_capacity(dim);
    let mut degenerate = Vec::with_capacity(dim);
    for j in 0..dim {
        let a: Vec<f64> = v.iter().map(|x| x[j]).collect();
        let b: Vec<f64> = omega.iter().map(|x| x[j]).collect();
        let r = pearson(&a, &b);
        corr.push(r.unwrap_or(0.0));
        degenerate.push(r.is_none());
    }
    let resonant = corr.iter().zip(&degenerate).all(|(c, d)| !d && c.abs() >= threshold);
    Ok(ResonanceStatistic {
        corr,
        degenerate,
        threshold,
        resonant,
        warning: timescale.is_some_and(|t| !t.satisfied),
        timescale,
    })
}

/// `Σ c_j x_j ≈ k_α` on rows `first..=last`, with rows built from lagged
/// `(ω, θ)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInvariant {
    pub first: usize,
    pub last: usize,
    /// Scaled so the first significant coefficient is 1.
    pub coefficients: Vec<f64>,
    pub constant: f64,
    /// Largest deviation of the unit-norm relation over the span.
    pub residual: f64,
}

/// Feature row `n`: `(ω_n, θ_n, ω_{n−1}, θ_{n−1}, …, ω_{n−lag}, θ_{n−lag})`.
fn invariant_rows(omega: &[Vec<f64>], theta: &[Vec<f64>], lag: usize) -> Vec<Vec<f64>> {
    (lag..omega.len())
        .map(|n| {
            let mut row = Vec::new();
            for back in 0..=lag {
                row.extend_from_slice(&omega[n - back]);
                row.extend_from_slice(&theta[n - back]);
            }
            row
        })
        .collect()
}

/// Best affine relation on `rows` as (unit coefficients, constant, residual).
fn fit_relation(rows: &[Vec<f64>]) -> (Vec<f64>, f64, f64) {
    let m = rows.len() as f64;
    let dim = rows[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m).collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, c)| x - c).collect())
        .collect();
    let (c, _) = linalg::smallest_right_singular(&centered);
    let residual = centered
        .iter()
        .map(|r| linalg::dot(&c, r).abs())
        .fold(0.0_f64, f64::max);
    let k = linalg::dot(&c, &mean);
    (c, k, residual)
}

/// Sliding-window search for affine invariants over depth-`k` windows.
pub fn detect_invariants(
    omega: &[Vec<f64>],
    theta: &[Vec<f64>],
    k: usize,
    lag: usize,
    tol: f64,
) -> Result<Vec<OracleInvariant>> {
    if omega.len() != theta.len() {
        return Err(Error::contract(format!("{} ω values against {} θ values", omega.len(), theta.len())));
    }
    if omega.len() < k + 2 {
        return Err(Error::contract(format!(
            "window depth {k} needs at least {} pairs, got {}",
            k + 2,
            omega.len()
        )));
    }
    let rows = invariant_rows(omega, theta, lag);
    let features = rows.first().map_or(0, Vec::len);
    if features == 0 {
        return Err(Error::contract("no ω or θ components to relate"));
    }
    if k < features + 2 {
        return Err(Error::contract(format!(
            "window depth {k} is too small for {features} features (need at least {})",
            features + 2
        )));
    }
    if rows.len() < k {
        return Err(Error::contract(format!("lag {lag} leaves only {} rows for depth {k}", rows.len())));
    }

    let mut found = Vec::new();
    let mut s = 0;
    while s + k <= rows.len() {
        let (_, _, r) = fit_relation(&rows[s..s + k]);
        if r >= tol {
            s += 1;
            continue;
        }
        let mut e = s + k;
        while e < rows.len() && fit_relation(&rows[s..=e]).2 < tol {
            e += 1;
        }
        let (c, kc, residual) = fit_relation(&rows[s..e]);
        let scale_at = c
            .iter()
            .position(|x| x.abs() > 1e-8)
            .expect("unit vector has a significant component");
        let scale = c[scale_at];
        found.push(OracleInvariant {
            first: s + lag,
            last: e - 1 + lag,
            coefficients: c.iter().map(|x| x / scale).collect(),
            constant: kc / scale,
            residual,
        });
        s = e;
    }
    Ok(found)
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub quasirandom_threshold: f64,
    pub resonance_threshold: f64,
    pub invariant_depth: usize,
    pub invariant_lag: usize,
    pub invariant_tol: f64,
    /// θ components handed to the invariant search; all when empty.
    pub invariant_theta: Vec<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            quasirandom_threshold: QUASIRANDOM_THRESHOLD,
            resonance_threshold: RESONANCE_THRESHOLD,
            invariant_depth: 6,
            invariant_lag: 0,
            invariant_tol: 1e-6,
            invariant_theta: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrace {
    pub run: PerceptionRun,
    /// One test per ω component.
    pub quasirandom: Vec<QuasirandomTest>,
    pub resonance: ResonanceStatistic,
    pub invariants: Vec<OracleInvariant>,
    pub frozen: bool,
    /// Frozen comments and quasirandom ω: the game is a kaleidoscope-roulette.
    pub roulette: bool,
}

fn analyse(run: PerceptionRun, config: &OracleConfig) -> Result<OracleTrace> {
    let tr = &run.trace.transcript;
    let omega_dim = tr.omega.first().map_or(0, Vec::len);
    let mut quasirandom = Vec::with_capacity(omega_dim);
    for j in 0..omega_dim {
        let s: Vec<f64> = tr.omega.iter().map(|w| w[j]).collect();
        quasirandom.push(test_quasirandom(&s, config.quasirandom_threshold)?);
    }
    let timescale = timescale_check(&run.trace.trajectory.eps, tr.len());
    let resonance = detect_resonance(&tr.v, &tr.omega, config.resonance_threshold, Some(timescale))?;
    let theta: Vec<Vec<f64>> = run.trace.comments[1..]
        .iter()
        .map(|th| {
            if config.invariant_theta.is_empty() {
                th.clone()
            } else {
                config.invariant_theta.iter().map(|&j| th[j]).collect()
            }
        })
        .collect();
    let invariants = detect_invariants(
        &tr.omega,
        &theta,
        config.invariant_depth,
        config.invariant_lag,
        config.invariant_tol,
    )?;
    let frozen = run.trace.comments.iter().all(|th| th == &run.trace.comments[0]);
    let roulette = frozen && !quasirandom.is_empty() && quasirandom.iter().all(|q| q.quasirandom);
    Ok(OracleTrace {
        run,
        quasirandom,
        resonance,
        invariants,
        frozen,
        roulette,
    })
}

/// Perception run followed by the quasirandom, resonance and invariant tests.
pub fn run_oracle(spec: &PerceptionSpec, horizon: f64, h: f64, config: &OracleConfig) -> Result<OracleTrace> {
    analyse(run_perception_sets(spec, horizon, h)?, config)
}

/// Resonance must hold whatever state is realized: the flag is required on
/// each of at least three initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustResonance {
    pub per_state: Vec<ResonanceStatistic>,
    pub resonant: bool,
}

pub fn resonance_across_states(
    spec: &PerceptionSpec,
    initial_states: &[Vec<f64>],
    horizon: f64,
    h: f64,
    threshold: f64,
) -> Result<RobustResonance> {
    if initial_states.len() < 3 {
        return Err(Error::contract(format!(
            "resonance needs at least 3 initial states, got {}",
            initial_states.len()
        )));
    }
    let mut per_state = Vec::with_capacity(initial_states.len());
    for phi0 in initial_states {
        let mut s = spec.clone();
        crate::error::check_dim("initial state", phi0.len(), s.game.state_dim())?;
        s.game.phi0 = phi0.clone();
        let run = run_perception_sets(&s, horizon, h)?;
        let tr = &run.trace.transcript;
        let ts = timescale_check(&run.trace.trajectory.eps, tr.len());
        per_state.push(detect_resonance(&tr.v, &tr.omega, threshold, Some(ts))?);
    }
    let resonant = per_state.iter().all(|r| r.resonant);
    Ok(RobustResonance { per_state, resonant })
}

/// The (ω, θ) pairs of a trace, n ≥ 1.
pub fn omega_theta_pairs(trace: &TacticalTrace) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (trace.transcript.omega.clone(), trace.comments[1..].to_vec())
}

#[doc(hidden)]
pub fn trajectory_of(run: &PerceptionRun) -> &Trajectory {
    &run.trace.trajectory
}
