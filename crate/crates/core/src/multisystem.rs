//! Several tactical systems on one clock: additive comment interaction,
//! synthesis under a unified comment rule, and localization of a unified
//! system back into blocks.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::engine::{Grid, Run};
use crate::error::{all_finite, check_dim, Error, Result};
use crate::linalg;
use crate::tactics::{update_comment, Segmenter, Session, TacticalSpec, TacticalTrace};

/// Tactical systems sharing the global clock and window schedule.
#[derive(Debug, Clone)]
pub struct SystemBundle {
    pub systems: Vec<TacticalSpec>,
}

impl SystemBundle {
    pub fn new(systems: Vec<TacticalSpec>) -> Result<Self> {
        if systems.is_empty() {
            return Err(Error::contract("a bundle needs at least one system"));
        }
        for (j, s) in systems.iter().enumerate() {
            s.game.validate().map_err(|e| e.under(&format!("system {}", j + 1)))?;
        }
        check_alignable(&systems)?;
        Ok(SystemBundle { systems })
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }

    pub fn comment_dims(&self) -> Vec<usize> {
        self.systems.iter().map(|s| s.rule.dim()).collect()
    }
}

/// Schedules must be of one kind; fixed partitions must coincide. Cell and
/// set schedules are checked node by node while running.
fn check_alignable(systems: &[TacticalSpec]) -> Result<()> {
    let first = &systems[0];
    for (j, s) in systems.iter().enumerate().skip(1) {
        if s.game.t0 != first.game.t0 {
            return Err(Error::contract(format!("system {} starts at {}, system 1 at {}", j + 1, s.game.t0, first.game.t0)));
        }
        let ok = match (&first.segmenter, &s.segmenter) {
            (Segmenter::Fixed(a), Segmenter::Fixed(b)) => a == b,
            (Segmenter::Cells(_), Segmenter::Cells(_)) | (Segmenter::Sets(_), Segmenter::Sets(_)) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::contract(format!(
                "window schedule of system {} cannot be aligned with system 1",
                j + 1
            )));
        }
    }
    Ok(())
}

/// `(θ_{n−1}, ω_n, v_n)` of one system at a common closure.
#[derive(Debug, Clone, Copy)]
pub struct Triple<'a> {
    pub theta: &'a [f64],
    pub omega: &'a [f64],
    pub v: &'a [f64],
}

/// Per-run overrides used by probes and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Probe {
    pub seed: Option<u64>,
    /// Stacked initial comments of all systems.
    pub theta0: Option<Vec<f64>>,
}

/// Advance all systems node by node. At each common closure `update`
/// receives the window index and every system's triple and returns the new
/// comments.
fn run_lockstep<F>(systems: &[TacticalSpec], theta0: Vec<Vec<f64>>, seed: Option<u64>, horizon: f64, h: f64, mut update: F) -> Result<Vec<TacticalTrace>>
where
    F: FnMut(usize, &[Triple<'_>]) -> Result<Vec<Vec<f64>>>,
{
    let games: Vec<_> = systems
        .iter()
        .map(|s| {
            let mut g = s.game.clone();
            if let Some(seed) = seed {
                g.seed = seed;
            }
            g
        })
        .collect();
    let grid = Grid::new(systems[0].game.t0, horizon, h)?;
    let mut sessions = Vec::with_capacity(systems.len());
    for ((s, g), th) in systems.iter().zip(&games).zip(theta0) {
        sessions.push(Session::new(Run::new(g, grid)?, th, &s.segmenter, &s.functionals)?);
    }
    let mut k = 0;
    while !sessions[0].done() {
        let mut closures = Vec::with_capacity(sessions.len());
        for s in sessions.iter_mut() {
            closures.push(s.advance()?);
        }
        let closing = closures.iter().filter(|c| c.is_some()).count();
        if closing != 0 && closing != closures.len() {
            return Err(Error::contract(format!("window schedules diverged at node {k}")));
        }
        if closing > 0 {
            let closures: Vec<_> = closures.into_iter().flatten().collect();
            let n = closures[0].n;
            let thetas: Vec<Vec<f64>> = sessions.iter().map(|s| s.theta().to_vec()).collect();
            let triples: Vec<Triple<'_>> = thetas
                .iter()
                .zip(&closures)
                .map(|(th, c)| Triple {
                    theta: th,
                    omega: &c.omega,
                    v: &c.v,
                })
                .collect();
            let next = update(n, &triples)?;
            for ((s, th), j) in sessions.iter_mut().zip(next).zip(1..) {
                if !all_finite(&th) {
                    return Err(Error::WindowNumeric {
                        window: n,
                        context: format!("comment of system {j} is {th:?}"),
                    });
                }
                s.close(th)?;
            }
        }
        k += 1;
    }
    sessions.into_iter().map(Session::finish).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct InteractionInput<'a> {
    pub n: usize,
    /// θ_{i,n−1} of the system receiving the correction.
    pub theta_self: &'a [f64],
    /// θ_{j,n−1} of the other system.
    pub theta_other: &'a [f64],
    pub omega: &'a [f64],
    pub v: &'a [f64],
}

/// Additive correction `Θ̃^int_{i,j}` to system i's comment update.
#[derive(Clone)]
pub struct InteractionTerm {
    pub dim: usize,
    f: Arc<dyn Fn(&InteractionInput<'_>) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for InteractionTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InteractionTerm").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl InteractionTerm {
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&InteractionInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        InteractionTerm { dim, f: Arc::new(f) }
    }
}

/// Two systems whose comments interact; `terms[0]` corrects system 1.
#[derive(Debug, Clone)]
pub struct CoupledSpec {
    pub bundle: SystemBundle,
    pub terms: [Option<InteractionTerm>; 2],
}

pub fn couple_comments(
    spec1: TacticalSpec,
    spec2: TacticalSpec,
    term12: Option<InteractionTerm>,
    term21: Option<InteractionTerm>,
) -> Result<CoupledSpec> {
    let bundle = SystemBundle::new(vec![spec1, spec2])?;
    let dims = bundle.comment_dims();
    for (i, t) in [&term12, &term21].into_iter().enumerate() {
        if let Some(t) = t {
            check_dim(&format!("interaction term of system {}", i + 1), t.dim, dims[i])?;
        }
    }
    Ok(CoupledSpec {
        bundle,
        terms: [term12, term21],
    })
}

/// `θ_{i,n} = Θ_i(θ_{i,n−1}, ω_{i,n}, v_{i,n}) + Θ̃^int_{i,j}(θ_{i,n−1}, θ_{j,n−1}, ω_{i,n}, v_{i,n})`.
pub fn run_coupled(coupled: &CoupledSpec, horizon: f64, h: f64) -> Result<Vec<TacticalTrace>> {
    let systems = &coupled.bundle.systems;
    let theta0 = systems.iter().map(|s| s.rule.theta0.clone()).collect();
    run_lockstep(systems, theta0, None, horizon, h, |n, tr| {
        let mut out = Vec::with_capacity(2);
        for i in 0..2 {
            let j = 1 - i;
            let mut th = update_comment(&systems[i].rule, n, tr[i].theta, tr[i].omega, tr[i].v)?;
            if let Some(term) = &coupled.terms[i] {
                let add = (term.f)(&InteractionInput {
                    n,
                    theta_self: tr[i].theta,
                    theta_other: tr[j].theta,
                    omega: tr[i].omega,
                    v: tr[i].v,
                });
                check_dim(&format!("interaction term of system {}", i + 1), add.len(), th.len())?;
                th.iter_mut().zip(add).for_each(|(a, b)| *a += b);
            }
            out.push(th);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SynthInput<'a> {
    pub n: usize,
    /// Triples of the component's inputs, in declared order.
    pub triples: &'a [Triple<'a>],
}

/// `Θ̃_j` over the triples of the systems listed in `inputs`.
#[derive(Clone)]
pub struct SynthComponent {
    pub inputs: Vec<usize>,
    f: Arc<dyn Fn(&SynthInput<'_>) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for SynthComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SynthComponent").field("inputs", &self.inputs).finish_non_exhaustive()
    }
}

impl SynthComponent {
    pub fn new<F>(inputs: Vec<usize>, f: F) -> Self
    where
        F: Fn(&SynthInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        SynthComponent { inputs, f: Arc::new(f) }
    }
}

/// One component per system; the inputs form the dependency graph.
#[derive(Debug, Clone)]
pub struct SynthesisRule {
    pub components: Vec<SynthComponent>,
}

impl SynthesisRule {
    /// Each system keeps its own rule and reads only its own triple.
    pub fn diagonal(bundle: &SystemBundle) -> Self {
        let components = bundle
            .systems
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let rule = s.rule.clone();
                SynthComponent::new(vec![j], move |x| {
                    let t = &x.triples[0];
                    update_comment(&rule, x.n, t.theta, t.omega, t.v).unwrap_or_else(|_| vec![f64::NAN; rule.dim()])
                })
            })
            .collect();
        SynthesisRule { components }
    }

    /// `graph()[j]` lists the systems feeding component j.
    pub fn graph(&self) -> Vec<Vec<usize>> {
        self.components.iter().map(|c| c.inputs.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct UnifiedSystem {
    pub bundle: SystemBundle,
    pub rule: SynthesisRule,
}

pub fn synthesize_comments(bundle: SystemBundle, rule: SynthesisRule) -> Result<UnifiedSystem> {
    if rule.components.len() != bundle.len() {
        return Err(Error::contract(format!(
            "synthesis rule has {} components for {} systems",
            rule.components.len(),
            bundle.len()
        )));
    }
    for (j, c) in rule.components.iter().enumerate() {
        if c.inputs.is_empty() {
            return Err(Error::contract(format!("component {} reads no triples", j + 1)));
        }
        for (a, &k) in c.inputs.iter().enumerate() {
            if k >= bundle.len() {
                return Err(Error::contract(format!(
                    "component {} reads system {}, bundle has {}",
                    j + 1,
                    k + 1,
                    bundle.len()
                )));
            }
            if c.inputs[..a].contains(&k) {
                return Err(Error::contract(format!("component {} lists system {} twice", j + 1, k + 1)));
            }
        }
    }
    Ok(UnifiedSystem { bundle, rule })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedTrace {
    pub traces: Vec<TacticalTrace>,
    /// Stacked comment vector after each window, θ_0 first.
    pub comments: Vec<Vec<f64>>,
}

pub fn run_unified(u: &UnifiedSystem, horizon: f64, h: f64) -> Result<UnifiedTrace> {
    run_unified_probe(u, horizon, h, &Probe::default())
}

pub fn run_unified_probe(u: &UnifiedSystem, horizon: f64, h: f64, probe: &Probe) -> Result<UnifiedTrace> {
    let dims = u.bundle.comment_dims();
    let theta0: Vec<Vec<f64>> = match &probe.theta0 {
        None => u.bundle.systems.iter().map(|s| s.rule.theta0.clone()).collect(),
        Some(stacked) => {
            check_dim("probe comments", stacked.len(), dims.iter().sum())?;
            let mut out = Vec::new();
            let mut a = 0;
            for d in &dims {
                out.push(stacked[a..a + d].to_vec());
                a += d;
            }
            out
        }
    };
    let traces = run_lockstep(&u.bundle.systems, theta0, probe.seed, horizon, h, |n, tr| {
        u.rule
            .components
            .iter()
            .zip(&dims)
            .enumerate()
            .map(|(j, (c, &d))| {
                let picked: Vec<Triple<'_>> = c.inputs.iter().map(|&k| tr[k]).collect();
                let th = (c.f)(&SynthInput { n, triples: &picked });
                check_dim(&format!("synthesized comment of system {}", j + 1), th.len(), d)?;
                Ok(th)
            })
            .collect()
    })?;
    let windows = traces[0].comments.len();
    let comments = (0..windows)
        .map(|n| traces.iter().flat_map(|t| t.comments[n].iter().copied()).collect())
        .collect();
    Ok(UnifiedTrace { traces, comments })
}

/// Coordinates of the stacked θ, ω and v vectors owned by one block.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Block {
    pub theta: Vec<usize>,
    pub omega: Vec<usize>,
    pub v: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub blocks: Vec<Block>,
}

/// Affine partial rule of one block:
/// `θ_B,n = A·[θ_B,n−1, ω_B,n, v_B,n] + c`, one row per θ coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFit {
    pub coefficients: Vec<Vec<f64>>,
    pub rank: usize,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub error: f64,
    pub cross_dependencies: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub chosen: usize,
    pub partition: Partition,
    /// Empty for a one-block partition, which is the unified system itself.
    pub fits: Vec<BlockFit>,
    pub error: f64,
    pub scores: Vec<CandidateScore>,
}

/// Errors within this distance count as equal when ranking candidates.
pub const TIE_TOLERANCE: f64 = 1e-10;

struct ProbeRecord {
    comments: Vec<Vec<f64>>,
    omega: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn validate_partition(p: &Partition, theta_dim: usize, omega_dim: usize, v_dim: usize) -> Result<()> {
    if p.blocks.is_empty() {
        return Err(Error::contract("partition has no blocks"));
    }
    let mut seen = [vec![false; theta_dim], vec![false; omega_dim], vec![false; v_dim]];
    for b in &p.blocks {
        for (which, coords) in [&b.theta, &b.omega, &b.v].into_iter().enumerate() {
            for &c in coords {
                let slot = seen[which]
                    .get_mut(c)
                    .ok_or_else(|| Error::contract(format!("partition coordinate {c} out of range")))?;
                if *slot {
                    return Err(Error::contract(format!("partition blocks overlap at coordinate {c}")));
                }
                *slot = true;
            }
        }
        if b.theta.is_empty() {
            return Err(Error::contract("every block needs at least one comment coordinate"));
        }
    }
    if seen[0].iter().any(|s| !s) {
        return Err(Error::contract("partition does not cover every comment coordinate"));
    }
    Ok(())
}

fn fit_block(block: &Block, probes: &[ProbeRecord]) -> BlockFit {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for p in probes {
        for n in 1..p.comments.len() {
            let mut row: Vec<f64> = block.theta.iter().map(|&c| p.comments[n - 1][c]).collect();
            row.extend(block.omega.iter().map(|&c| p.omega[n - 1][c]));
            row.extend(block.v.iter().map(|&c| p.v[n - 1][c]));
            row.push(1.0);
            rows.push(row);
            targets.push(block.theta.iter().map(|&c| p.comments[n][c]).collect::<Vec<f64>>());
        }
    }
    let fit = linalg::solve(&rows, &targets);
    BlockFit {
        max_residual: fit.max_abs_residual(),
        rank: fit.rank,
        coefficients: fit.coef,
    }
}

/// Graph edges `(j reads k)` joining comment coordinates that the partition
/// places in different blocks.
fn cross_dependencies(p: &Partition, graph: &[Vec<usize>], offsets: &[(usize, usize)]) -> usize {
    let block_of = |c: usize| p.blocks.iter().position(|b| b.theta.contains(&c)).unwrap_or(usize::MAX);
    let blocks_of = |j: usize| {
        let (a, d) = offsets[j];
        (a..a + d).map(block_of).collect::<Vec<_>>()
    };
    let mut count = 0;
    for (j, inputs) in graph.iter().enumerate() {
        let bj = blocks_of(j);
        for &k in inputs {
            let bk = blocks_of(k);
            if bj.iter().any(|x| bk.iter().any(|y| x != y)) {
                count += 1;
            }
        }
    }
    count
}

/// Pick the candidate partition whose per-block affine fits reproduce the
/// probe runs best; ties go to fewer cross-block dependencies, then more
/// blocks, then the earlier candidate.
pub fn localize_system(
    u: &UnifiedSystem,
    candidates: &[Partition],
    probes: &[Probe],
    horizon: f64,
    h: f64,
) -> Result<LocalizationResult> {
    if candidates.is_empty() {
        return Err(Error::contract("localization needs at least one candidate partition"));
    }
    if probes.is_empty() {
        return Err(Error::contract("localization needs at least one probe"));
    }
    let runs: Vec<ProbeRecord> = probes
        .par_iter()
        .map(|p| {
            let tr = run_unified_probe(u, horizon, h, p)?;
            let stack = |pick: &dyn Fn(&TacticalTrace) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                let windows = pick(&tr.traces[0]).len();
                (0..windows)
                    .map(|n| tr.traces.iter().flat_map(|t| pick(t)[n].iter().copied()).collect())
                    .collect()
            };
            Ok(ProbeRecord {
                omega: stack(&|t| &t.transcript.omega),
                v: stack(&|t| &t.transcript.v),
                comments: tr.comments,
            })
        })
        .collect::<Result<_>>()?;
    if runs.iter().all(|r| r.comments.len() < 2) {
        return Err(Error::contract("probe runs closed no windows"));
    }

    let theta_dim: usize = u.bundle.comment_dims().iter().sum();
    let omega_dim: usize = u.bundle.systems.iter().map(|s| s.functionals.omega_dim()).sum();
    let v_dim: usize = u.bundle.systems.iter().map(|s| s.functionals.v_dim()).sum();
    for c in candidates {
        validate_partition(c, theta_dim, omega_dim, v_dim)?;
    }
    let mut offsets = Vec::new();
    let mut a = 0;
    for d in u.bundle.comment_dims() {
        offsets.push((a, d));
        a += d;
    }
    let graph = u.rule.graph();

    let fitted: Vec<(Vec<BlockFit>, CandidateScore)> = candidates
        .par_iter()
        .map(|c| {
            let fits = if c.blocks.len() == 1 {
                Vec::new()
            } else {
                c.blocks.iter().map(|b| fit_block(b, &runs)).collect()
            };
            let error = fits.iter().fold(0.0_f64, |m, f| m.max(f.max_residual));
            let score = CandidateScore {
                error,
                cross_dependencies: cross_dependencies(c, &graph, &offsets),
                blocks: c.blocks.len(),
            };
            (fits, score)
        })
        .collect();

    let mut best = 0;
    for i in 1..fitted.len() {
        let (b, c) = (&fitted[best].1, &fitted[i].1);
        let better = if c.error < b.error - TIE_TOLERANCE {
            true
        } else if (c.error - b.error).abs() <= TIE_TOLERANCE {
            c.cross_dependencies < b.cross_dependencies
                || (c.cross_dependencies == b.cross_dependencies && c.blocks > b.blocks)
        } else {
            false
        };
        if better {
            best = i;
        }
    }
    let scores: Vec<CandidateScore> = fitted.iter().map(|f| f.1.clone()).collect();
    let (fits, score) = fitted.into_iter().nth(best).expect("nonempty candidates");
    Ok(LocalizationResult {
        chosen: best,
        partition: candidates[best].clone(),
        fits,
        error: score.error,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{FixedPartition, WindowFunctional, WindowFunctionals};
    use crate::engine::{EvolutionField, FeedbackLaw, GameSpec, HiddenMap, Player, PureControl};
    use crate::tactics::{run_tactical, CommentRule, ParametricBinding};

    const H: f64 = 0.01;
    const T: f64 = 2.0;

    fn system(a: f64, eps: f64, rule: CommentRule) -> TacticalSpec {
        let game = GameSpec::new(vec![1.0], EvolutionField::new(1, move |f| vec![(a + 0.1 * f.theta[0]) * f.phi[0] + f.u[0]]))
            .with_player(Player::new(
                "p",
                PureControl::new(1, |s| vec![0.3 * (2.0 * s.t).sin()]),
                FeedbackLaw::affine(HiddenMap::new(1, move |h| vec![eps + 0.2 * h.noise[0]]).with_noise(1)),
            ))
            .with_binding(ParametricBinding::evolution())
            .with_seed(11);
        let grid = Grid::new(0.0, T, H).unwrap();
        TacticalSpec {
            game,
            segmenter: Segmenter::Fixed(FixedPartition::uniform(0.0, T, 8).nodes(&grid).unwrap()),
            functionals: WindowFunctionals::new(vec![WindowFunctional::mean_eps(1)], vec![WindowFunctional::integral_u0(1)])
                .unwrap(),
            rule,
        }
    }

    fn affine_rule(theta0: f64, a: f64, b: f64, c: f64) -> CommentRule {
        CommentRule::new(vec![theta0], move |x| vec![a * x.theta[0] + b * x.omega[0] + c * x.v[0]])
    }

    fn bundle3() -> SystemBundle {
        SystemBundle::new(vec![
            system(-0.5, -0.3, affine_rule(0.1, 0.5, 1.0, -0.2)),
            system(-0.2, -0.6, affine_rule(-0.4, 0.8, 0.3, 0.7)),
            system(-0.8, 0.2, affine_rule(0.7, -0.3, 0.5, 1.0)),
        ])
        .unwrap()
    }

    fn term(scale: f64) -> InteractionTerm {
        InteractionTerm::new(1, move |x| vec![scale * (x.theta_other[0] - x.theta_self[0])])
    }

    #[test]
    fn zero_interaction_equals_uncoupled_runs() {
        let (s1, s2) = (system(-0.5, -0.3, affine_rule(0.1, 0.5, 1.0, -0.2)), system(-0.2, -0.6, affine_rule(-0.4, 0.8, 0.3, 0.7)));
        let c = couple_comments(s1.clone(), s2.clone(), None, None).unwrap();
        let traces = run_coupled(&c, T, H).unwrap();
        assert_eq!(traces[0], run_tactical(&s1, T, H).unwrap());
        assert_eq!(traces[1], run_tactical(&s2, T, H).unwrap());
    }

    #[test]
    fn symmetric_coupling_of_identical_systems() {
        let s = system(-0.5, -0.3, affine_rule(0.1, 0.5, 1.0, -0.2));
        let c = couple_comments(s.clone(), s, Some(term(0.3)), Some(term(0.3))).unwrap();
        let traces = run_coupled(&c, T, H).unwrap();
        assert_eq!(traces[0].comments, traces[1].comments);
    }

    #[test]
    fn one_way_coupling_leaves_receiver_free() {
        let (s1, s2) = (system(-0.5, -0.3, affine_rule(0.1, 0.5, 1.0, -0.2)), system(-0.2, -0.6, affine_rule(-0.4, 0.8, 0.3, 0.7)));
        let c = couple_comments(s1.clone(), s2.clone(), Some(term(0.5)), None).unwrap();
        let traces = run_coupled(&c, T, H).unwrap();
        assert_eq!(traces[1], run_tactical(&s2, T, H).unwrap());
        assert_ne!(traces[0].comments, run_tactical(&s1, T, H).unwrap().comments);
    }

    #[test]
    fn interaction_reads_previous_window_only() {
        let (s1, s2) = (system(-0.5, -0.3, affine_rule(0.1, 0.5, 1.0, -0.2)), system(-0.2, -0.6, affine_rule(-0.4, 0.8, 0.3, 0.7)));
        let base = run_coupled(&couple_comments(s1.clone(), s2.clone(), Some(term(0.5)), Some(term(0.2))).unwrap(), T, H).unwrap();
        let bumped = InteractionTerm::new(1, |x| vec![0.2 * (x.theta_other[0] - x.theta_self[0]) + if x.n == 4 { 1.0 } else { 0.0 }]);
        let pert = run_coupled(&couple_comments(s1, s2, Some(term(0.5)), Some(bumped)).unwrap(), T, H).unwrap();
        let t4 = base[1].transcript.nodes[4];
        assert_eq!(base[0].comments[..4], pert[0].comments[..4]);
        assert_eq!(base[0].comments[4], pert[0].comments[4]);
        assert_ne!(base[0].comments[5], pert[0].comments[5]);
        assert_eq!(base[1].trajectory.phi[..=t4], pert[1].trajectory.phi[..=t4]);
    }

    #[test]
    fn mismatched_schedules_are_rejected() {
        let s1 = system(-0.5, -0.3, affine_rule(0.1, 0.5, 1.0, -0.2));
        let mut s2 = s1.clone();
        s2.segmenter = Segmenter::Fixed(vec![0, 100, 200]);
        assert!(matches!(couple_comments(s1.clone(), s2, None, None), Err(Error::Contract(_))));
        assert!(matches!(couple_comments(s1.clone(), s1, Some(InteractionTerm::new(2, |_| vec![0.0, 0.0])), None), Err(Error::Contract(_))));
    }

    #[test]
    fn diagonal_synthesis_equals_independent_runs() {
        let b = bundle3();
        let rule = SynthesisRule::diagonal(&b);
        let u = synthesize_comments(b.clone(), rule).unwrap();
        let tr = run_unified(&u, T, H).unwrap();
        for (j, s) in b.systems.iter().enumerate() {
            assert_eq!(tr.traces[j], run_tactical(s, T, H).unwrap());
        }
        assert_eq!(tr.comments.len(), 9);
        assert_eq!(tr.comments[0], vec![0.1, -0.4, 0.7]);
    }

    fn star(b: &SystemBundle) -> SynthesisRule {
        let mut rule = SynthesisRule::diagonal(b);
        rule.components[0] = SynthComponent::new(vec![0, 1, 2], |x| {
            let own = &x.triples[0];
            vec![0.5 * own.theta[0] + own.omega[0] + 0.1 * (x.triples[1].theta[0] + x.triples[2].theta[0])]
        });
        rule
    }

    #[test]
    fn star_hierarchy_runs() {
        let b = bundle3();
        let u = synthesize_comments(b.clone(), star(&b)).unwrap();
        assert_eq!(u.rule.graph(), vec![vec![0, 1, 2], vec![1], vec![2]]);
        let tr = run_unified(&u, T, H).unwrap();
        assert_eq!(tr.traces[1], run_tactical(&b.systems[1], T, H).unwrap());
    }

    #[test]
    fn invalid_graph_reference_is_rejected() {
        let b = bundle3();
        let mut rule = SynthesisRule::diagonal(&b);
        rule.components[2] = SynthComponent::new(vec![5], |_| vec![0.0]);
        assert!(matches!(synthesize_comments(b, rule), Err(Error::Contract(_))));
    }

    fn block(j: usize) -> Block {
        Block {
            theta: vec![j],
            omega: vec![j],
            v: vec![j],
        }
    }

    fn probes() -> Vec<Probe> {
        (0..4)
            .map(|i| Probe {
                seed: Some(100 + i),
                theta0: Some(vec![0.1 * i as f64, -0.3 + 0.2 * i as f64, 0.5 - 0.1 * i as f64]),
            })
            .collect()
    }

    fn whole() -> Partition {
        Partition {
            blocks: vec![Block {
                theta: vec![0, 1, 2],
                omega: vec![0, 1, 2],
                v: vec![0, 1, 2],
            }],
        }
    }

    fn truth() -> Partition {
        Partition {
            blocks: vec![block(0), block(1), block(2)],
        }
    }

    fn wrong() -> Partition {
        Partition {
            blocks: vec![
                Block {
                    theta: vec![0, 1],
                    omega: vec![0],
                    v: vec![1],
                },
                Block {
                    theta: vec![2],
                    omega: vec![1, 2],
                    v: vec![0, 2],
                },
            ],
        }
    }

    #[test]
    fn block_diagonal_truth_is_recovered() {
        let b = bundle3();
        let u = synthesize_comments(b.clone(), SynthesisRule::diagonal(&b)).unwrap();
        let r = localize_system(&u, &[wrong(), whole(), truth()], &probes(), T, H).unwrap();
        assert_eq!(r.chosen, 2);
        assert!(r.error < 1e-9, "{}", r.error);
        assert_eq!(r.fits.len(), 3);
        let c = &r.fits[0].coefficients[0];
        assert!((c[0] - 0.5).abs() < 1e-8 && (c[1] - 1.0).abs() < 1e-8 && (c[2] + 0.2).abs() < 1e-8, "{c:?}");
    }

    #[test]
    fn fully_coupled_truth_leaves_positive_error() {
        let b = bundle3();
        let rule = SynthesisRule {
            components: (0..3)
                .map(|j| {
                    SynthComponent::new(vec![0, 1, 2], move |x| {
                        let s: f64 = x.triples.iter().map(|t| t.theta[0] * t.omega[0]).sum();
                        vec![0.3 * x.triples[j].theta[0] + (s + j as f64).sin()]
                    })
                })
                .collect(),
        };
        let u = synthesize_comments(b, rule).unwrap();
        let r = localize_system(&u, &[truth(), wrong()], &probes(), T, H).unwrap();
        assert!(r.error > 0.0 && r.error.is_finite());
    }

    #[test]
    fn single_system_single_block_is_identity() {
        let b = SystemBundle::new(vec![system(-0.5, -0.3, affine_rule(0.1, 0.5, 1.0, -0.2))]).unwrap();
        let u = synthesize_comments(b.clone(), SynthesisRule::diagonal(&b)).unwrap();
        let r = localize_system(&u, &[Partition { blocks: vec![block(0)] }], &probes()[..1].iter().map(|p| Probe { seed: p.seed, theta0: None }).collect::<Vec<_>>(), T, H).unwrap();
        assert_eq!((r.chosen, r.error), (0, 0.0));
    }

    #[test]
    fn localization_contracts() {
        let b = bundle3();
        let u = synthesize_comments(b.clone(), SynthesisRule::diagonal(&b)).unwrap();
        assert!(matches!(localize_system(&u, &[], &probes(), T, H), Err(Error::Contract(_))));
        assert!(matches!(localize_system(&u, &[truth()], &[], T, H), Err(Error::Contract(_))));
        let overlapping = Partition {
            blocks: vec![block(0), block(0), block(2)],
        };
        assert!(matches!(localize_system(&u, &[overlapping], &probes(), T, H), Err(Error::Contract(_))));
    }
}
