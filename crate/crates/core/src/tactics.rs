//! Tactical games: comments θ_n produced by a rule Θ at window closures and
//! fed back as parameters of the evolution and of the feedback couplings.

use std::fmt;
use std::sync::Arc;

use crate::dialogue::{eval_window_functionals, DialogueTranscript, WindowFunctionals};
use crate::engine::{
    CouplingInput, FieldInput, GameSpec, Grid, HiddenInput, ParamView, Run, StrategyInput, Trajectory,
};
use crate::error::{all_finite, check_dim, Error, Result};
use crate::perception::{SetInput, SetTerminationRule};
use crate::verbalization::CellComplex;

/// How parameters enter the feedback couplings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DependenceMode {
    /// Feedbacks do not read the parameters.
    #[default]
    None,
    /// The coupling reads them explicitly.
    Known,
    /// Only the hidden ε-map reads them.
    Unknown,
}

/// A scheduled slow control `λ(t)`.
#[derive(Clone)]
pub struct SlowControl {
    pub dim: usize,
    pub evolution: bool,
    pub feedback: DependenceMode,
    schedule: Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for SlowControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SlowControl")
            .field("dim", &self.dim)
            .field("evolution", &self.evolution)
            .field("feedback", &self.feedback)
            .finish_non_exhaustive()
    }
}

impl SlowControl {
    pub fn new<F>(dim: usize, evolution: bool, feedback: DependenceMode, schedule: F) -> Self
    where
        F: Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    {
        SlowControl {
            dim,
            evolution,
            feedback,
            schedule: Arc::new(schedule),
        }
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let l = (self.schedule)(t);
        check_dim("slow control", l.len(), self.dim)?;
        if !all_finite(&l) {
            return Err(Error::numeric(t, &[], "non-finite slow control"));
        }
        Ok(l)
    }
}

/// Where θ, ω and λ are routed.
#[derive(Debug, Clone, Default)]
pub struct ParametricBinding {
    /// θ enters Φ.
    pub theta_evolution: bool,
    /// The latest ω enters Φ.
    pub omega_evolution: bool,
    /// θ and ω enter the couplings (known) or the hidden maps (unknown).
    pub feedback: DependenceMode,
    pub lambda: Option<SlowControl>,
}

impl ParametricBinding {
    pub fn evolution() -> Self {
        ParametricBinding {
            theta_evolution: true,
            ..Default::default()
        }
    }

    pub fn feedback(mode: DependenceMode) -> Self {
        ParametricBinding {
            feedback: mode,
            ..Default::default()
        }
    }
}

/// The game's field, couplings and hidden maps with the current parameter
/// values substituted according to its binding.
#[derive(Clone, Copy)]
pub struct BoundGame<'a> {
    game: &'a GameSpec,
    theta: &'a [f64],
    omega: &'a [f64],
    lambda: &'a [f64],
}

/// View of `game` under parameters `θ`, `ω` and slow control `λ`.
pub fn bind_parameters<'a>(game: &'a GameSpec, theta: &'a [f64], omega: &'a [f64], lambda: &'a [f64]) -> BoundGame<'a> {
    BoundGame {
        game,
        theta,
        omega,
        lambda,
    }
}

impl<'a> BoundGame<'a> {
    fn view(&self, theta: bool, omega: bool, lambda: bool) -> ParamView<'a> {
        ParamView {
            theta: if theta { self.theta } else { &[] },
            omega: if omega { self.omega } else { &[] },
            lambda: if lambda { self.lambda } else { &[] },
        }
    }

    fn lambda_mode(&self) -> (bool, DependenceMode) {
        self.game
            .binding
            .lambda
            .as_ref()
            .map_or((false, DependenceMode::None), |l| (l.evolution, l.feedback))
    }

    fn field_view(&self) -> ParamView<'a> {
        let b = &self.game.binding;
        self.view(b.theta_evolution, b.omega_evolution, self.lambda_mode().0)
    }

    fn feedback_view(&self, mode: DependenceMode) -> ParamView<'a> {
        let on = self.game.binding.feedback == mode;
        self.view(on, on, self.lambda_mode().1 == mode)
    }

    pub fn field(&self, t: f64, phi: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let p = self.field_view();
        self.game.field.eval(&FieldInput {
            t,
            phi,
            u,
            theta: p.theta,
            omega: p.omega,
            lambda: p.lambda,
        })
    }

    /// Realized control of player `i`.
    pub fn coupling(&self, i: usize, u0: &[f64], phi: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        let p = self.feedback_view(DependenceMode::Known);
        self.game.players[i].law.eval_control_with(&CouplingInput {
            u0,
            phi,
            eps,
            theta: p.theta,
            omega: p.omega,
            lambda: p.lambda,
        })
    }

    /// The control vector handed to Φ: per-player couplings, or coalition
    /// aggregates when the game declares coalitions.
    pub fn realize(&self, phi: &[f64], u0: &[Vec<f64>], eps: &[Vec<f64>]) -> Result<Vec<f64>> {
        match &self.game.coalitions {
            Some(map) => Ok(map
                .aggregate(&self.game.players, u0, phi, eps, self.feedback_view(DependenceMode::Known))?
                .concat()),
            None => {
                let mut u = Vec::new();
                for i in 0..self.game.players.len() {
                    u.extend(self.coupling(i, &u0[i], phi, &eps[i])?);
                }
                Ok(u)
            }
        }
    }

    pub fn strategy_input<'b>(&'b self, t: f64, phi: &'b [f64]) -> StrategyInput<'b> {
        StrategyInput {
            t,
            phi,
            theta: self.theta,
            omega: self.game.omega_visible.then_some(self.omega),
            lambda: self.lambda,
        }
    }

    pub(crate) fn hidden(&self, i: usize, t: f64, u0: &[f64], phi: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        let p = self.feedback_view(DependenceMode::Unknown);
        self.game.players[i].law.eval_hidden(&HiddenInput {
            t,
            u0,
            phi,
            noise,
            theta: p.theta,
            omega: p.omega,
            lambda: p.lambda,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CommentInput<'a> {
    /// One-based index of the window just closed.
    pub n: usize,
    pub theta: &'a [f64],
    pub omega: &'a [f64],
    pub v: &'a [f64],
}

/// `θ_n = Θ(θ_{n−1}, ω_n, v_n)` with initial comment θ_0.
#[derive(Clone)]
pub struct CommentRule {
    pub theta0: Vec<f64>,
    f: Arc<dyn Fn(&CommentInput<'_>) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for CommentRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CommentRule").field("theta0", &self.theta0).finish_non_exhaustive()
    }
}

impl CommentRule {
    pub fn new<F>(theta0: Vec<f64>, f: F) -> Self
    where
        F: Fn(&CommentInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        CommentRule {
            theta0,
            f: Arc::new(f),
        }
    }

    /// `Θ(θ, ω, v) = θ`.
    pub fn frozen(theta0: Vec<f64>) -> Self {
        CommentRule::new(theta0, |c| c.theta.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.theta0.len()
    }
}

pub fn update_comment(rule: &CommentRule, n: usize, theta_prev: &[f64], omega: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim("previous comment", theta_prev.len(), rule.dim())?;
    let theta = (rule.f)(&CommentInput {
        n,
        theta: theta_prev,
        omega,
        v,
    });
    check_dim("comment rule output", theta.len(), rule.dim())?;
    if !all_finite(&theta) {
        return Err(Error::WindowNumeric {
            window: n,
            context: format!("comment rule returned {theta:?}"),
        });
    }
    Ok(theta)
}

/// How a run is cut into windows.
#[derive(Clone, Debug)]
pub enum Segmenter {
    /// A window closes at each ε cell transition.
    Cells(CellComplex),
    /// Fixed grid nodes, starting at 0 and ending at the last node.
    Fixed(Vec<usize>),
    /// Perception sets ended by a rule on the state.
    Sets(SetTerminationRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowEnd {
    Transition,
    Partition,
    Rule,
    Guard,
    Horizon,
}

/// A window that has just closed and awaits its comment.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Closure {
    pub n: usize,
    pub node: usize,
    pub omega: Vec<f64>,
    pub v: Vec<f64>,
}

/// Full record of a tactical run.
#[derive(Debug, Clone, PartialEq)]
pub struct TacticalTrace {
    pub trajectory: Trajectory,
    pub transcript: DialogueTranscript,
    /// θ_0, θ_1, …, one more than the number of windows.
    pub comments: Vec<Vec<f64>>,
    /// Cell index per node for cell segmentation, empty otherwise.
    pub labels: Vec<usize>,
    pub ends: Vec<WindowEnd>,
}

impl TacticalTrace {
    /// The tactical actions `(v_n, θ_n)`, n ≥ 1.
    pub fn actions(&self) -> Vec<(&[f64], &[f64])> {
        self.transcript
            .v
            .iter()
            .zip(&self.comments[1..])
            .map(|(v, th)| (v.as_slice(), th.as_slice()))
            .collect()
    }
}

/// Node-by-node windowed run. The caller supplies θ_n at each closure.
pub(crate) struct Session<'a> {
    run: Run<'a>,
    segmenter: &'a Segmenter,
    fs: &'a WindowFunctionals,
    start: usize,
    label: Option<usize>,
    labels: Vec<usize>,
    set_phi: Vec<f64>,
    set_omega: Vec<f64>,
    pending: Option<Closure>,
    transcript: DialogueTranscript,
    comments: Vec<Vec<f64>>,
    ends: Vec<WindowEnd>,
}

impl<'a> Session<'a> {
    pub fn new(mut run: Run<'a>, theta0: Vec<f64>, segmenter: &'a Segmenter, fs: &'a WindowFunctionals) -> Result<Self> {
        let grid = run.grid;
        match segmenter {
            Segmenter::Cells(c) => check_dim("cell complex", c.dim, run.game.eps_dim())?,
            Segmenter::Fixed(nodes) => {
                if nodes.len() < 2
                    || nodes[0] != 0
                    || *nodes.last().unwrap() != grid.steps
                    || nodes.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::contract("fixed windows must tile the whole grid"));
                }
            }
            Segmenter::Sets(rule) => rule.validate()?,
        }
        let omega_dim = fs.omega_dim();
        if run.omega.is_empty() {
            run.omega = vec![0.0; omega_dim];
        }
        check_dim("initial dialogue state", run.omega.len(), omega_dim)?;
        run.theta = theta0.clone();
        let t0 = run.t();
        Ok(Session {
            set_phi: run.phi.clone(),
            set_omega: run.omega.clone(),
            run,
            segmenter,
            fs,
            start: 0,
            label: None,
            labels: Vec::new(),
            pending: None,
            transcript: DialogueTranscript {
                boundaries: vec![t0],
                nodes: vec![0],
                ..Default::default()
            },
            comments: vec![theta0],
            ends: Vec::new(),
        })
    }

    pub fn done(&self) -> bool {
        self.run.done()
    }

    pub fn theta(&self) -> &[f64] {
        &self.run.theta
    }

    /// Process the current node. Returns the closure when a window ends here;
    /// the node is then finished by [`Session::close`].
    pub fn advance(&mut self) -> Result<Option<Closure>> {
        if self.pending.is_some() {
            return Err(Error::contract("window closure awaiting its comment"));
        }
        self.run.sample()?;
        let k = self.run.k;
        let t = self.run.t();
        let last = k == self.run.grid.steps;
        let fired = match self.segmenter {
            Segmenter::Cells(c) => {
                let eps = self.run.traj.eps.last().unwrap();
                let l = c.classify(t, eps, self.label)?;
                let changed = self.label.is_some_and(|p| p != l);
                self.label = Some(l);
                self.labels.push(l);
                changed.then_some(WindowEnd::Transition)
            }
            Segmenter::Fixed(nodes) => nodes.binary_search(&k).is_ok().then_some(WindowEnd::Partition),
            Segmenter::Sets(rule) => {
                let t_start = self.run.grid.time(self.start);
                if rule.fires(&SetInput {
                    t,
                    t_start,
                    phi: &self.run.phi,
                    phi_start: &self.set_phi,
                    omega_start: &self.set_omega,
                }) {
                    Some(WindowEnd::Rule)
                } else if k - self.start >= rule.guard_steps(self.run.grid.h) {
                    Some(WindowEnd::Guard)
                } else {
                    None
                }
            }
        };
        let end = match fired {
            Some(e) if k > self.start => Some(e),
            _ if last => Some(WindowEnd::Horizon),
            _ => None,
        };
        let Some(end) = end else {
            self.run.complete()?;
            self.run.step()?;
            return Ok(None);
        };
        let (omega, v) = eval_window_functionals(self.fs, &self.run.traj, self.start, k)?;
        self.ends.push(end);
        let closure = Closure {
            n: self.transcript.len() + 1,
            node: k,
            omega,
            v,
        };
        self.pending = Some(closure.clone());
        Ok(Some(closure))
    }

    /// Install θ_n for the pending closure and finish its node.
    pub fn close(&mut self, theta: Vec<f64>) -> Result<()> {
        let c = self
            .pending
            .take()
            .ok_or_else(|| Error::contract("no window closure is pending"))?;
        check_dim("comment", theta.len(), self.comments[0].len())?;
        self.transcript.boundaries.push(self.run.t());
        self.transcript.nodes.push(c.node);
        self.transcript.omega.push(c.omega.clone());
        self.transcript.v.push(c.v);
        self.comments.push(theta.clone());
        self.run.theta = theta;
        self.run.omega = c.omega.clone();
        self.start = c.node;
        self.set_phi = self.run.phi.clone();
        self.set_omega = c.omega;
        self.run.complete()?;
        self.run.step()
    }

    pub fn finish(self) -> Result<TacticalTrace> {
        if self.pending.is_some() || !self.run.done() {
            return Err(Error::contract("session finished before the horizon"));
        }
        Ok(TacticalTrace {
            trajectory: self.run.into_trajectory(),
            transcript: self.transcript,
            comments: self.comments,
            labels: self.labels,
            ends: self.ends,
        })
    }
}

/// Windowed run of `game`; comments follow `rule`, or stay at the game's θ_0.
pub(crate) fn run_windows(
    game: &GameSpec,
    grid: Grid,
    segmenter: &Segmenter,
    fs: &WindowFunctionals,
    rule: Option<&CommentRule>,
) -> Result<TacticalTrace> {
    let theta0 = rule.map_or_else(|| game.theta0.clone(), |r| r.theta0.clone());
    let mut session = Session::new(Run::new(game, grid)?, theta0, segmenter, fs)?;
    while !session.done() {
        if let Some(c) = session.advance()? {
            let theta = match rule {
                Some(r) => update_comment(r, c.n, session.theta(), &c.omega, &c.v)?,
                None => session.theta().to_vec(),
            };
            session.close(theta)?;
        }
    }
    session.finish()
}

/// A complete tactical game: engine game, segmentation, functionals, Θ.
#[derive(Clone, Debug)]
pub struct TacticalSpec {
    pub game: GameSpec,
    pub segmenter: Segmenter,
    pub functionals: WindowFunctionals,
    pub rule: CommentRule,
}

pub fn run_tactical(spec: &TacticalSpec, horizon: f64, h: f64) -> Result<TacticalTrace> {
    let grid = Grid::new(spec.game.t0, horizon, h)?;
    run_windows(&spec.game, grid, &spec.segmenter, &spec.functionals, Some(&spec.rule))
}
