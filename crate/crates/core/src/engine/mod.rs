//! Continuous-time core: interactive systems under ε-represented feedback
//! couplings, integrated with a fixed-step fourth-order scheme.
//!
//! A player's realized control is `u = coupling(u°, φ; ε)`. The coupling is
//! public; the ε-map producing `ε` from `(u°, φ)` is held by the engine and
//! never handed to strategies, which only see [`StrategyInput`].
//!
//! Per grid node the engine samples the pure controls `u°` and the hidden
//! parameters `ε` and holds them across the following step. The coupling and
//! any coalition aggregation are state feedbacks and are re-evaluated at every
//! Runge–Kutta stage.

mod coalition;
mod invariant;
pub mod rk4;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use coalition::{Aggregator, AggregateInput, Coalition, CoalitionMap};
pub use invariant::{check_invariant_functionals, FunctionalDrift, InvariantFunctional, InvariantInput};

use crate::dialogue::IntentionField;
use crate::error::{all_finite, check_dim, Error, Result};
use crate::rng;
use crate::tactics::{bind_parameters, BoundGame, ParametricBinding};

#[derive(Debug, Clone, PartialEq)]
pub struct GameState {
    pub t: f64,
    pub phi: Vec<f64>,
}

/// What a player's strategy may look at. There is deliberately no ε here.
#[derive(Debug, Clone, Copy)]
pub struct StrategyInput<'a> {
    pub t: f64,
    pub phi: &'a [f64],
    pub theta: &'a [f64],
    /// Present only when the scenario makes dialogue states visible.
    pub omega: Option<&'a [f64]>,
    pub lambda: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct CouplingInput<'a> {
    pub u0: &'a [f64],
    pub phi: &'a [f64],
    pub eps: &'a [f64],
    pub theta: &'a [f64],
    pub omega: &'a [f64],
    pub lambda: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct HiddenInput<'a> {
    pub t: f64,
    pub u0: &'a [f64],
    pub phi: &'a [f64],
    pub noise: &'a [f64],
    pub theta: &'a [f64],
    pub omega: &'a [f64],
    pub lambda: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct FieldInput<'a> {
    pub t: f64,
    pub phi: &'a [f64],
    pub u: &'a [f64],
    pub theta: &'a [f64],
    pub omega: &'a [f64],
    pub lambda: &'a [f64],
}

pub type StrategyFn = Arc<dyn Fn(&StrategyInput<'_>) -> Vec<f64> + Send + Sync>;
pub type CouplingFn = Arc<dyn Fn(&CouplingInput<'_>) -> Vec<f64> + Send + Sync>;
pub type HiddenFn = Arc<dyn Fn(&HiddenInput<'_>) -> Vec<f64> + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(&FieldInput<'_>) -> Vec<f64> + Send + Sync>;

/// A player's independently chosen control `t ↦ u°(t)`, optionally saturated
/// to box bounds.
#[derive(Clone)]
pub struct PureControl {
    dim: usize,
    bounds: Option<Vec<(f64, f64)>>,
    strategy: StrategyFn,
}

impl fmt::Debug for PureControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PureControl")
            .field("dim", &self.dim)
            .field("bounds", &self.bounds)
            .finish_non_exhaustive()
    }
}

impl PureControl {
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&StrategyInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        PureControl {
            dim,
            bounds: None,
            strategy: Arc::new(f),
        }
    }

    pub fn constant(values: Vec<f64>) -> Self {
        let dim = values.len();
        PureControl::new(dim, move |_| values.clone())
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        check_dim("pure control bounds", bounds.len(), self.dim)?;
        if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::contract(format!("empty control bound [{lo}, {hi}]")));
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    /// Evaluate the strategy, saturating to the declared bounds.
    pub fn eval(&self, input: &StrategyInput<'_>) -> Result<Vec<f64>> {
        let mut u0 = (self.strategy)(input);
        check_dim("pure control output", u0.len(), self.dim)?;
        if !all_finite(&u0) {
            return Err(Error::numeric(input.t, input.phi, "non-finite pure control"));
        }
        if let Some(bounds) = &self.bounds {
            for (x, (lo, hi)) in u0.iter_mut().zip(bounds) {
                *x = x.clamp(*lo, *hi);
            }
        }
        Ok(u0)
    }
}

/// The engine-side map `(u°, φ) ↦ ε`, optionally reading the run's seeded
/// noise channel.
#[derive(Clone)]
pub struct HiddenMap {
    eps_dim: usize,
    noise_dim: usize,
    f: HiddenFn,
}

impl fmt::Debug for HiddenMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HiddenMap")
            .field("eps_dim", &self.eps_dim)
            .field("noise_dim", &self.noise_dim)
            .finish_non_exhaustive()
    }
}

impl HiddenMap {
    pub fn new<F>(eps_dim: usize, f: F) -> Self
    where
        F: Fn(&HiddenInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        HiddenMap {
            eps_dim,
            noise_dim: 0,
            f: Arc::new(f),
        }
    }

    pub fn constant(values: Vec<f64>) -> Self {
        let dim = values.len();
        HiddenMap::new(dim, move |_| values.clone())
    }

    pub fn none() -> Self {
        HiddenMap::new(0, |_| Vec::new())
    }

    pub fn with_noise(mut self, noise_dim: usize) -> Self {
        self.noise_dim = noise_dim;
        self
    }

    pub fn eps_dim(&self) -> usize {
        self.eps_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
}

/// Known coupling `u = u(u°, φ; ε)` paired with the hidden ε-map.
#[derive(Clone)]
pub struct FeedbackLaw {
    u0_dim: usize,
    control_dim: usize,
    coupling: CouplingFn,
    hidden: HiddenMap,
}

impl fmt::Debug for FeedbackLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackLaw")
            .field("u0_dim", &self.u0_dim)
            .field("control_dim", &self.control_dim)
            .field("eps_dim", &self.hidden.eps_dim)
            .finish_non_exhaustive()
    }
}

impl FeedbackLaw {
    pub fn new<F>(u0_dim: usize, control_dim: usize, coupling: F, hidden: HiddenMap) -> Self
    where
        F: Fn(&CouplingInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        FeedbackLaw {
            u0_dim,
            control_dim,
            coupling: Arc::new(coupling),
            hidden,
        }
    }

    /// `u = u°`, no hidden parameters.
    pub fn identity(dim: usize) -> Self {
        FeedbackLaw::new(dim, dim, |c| c.u0.to_vec(), HiddenMap::none())
    }

    /// Scalar `u = u° + ε·φ₁`.
    pub fn affine(hidden: HiddenMap) -> Self {
        FeedbackLaw::new(1, 1, |c| vec![c.u0[0] + c.eps[0] * c.phi[0]], hidden)
    }

    /// Scalar `u = clip(u° + ε·φ₁, lo, hi)`.
    pub fn clamped_affine(lo: f64, hi: f64, hidden: HiddenMap) -> Self {
        FeedbackLaw::new(
            1,
            1,
            move |c| vec![(c.u0[0] + c.eps[0] * c.phi[0]).max(lo).min(hi)],
            hidden,
        )
    }

    pub fn u0_dim(&self) -> usize {
        self.u0_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn eps_dim(&self) -> usize {
        self.hidden.eps_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.hidden.noise_dim
    }

    /// Evaluate the known coupling. Pure; this is the only query open to
    /// players and estimators.
    pub fn eval_control(&self, u0: &[f64], phi: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        self.eval_control_with(&CouplingInput {
            u0,
            phi,
            eps,
            theta: &[],
            omega: &[],
            lambda: &[],
        })
    }

    pub fn eval_control_with(&self, input: &CouplingInput<'_>) -> Result<Vec<f64>> {
        check_dim("u0", input.u0.len(), self.u0_dim)?;
        check_dim("eps", input.eps.len(), self.hidden.eps_dim)?;
        let u = (self.coupling)(input);
        check_dim("coupling output", u.len(), self.control_dim)?;
        Ok(u)
    }

    pub(crate) fn eval_hidden(&self, input: &HiddenInput<'_>) -> Result<Vec<f64>> {
        let eps = (self.hidden.f)(input);
        check_dim("hidden map output", eps.len(), self.hidden.eps_dim)?;
        if !all_finite(&eps) {
            return Err(Error::numeric(input.t, input.phi, "non-finite hidden parameter"));
        }
        Ok(eps)
    }
}

#[derive(Clone, Debug)]
pub struct Player {
    pub name: String,
    pub pure: PureControl,
    pub law: FeedbackLaw,
}

impl Player {
    pub fn new(name: impl Into<String>, pure: PureControl, law: FeedbackLaw) -> Self {
        Player {
            name: name.into(),
            pure,
            law,
        }
    }
}

/// `Φ(φ, u; θ, ω, λ) → dφ/dt`.
#[derive(Clone)]
pub struct EvolutionField {
    dim: usize,
    f: FieldFn,
}

impl fmt::Debug for EvolutionField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvolutionField").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl EvolutionField {
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&FieldInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        EvolutionField { dim, f: Arc::new(f) }
    }

    pub fn zero(dim: usize) -> Self {
        EvolutionField::new(dim, move |_| vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, input: &FieldInput<'_>) -> Result<Vec<f64>> {
        let d = (self.f)(input);
        check_dim("evolution field output", d.len(), self.dim)?;
        Ok(d)
    }
}

/// Uniform time grid `t_k = t0 + k·h`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub t0: f64,
    pub h: f64,
    pub steps: usize,
}

impl Grid {
    /// Grid from `t0` to the final time `horizon`; the span must be a whole
    /// number of steps.
    pub fn new(t0: f64, horizon: f64, h: f64) -> Result<Grid> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::contract(format!("step must be positive, got {h}")));
        }
        if !(horizon > t0) || !horizon.is_finite() {
            return Err(Error::contract(format!("horizon {horizon} must exceed t0 {t0}")));
        }
        let span = horizon - t0;
        let steps = (span / h).round();
        if (steps * h - span).abs() > 1e-9 * span.max(1.0) {
            return Err(Error::contract(format!(
                "horizon span {span} is not a whole number of steps of {h}"
            )));
        }
        Ok(Grid {
            t0,
            h,
            steps: steps as usize,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    /// Node index of `t` if it lies on the grid (within a millionth of a step).
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.h;
        let k = x.round();
        if k < 0.0 || k > self.steps as f64 || (x - k).abs() > 1e-6 {
            return None;
        }
        Some(k as usize)
    }
}

/// Complete record of a run on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    /// Pure controls of all players, concatenated per node.
    pub u0: Vec<Vec<f64>>,
    /// Realized controls fed to Φ (per player or per coalition), concatenated.
    pub u: Vec<Vec<f64>>,
    /// Hidden parameters of all players, concatenated per node.
    pub eps: Vec<Vec<f64>>,
    /// Intention field samples, when the game has one.
    pub xi: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    fn with_capacity(grid: Grid, has_xi: bool) -> Self {
        let n = grid.steps + 1;
        Trajectory {
            grid,
            times: Vec::with_capacity(n),
            phi: Vec::with_capacity(n),
            u0: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            eps: Vec::with_capacity(n),
            xi: has_xi.then(|| Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_phi(&self) -> &[f64] {
        self.phi.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Nodes `[a, b]` inclusive, re-gridded from `t_a`.
    pub fn slice(&self, a: usize, b: usize) -> Trajectory {
        Trajectory {
            grid: Grid {
                t0: self.times[a],
                h: self.grid.h,
                steps: b - a,
            },
            times: self.times[a..=b].to_vec(),
            phi: self.phi[a..=b].to_vec(),
            u0: self.u0[a..=b].to_vec(),
            u: self.u[a..=b].to_vec(),
            eps: self.eps[a..=b].to_vec(),
            xi: self.xi.as_ref().map(|x| x[a..=b].to_vec()),
        }
    }
}

/// A complete interactive game: evolution field, players with their feedback
/// laws, optional coalitions and intention field, parameter routing, seed.
#[derive(Clone, Debug)]
pub struct GameSpec {
    pub t0: f64,
    pub phi0: Vec<f64>,
    pub field: EvolutionField,
    pub players: Vec<Player>,
    pub coalitions: Option<CoalitionMap>,
    pub intention: Option<IntentionField>,
    pub binding: ParametricBinding,
    /// Parameter (comment) values in force before any window closes.
    pub theta0: Vec<f64>,
    /// Dialogue state in force before the first window closes.
    pub omega0: Vec<f64>,
    /// Whether strategies may read the latest dialogue state ω.
    pub omega_visible: bool,
    pub seed: u64,
    /// Games sharing a seed draw independent noise when these differ.
    pub noise_stream: u64,
}

impl GameSpec {
    pub fn new(phi0: Vec<f64>, field: EvolutionField) -> Self {
        GameSpec {
            t0: 0.0,
            phi0,
            field,
            players: Vec::new(),
            coalitions: None,
            intention: None,
            binding: ParametricBinding::default(),
            theta0: Vec::new(),
            omega0: Vec::new(),
            omega_visible: false,
            seed: 0,
            noise_stream: 0,
        }
    }

    pub fn with_player(mut self, player: Player) -> Self {
        self.players.push(player);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_theta0(mut self, theta0: Vec<f64>) -> Self {
        self.theta0 = theta0;
        self
    }

    pub fn with_binding(mut self, binding: ParametricBinding) -> Self {
        self.binding = binding;
        self
    }

    pub fn with_coalitions(mut self, map: CoalitionMap) -> Self {
        self.coalitions = Some(map);
        self
    }

    pub fn with_intention(mut self, intention: IntentionField) -> Self {
        self.intention = Some(intention);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.phi0.len()
    }

    pub fn u0_dim(&self) -> usize {
        self.players.iter().map(|p| p.law.u0_dim()).sum()
    }

    pub fn eps_dim(&self) -> usize {
        self.players.iter().map(|p| p.law.eps_dim()).sum()
    }

    /// Offsets of each player's block in the concatenated u° and ε vectors.
    pub fn player_offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.players.len());
        let (mut a, mut b) = (0, 0);
        for p in &self.players {
            out.push((a, b));
            a += p.law.u0_dim();
            b += p.law.eps_dim();
        }
        out
    }

    /// Width of the realized control vector handed to Φ.
    pub fn control_dim(&self) -> usize {
        match &self.coalitions {
            Some(map) => map.coalitions.iter().map(|c| c.dim(&self.players)).sum(),
            None => self.players.iter().map(|p| p.law.control_dim()).sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi0.is_empty() {
            return Err(Error::contract("state dimension must be at least 1"));
        }
        if !all_finite(&self.phi0) {
            return Err(Error::contract("initial state must be finite"));
        }
        check_dim("evolution field", self.field.dim(), self.phi0.len())?;
        for (i, p) in self.players.iter().enumerate() {
            if p.pure.dim() != p.law.u0_dim() {
                return Err(Error::contract(format!(
                    "player {} ({}): pure control has dimension {}, coupling expects {}",
                    i + 1,
                    p.name,
                    p.pure.dim(),
                    p.law.u0_dim()
                )));
            }
        }
        if let Some(map) = &self.coalitions {
            map.validate(&self.players)?;
        }
        if let Some(lambda) = &self.binding.lambda {
            if lambda.dim == 0 {
                return Err(Error::contract("slow control schedule has dimension 0"));
            }
        }
        Ok(())
    }
}

/// Parameter values a coupling, hidden map or field is allowed to read.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ParamView<'a> {
    pub theta: &'a [f64],
    pub omega: &'a [f64],
    pub lambda: &'a [f64],
}

impl ParamView<'_> {
    pub const EMPTY: ParamView<'static> = ParamView {
        theta: &[],
        omega: &[],
        lambda: &[],
    };
}

/// Where the hidden parameters of a run come from.
#[derive(Clone, Copy)]
pub(crate) enum EpsSource<'a> {
    /// The engine's hidden maps (the real game).
    Hidden,
    /// Controls of virtual players, one per real player (associated game).
    Virtual(&'a [PureControl]),
    /// Constant per-player values (an estimate).
    Fixed(&'a [Vec<f64>]),
}

/// Node-by-node execution state shared by plain, tactical and predictive runs.
pub(crate) struct Run<'a> {
    pub game: &'a GameSpec,
    pub grid: Grid,
    strategies: Option<&'a [PureControl]>,
    eps_source: EpsSource<'a>,
    noise: Vec<ChaCha8Rng>,
    pub k: usize,
    pub phi: Vec<f64>,
    pub xi: Option<Vec<f64>>,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    lambda: Vec<f64>,
    held_u0: Vec<Vec<f64>>,
    held_eps: Vec<Vec<f64>>,
    pub traj: Trajectory,
}

impl<'a> Run<'a> {
    pub fn new(game: &'a GameSpec, grid: Grid) -> Result<Self> {
        game.validate()?;
        if grid.t0 != game.t0 {
            return Err(Error::contract(format!(
                "grid starts at {}, game at {}",
                grid.t0, game.t0
            )));
        }
        let noise = (0..game.players.len())
            .map(|i| rng::stream(game.seed, rng::player_noise(game.noise_stream, i)))
            .collect();
        Ok(Run {
            game,
            grid,
            strategies: None,
            eps_source: EpsSource::Hidden,
            noise,
            k: 0,
            phi: game.phi0.clone(),
            xi: game.intention.as_ref().map(|f| f.xi0.clone()),
            theta: game.theta0.clone(),
            omega: game.omega0.clone(),
            lambda: Vec::new(),
            held_u0: Vec::new(),
            held_eps: Vec::new(),
            traj: Trajectory::with_capacity(grid, game.intention.is_some()),
        })
    }

    /// Start from an arbitrary state instead of the game's initial one.
    pub fn starting_at(mut self, phi: Vec<f64>) -> Result<Self> {
        check_dim("initial state", phi.len(), self.game.state_dim())?;
        self.phi = phi;
        Ok(self)
    }

    pub fn with_strategies(mut self, strategies: &'a [PureControl]) -> Result<Self> {
        check_dim("strategy count", strategies.len(), self.game.players.len())?;
        for (s, p) in strategies.iter().zip(&self.game.players) {
            check_dim("strategy output", s.dim(), p.law.u0_dim())?;
        }
        self.strategies = Some(strategies);
        Ok(self)
    }

    pub fn with_eps_source(mut self, source: EpsSource<'a>) -> Result<Self> {
        let dims: Vec<usize> = self.game.players.iter().map(|p| p.law.eps_dim()).collect();
        match source {
            EpsSource::Hidden => {}
            EpsSource::Virtual(v) => {
                check_dim("virtual player count", v.len(), dims.len())?;
                for (s, d) in v.iter().zip(&dims) {
                    check_dim("virtual strategy output", s.dim(), *d)?;
                }
            }
            EpsSource::Fixed(v) => {
                check_dim("estimate count", v.len(), dims.len())?;
                for (e, d) in v.iter().zip(&dims) {
                    check_dim("estimate", e.len(), *d)?;
                }
            }
        }
        self.eps_source = source;
        Ok(self)
    }

    pub fn t(&self) -> f64 {
        self.grid.time(self.k)
    }

    pub fn done(&self) -> bool {
        self.k > self.grid.steps
    }

    fn bound(&self) -> BoundGame<'_> {
        bind_parameters(self.game, &self.theta, &self.omega, &self.lambda)
    }

    /// Sample u°, noise and ε at the current node and record φ, ξ, u°, ε.
    pub fn sample(&mut self) -> Result<()> {
        let t = self.t();
        let game = self.game;
        self.lambda = match &game.binding.lambda {
            Some(s) => s.eval(t)?,
            None => Vec::new(),
        };
        let ctx = |e: Error| match e {
            Error::Numeric { t, phi, context } => Error::Numeric {
                t,
                phi,
                context: format!("{context} at node {}", self.k),
            },
            other => other,
        };

        let bound = bind_parameters(game, &self.theta, &self.omega, &self.lambda);
        let input = bound.strategy_input(t, &self.phi);
        let mut u0s = Vec::with_capacity(game.players.len());
        for (i, p) in game.players.iter().enumerate() {
            let pure = self.strategies.map_or(&p.pure, |s| &s[i]);
            u0s.push(pure.eval(&input).map_err(ctx)?);
        }

        let mut epss = Vec::with_capacity(game.players.len());
        for (i, p) in game.players.iter().enumerate() {
            let noise: Vec<f64> = (0..p.law.noise_dim())
                .map(|_| self.noise[i].sample(StandardNormal))
                .collect();
            let eps = match self.eps_source {
                EpsSource::Hidden => bound.hidden(i, t, &u0s[i], &self.phi, &noise).map_err(ctx)?,
                EpsSource::Virtual(v) => v[i].eval(&input).map_err(ctx)?,
                EpsSource::Fixed(v) => v[i].clone(),
            };
            epss.push(eps);
        }

        self.traj.times.push(t);
        self.traj.phi.push(self.phi.clone());
        if let (Some(xs), Some(xi)) = (self.traj.xi.as_mut(), self.xi.as_ref()) {
            xs.push(xi.clone());
        }
        self.traj.u0.push(u0s.concat());
        self.traj.eps.push(epss.concat());
        self.held_u0 = u0s;
        self.held_eps = epss;
        Ok(())
    }

    /// Record the realized control at the current node under the parameters
    /// now in force.
    pub fn complete(&mut self) -> Result<()> {
        let u = self
            .bound()
            .realize(&self.phi, &self.held_u0, &self.held_eps)?;
        if !all_finite(&u) {
            return Err(Error::numeric(self.t(), &self.phi, format!("non-finite control at node {}", self.k)));
        }
        self.traj.u.push(u);
        Ok(())
    }

    /// Advance one step with held u° and ε; the feedback is re-evaluated per
    /// stage. At the last node this only moves the cursor past the end.
    pub fn step(&mut self) -> Result<()> {
        if self.k < self.grid.steps {
            let t = self.t();
            let h = self.grid.h;
            let bound = self.bound();
            let (u0, eps) = (&self.held_u0, &self.held_eps);
            let next = rk4::rk4_step(t, &self.phi, h, |ts, y| {
                let u = bound.realize(y, u0, eps)?;
                bound.field(ts, y, &u)
            })
            .map_err(|e| match e {
                Error::Numeric { t, phi, context } => Error::Numeric {
                    t,
                    phi,
                    context: format!("{context} in step from node {}", self.k),
                },
                other => other,
            })?;
            if let (Some(xi), Some(field)) = (self.xi.as_mut(), self.game.intention.as_ref()) {
                let u = self.traj.u.last().cloned().unwrap_or_default();
                *xi = field.advance(t, xi, &u, h)?;
            }
            self.phi = next;
        }
        self.k += 1;
        Ok(())
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.traj
    }
}

/// Realized control under the game's coupling: `u = coupling(u°, φ; ε)`.
pub fn eval_control(law: &FeedbackLaw, u0: &[f64], phi: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    law.eval_control(u0, phi, eps)
}

/// One fourth-order step of `φ' = Φ(φ, u)` with `u` held constant.
pub fn step(field: &EvolutionField, state: &GameState, controls: &[f64], h: f64) -> Result<GameState> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {h}")));
    }
    check_dim("state", state.phi.len(), field.dim())?;
    let phi = rk4::rk4_step(state.t, &state.phi, h, |t, y| {
        field.eval(&FieldInput {
            t,
            phi: y,
            u: controls,
            theta: &[],
            omega: &[],
            lambda: &[],
        })
    })?;
    Ok(GameState { t: state.t + h, phi })
}

/// Integrate the game from `t0` to the final time `horizon` with step `h`.
pub fn simulate(game: &GameSpec, horizon: f64, h: f64) -> Result<Trajectory> {
    let grid = Grid::new(game.t0, horizon, h)?;
    let mut run = Run::new(game, grid)?;
    while !run.done() {
        run.sample()?;
        run.complete()?;
        run.step()?;
    }
    Ok(run.into_trajectory())
}

/// Coalition controls `v_i` for the given pure controls, state and ε.
pub fn aggregate_coalition(
    map: &CoalitionMap,
    players: &[Player],
    u0: &[Vec<f64>],
    phi: &[f64],
    eps: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    map.validate(players)?;
    map.aggregate(players, u0, phi, eps, ParamView::EMPTY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    pub(crate) fn lin2(a: f64, eps: [f64; 2], phi0: f64) -> GameSpec {
        GameSpec::new(
            vec![phi0],
            EvolutionField::new(1, move |f| vec![a * f.phi[0] + f.u[0] + f.u[1]]),
        )
        .with_player(Player::new(
            "p1",
            PureControl::constant(vec![0.0]),
            FeedbackLaw::affine(HiddenMap::constant(vec![eps[0]])),
        ))
        .with_player(Player::new(
            "p2",
            PureControl::constant(vec![0.0]),
            FeedbackLaw::affine(HiddenMap::constant(vec![eps[1]])),
        ))
    }

    #[test]
    fn eval_control_examples() {
        let id = FeedbackLaw::identity(1);
        assert_eq!(eval_control(&id, &[0.7], &[3.0], &[]).unwrap(), vec![0.7]);
        let aff = FeedbackLaw::affine(HiddenMap::constant(vec![0.0]));
        assert_eq!(eval_control(&aff, &[1.0], &[2.0], &[0.5]).unwrap(), vec![2.0]);
        let clamped = FeedbackLaw::clamped_affine(-1.0, 1.0, HiddenMap::constant(vec![0.0]));
        assert_eq!(eval_control(&clamped, &[1.0], &[2.0], &[0.5]).unwrap(), vec![1.0]);
    }

    #[test]
    fn eval_control_dimension_mismatch_names_argument() {
        let aff = FeedbackLaw::affine(HiddenMap::constant(vec![0.0]));
        let err = eval_control(&aff, &[1.0, 2.0], &[2.0], &[0.5]).unwrap_err();
        assert!(err.to_string().contains("u0"), "{err}");
        let err = eval_control(&aff, &[1.0], &[2.0], &[]).unwrap_err();
        assert!(err.to_string().contains("eps"), "{err}");
    }

    #[test]
    fn zero_field_step_is_identity() {
        let s = GameState {
            t: 0.0,
            phi: vec![1.5, -2.0],
        };
        for h in [1e-3, 0.1, 10.0] {
            let next = step(&EvolutionField::zero(2), &s, &[], h).unwrap();
            assert_eq!(next.phi, s.phi);
            assert_eq!(next.t, h);
        }
        assert!(step(&EvolutionField::zero(2), &s, &[], 0.0).is_err());
    }

    #[test]
    fn step_matches_exponential() {
        let field = EvolutionField::new(1, |f| vec![-f.phi[0]]);
        let s = step(&field, &GameState { t: 0.0, phi: vec![1.0] }, &[], 0.1).unwrap();
        assert!((s.phi[0] - (-0.1_f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn non_finite_derivative_reports_time_and_state() {
        let field = EvolutionField::new(1, |f| vec![f.phi[0].ln()]);
        let game = GameSpec::new(vec![-1.0], field);
        match simulate(&game, 1.0, 0.1).unwrap_err() {
            Error::Numeric { t, phi, context } => {
                assert_eq!(t, 0.0);
                assert_eq!(phi, vec![-1.0]);
                assert!(context.contains("node 0"), "{context}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_field_simulation_is_constant() {
        let game = GameSpec::new(vec![0.25, 4.0], EvolutionField::zero(2));
        let traj = simulate(&game, 1.0, 0.01).unwrap();
        assert_eq!(traj.len(), 101);
        assert!(traj.phi.iter().all(|p| p == &vec![0.25, 4.0]));
    }

    #[test]
    fn lin2_matches_closed_form() {
        let (a, eps) = (-1.0, [-2.5, -1.5]);
        let traj = simulate(&lin2(a, eps, 1.0), 2.0, 1e-3).unwrap();
        let exact = ((a + eps[0] + eps[1]) * 2.0_f64).exp();
        assert!((traj.final_phi()[0] - exact).abs() < 1e-6);
        assert_eq!(traj.u0.len(), traj.len());
        assert_eq!(traj.u.len(), traj.len());
        assert_eq!(traj.eps.len(), traj.len());
    }

    #[test]
    fn lin2_error_ratio_is_fourth_order() {
        let (a, eps) = (-1.0, [-2.5, -1.5]);
        let exact = ((a + eps[0] + eps[1]) * 2.0_f64).exp();
        let err = |h: f64| (simulate(&lin2(a, eps, 1.0), 2.0, h).unwrap().final_phi()[0] - exact).abs();
        let ratio = err(2e-3) / err(1e-3);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn simulation_is_bit_deterministic_with_noise() {
        let game = GameSpec::new(
            vec![1.0],
            EvolutionField::new(1, |f| vec![-f.phi[0] + f.u[0]]),
        )
        .with_player(Player::new(
            "p",
            PureControl::new(1, |s| vec![s.t.sin()]),
            FeedbackLaw::affine(HiddenMap::new(1, |h| vec![0.1 * h.noise[0]]).with_noise(1)),
        ))
        .with_seed(42);
        let a = simulate(&game, 1.0, 0.01).unwrap();
        let b = simulate(&game, 1.0, 0.01).unwrap();
        assert_eq!(a, b);
        let c = simulate(&game.clone().with_seed(43), 1.0, 0.01).unwrap();
        assert_ne!(a.eps, c.eps);
    }

    #[test]
    fn strategies_never_see_hidden_parameters() {
        // The probe records everything its input exposes; ε is not among it.
        let seen: Arc<Mutex<Vec<(f64, Vec<f64>, Vec<f64>, bool)>>> = Arc::default();
        let probe = {
            let seen = Arc::clone(&seen);
            PureControl::new(1, move |s: &StrategyInput<'_>| {
                seen.lock()
                    .unwrap()
                    .push((s.t, s.phi.to_vec(), s.theta.to_vec(), s.omega.is_some()));
                vec![0.0]
            })
        };
        let game = GameSpec::new(vec![1.0], EvolutionField::new(1, |f| vec![f.u[0]]))
            .with_player(Player::new(
                "probe",
                probe,
                FeedbackLaw::affine(HiddenMap::constant(vec![0.75])),
            ));
        let traj = simulate(&game, 0.1, 0.01).unwrap();
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), traj.len());
        for ((t, phi, theta, omega_visible), k) in seen.iter().zip(0..) {
            assert_eq!(*t, traj.times[k]);
            assert_eq!(phi, &traj.phi[k]);
            assert!(theta.is_empty());
            assert!(!omega_visible);
        }
    }

    #[test]
    fn pure_controls_saturate_to_bounds() {
        let game = GameSpec::new(vec![0.0], EvolutionField::new(1, |f| vec![f.u[0]])).with_player(
            Player::new(
                "p",
                PureControl::constant(vec![5.0]).with_bounds(vec![(-1.0, 1.0)]).unwrap(),
                FeedbackLaw::identity(1),
            ),
        );
        let traj = simulate(&game, 1.0, 0.1).unwrap();
        assert!(traj.u0.iter().all(|u| u == &vec![1.0]));
        assert!((traj.final_phi()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_fractional_horizon() {
        assert!(Grid::new(0.0, 1.0, 0.3).is_err());
        assert!(Grid::new(0.0, 1.0, -0.1).is_err());
        assert!(Grid::new(1.0, 1.0, 0.1).is_err());
        let g = Grid::new(0.0, 1.0, 0.1).unwrap();
        assert_eq!(g.steps, 10);
        assert_eq!(g.node_of(0.5), Some(5));
        assert_eq!(g.node_of(0.55), None);
    }
}
