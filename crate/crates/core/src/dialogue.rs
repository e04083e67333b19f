//! Dialogues: continuous intention fields ξ and the window functionals that
//! turn continuous streams into discrete states ω_n and controls v_n.

use std::fmt;
use std::sync::Arc;

use crate::engine::{rk4::rk4_step, GameSpec, Grid, Trajectory};
use crate::error::{all_finite, check_dim, Error, Result};
use crate::tactics::{run_windows, Segmenter};

#[derive(Debug, Clone, Copy)]
pub struct IntentionInput<'a> {
    pub t: f64,
    pub xi: &'a [f64],
    pub u: &'a [f64],
}

/// Intention field `ξ' = Ξ(ξ, u)`.
#[derive(Clone)]
pub struct IntentionField {
    pub xi0: Vec<f64>,
    dynamics: Arc<dyn Fn(&IntentionInput<'_>) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for IntentionField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntentionField").field("xi0", &self.xi0).finish_non_exhaustive()
    }
}

impl IntentionField {
    pub fn new<F>(xi0: Vec<f64>, dynamics: F) -> Self
    where
        F: Fn(&IntentionInput<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        IntentionField {
            xi0,
            dynamics: Arc::new(dynamics),
        }
    }

    pub fn zero(xi0: Vec<f64>) -> Self {
        let dim = xi0.len();
        IntentionField::new(xi0, move |_| vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.xi0.len()
    }

    pub fn advance(&self, t: f64, xi: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>> {
        check_dim("intention state", xi.len(), self.dim())?;
        rk4_step(t, xi, h, |ts, x| Ok((self.dynamics)(&IntentionInput { t: ts, xi: x, u })))
    }
}

/// One fourth-order step of ξ with `u` held.
pub fn advance_intention(field: &IntentionField, t: f64, xi: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {h}")));
    }
    field.advance(t, xi, u, h)
}

/// State-side functionals read ε and produce ω; control-side ones read u°
/// and produce v.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    State,
    Control,
}

/// Continuous stream a functional reads alongside ε or u°.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Phi,
    Xi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Integral,
    Mean,
    First,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    /// Trapezoid rule over the grid nodes of the window.
    #[default]
    Trapezoid,
    /// Left-endpoint sums: exact for streams held constant across each step.
    Hold,
}

/// Sample of the streams a window integrand may read at one node. The field
/// of the opposite side is always empty.
#[derive(Debug, Clone, Copy)]
pub struct WindowPoint<'a> {
    pub t: f64,
    pub eps: &'a [f64],
    pub u0: &'a [f64],
    pub phi: &'a [f64],
    pub xi: &'a [f64],
}

pub type IntegrandFn = Arc<dyn Fn(&WindowPoint<'_>) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct WindowFunctional {
    pub name: String,
    pub side: Side,
    pub stream: Stream,
    pub kind: WindowKind,
    pub quadrature: Quadrature,
    pub dim: usize,
    integrand: IntegrandFn,
}

impl fmt::Debug for WindowFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WindowFunctional")
            .field("name", &self.name)
            .field("side", &self.side)
            .field("stream", &self.stream)
            .field("kind", &self.kind)
            .field("quadrature", &self.quadrature)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl WindowFunctional {
    pub fn new<F>(name: impl Into<String>, side: Side, kind: WindowKind, dim: usize, integrand: F) -> Self
    where
        F: Fn(&WindowPoint<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        WindowFunctional {
            name: name.into(),
            side,
            stream: Stream::Phi,
            kind,
            quadrature: Quadrature::Trapezoid,
            dim,
            integrand: Arc::new(integrand),
        }
    }

    pub fn reading(mut self, stream: Stream) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_quadrature(mut self, quadrature: Quadrature) -> Self {
        self.quadrature = quadrature;
        self
    }

    /// Window mean of the whole ε vector.
    pub fn mean_eps(dim: usize) -> Self {
        WindowFunctional::new("mean eps", Side::State, WindowKind::Mean, dim, |p| p.eps.to_vec())
    }

    /// Window integral of the whole u° vector.
    pub fn integral_u0(dim: usize) -> Self {
        WindowFunctional::new("integral u0", Side::Control, WindowKind::Integral, dim, |p| p.u0.to_vec())
    }

    fn sample(&self, traj: &Trajectory, k: usize) -> Result<Vec<f64>> {
        let (eps, u0): (&[f64], &[f64]) = match self.side {
            Side::State => (&traj.eps[k], &[]),
            Side::Control => (&[], &traj.u0[k]),
        };
        let (phi, xi): (&[f64], &[f64]) = match self.stream {
            Stream::Phi => (&traj.phi[k], &[]),
            Stream::Xi => match &traj.xi {
                Some(xs) => (&[], &xs[k]),
                None => {
                    return Err(Error::contract(format!(
                        "functional `{}` reads ξ but the game has no intention field",
                        self.name
                    )))
                }
            },
        };
        let y = (self.integrand)(&WindowPoint {
            t: traj.times[k],
            eps,
            u0,
            phi,
            xi,
        });
        check_dim(&format!("functional `{}`", self.name), y.len(), self.dim)?;
        Ok(y)
    }

    /// Value over nodes `a..=b` of `traj`.
    pub fn eval(&self, traj: &Trajectory, a: usize, b: usize) -> Result<Vec<f64>> {
        match self.kind {
            WindowKind::First => return self.sample(traj, a),
            WindowKind::Last => return self.sample(traj, b),
            _ => {}
        }
        let mut acc = vec![0.0; self.dim];
        match self.quadrature {
            Quadrature::Trapezoid => {
                let mut left = self.sample(traj, a)?;
                for k in a..b {
                    let right = self.sample(traj, k + 1)?;
                    let half = 0.5 * (traj.times[k + 1] - traj.times[k]);
                    for ((s, l), r) in acc.iter_mut().zip(&left).zip(&right) {
                        *s += half * (l + r);
                    }
                    left = right;
                }
            }
            Quadrature::Hold => {
                for k in a..b {
                    let y = self.sample(traj, k)?;
                    let dt = traj.times[k + 1] - traj.times[k];
                    for (s, v) in acc.iter_mut().zip(&y) {
                        *s += dt * v;
                    }
                }
            }
        }
        if self.kind == WindowKind::Mean {
            if a == b {
                return self.sample(traj, a);
            }
            let span = traj.times[b] - traj.times[a];
            acc.iter_mut().for_each(|s| *s /= span);
        }
        Ok(acc)
    }
}

/// The functionals producing ω (state side) and v (control side).
#[derive(Clone, Debug, Default)]
pub struct WindowFunctionals {
    pub omega: Vec<WindowFunctional>,
    pub v: Vec<WindowFunctional>,
}

impl WindowFunctionals {
    pub fn new(omega: Vec<WindowFunctional>, v: Vec<WindowFunctional>) -> Result<Self> {
        if let Some(f) = omega.iter().find(|f| f.side != Side::State) {
            return Err(Error::contract(format!("ω functional `{}` must be state-side", f.name)));
        }
        if let Some(f) = v.iter().find(|f| f.side != Side::Control) {
            return Err(Error::contract(format!("v functional `{}` must be control-side", f.name)));
        }
        Ok(WindowFunctionals { omega, v })
    }

    pub fn omega_dim(&self) -> usize {
        self.omega.iter().map(|f| f.dim).sum()
    }

    pub fn v_dim(&self) -> usize {
        self.v.iter().map(|f| f.dim).sum()
    }
}

/// `(ω_n, v_n)` over the window of nodes `a..=b`.
pub fn eval_window_functionals(
    fs: &WindowFunctionals,
    traj: &Trajectory,
    a: usize,
    b: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if b < a || b >= traj.times.len() {
        return Err(Error::contract(format!(
            "window [{a}, {b}] is empty or outside the {} recorded nodes",
            traj.times.len()
        )));
    }
    let mut omega = Vec::with_capacity(fs.omega_dim());
    for f in &fs.omega {
        omega.extend(f.eval(traj, a, b)?);
    }
    let mut v = Vec::with_capacity(fs.v_dim());
    for f in &fs.v {
        v.extend(f.eval(traj, a, b)?);
    }
    if !all_finite(&omega) || !all_finite(&v) {
        return Err(Error::numeric(traj.times[b], &traj.phi[b], format!("non-finite window functional on nodes {a}..={b}")));
    }
    Ok((omega, v))
}

/// Window boundaries `t_0 < t_1 < …` with one `(ω_n, v_n)` per window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DialogueTranscript {
    pub boundaries: Vec<f64>,
    /// Grid node of each boundary.
    pub nodes: Vec<usize>,
    pub omega: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl DialogueTranscript {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Evaluate the functionals on the windows between consecutive nodes.
    pub fn from_nodes(traj: &Trajectory, fs: &WindowFunctionals, nodes: &[usize]) -> Result<Self> {
        if nodes.len() < 2 || nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("window nodes must be strictly increasing with at least one window"));
        }
        let mut out = DialogueTranscript {
            boundaries: nodes.iter().map(|&k| traj.times[k]).collect(),
            nodes: nodes.to_vec(),
            ..Default::default()
        };
        for w in nodes.windows(2) {
            let (omega, v) = eval_window_functionals(fs, traj, w[0], w[1])?;
            out.omega.push(omega);
            out.v.push(v);
        }
        Ok(out)
    }
}

/// A-priori window boundaries; they must tile `[t0, T]` on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPartition {
    pub boundaries: Vec<f64>,
}

impl FixedPartition {
    pub fn new(boundaries: Vec<f64>) -> Self {
        FixedPartition { boundaries }
    }

    pub fn uniform(t0: f64, horizon: f64, windows: usize) -> Self {
        let w = (horizon - t0) / windows as f64;
        let mut b: Vec<f64> = (0..windows).map(|i| t0 + i as f64 * w).collect();
        b.push(horizon);
        FixedPartition { boundaries: b }
    }

    /// Grid nodes of the boundaries.
    pub fn nodes(&self, grid: &Grid) -> Result<Vec<usize>> {
        let b = &self.boundaries;
        if b.len() < 2 {
            return Err(Error::contract("partition needs at least two boundaries"));
        }
        let mut nodes = Vec::with_capacity(b.len());
        for &t in b {
            let k = grid
                .node_of(t)
                .ok_or_else(|| Error::contract(format!("partition boundary {t} is not a grid node")))?;
            nodes.push(k);
        }
        if nodes[0] != 0 || *nodes.last().unwrap() != grid.steps {
            return Err(Error::contract(format!(
                "partition [{}, {}] does not cover [{}, {}]",
                b[0],
                b[b.len() - 1],
                grid.t0,
                grid.end()
            )));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("partition boundaries must be strictly increasing"));
        }
        Ok(nodes)
    }
}

/// Run the game over an explicit partition and record its transcript.
pub fn run_dialogue(
    game: &GameSpec,
    partition: &FixedPartition,
    fs: &WindowFunctionals,
    horizon: f64,
    h: f64,
) -> Result<(Trajectory, DialogueTranscript)> {
    let grid = Grid::new(game.t0, horizon, h)?;
    let nodes = partition.nodes(&grid)?;
    let trace = run_windows(game, grid, &Segmenter::Fixed(nodes), fs, None)?;
    Ok((trace.trajectory, trace.transcript))
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::engine::{simulate, EvolutionField, FeedbackLaw, HiddenMap, Player, PureControl};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn integral_is_additive(a in 0usize..40, len1 in 0usize..30, len2 in 0usize..30, w in 0.5f64..5.0) {
            let game = GameSpec::new(vec![1.0], EvolutionField::new(1, |f| vec![-f.phi[0] + f.u[0]]))
                .with_player(Player::new(
                    "p",
                    PureControl::new(1, move |s| vec![(w * s.t).sin()]),
                    FeedbackLaw::affine(HiddenMap::new(1, |h| vec![0.5 * h.phi[0].sin()])),
                ));
            let traj = simulate(&game, 1.0, 0.01).unwrap();
            let (b, c) = (a + len1, a + len1 + len2);
            for f in [
                WindowFunctional::integral_u0(1),
                WindowFunctional::new("int eps", Side::State, WindowKind::Integral, 1, |p| p.eps.to_vec())
                    .with_quadrature(Quadrature::Hold),
            ] {
                let whole = f.eval(&traj, a, c).unwrap()[0];
                let parts = f.eval(&traj, a, b).unwrap()[0] + f.eval(&traj, b, c).unwrap()[0];
                prop_assert!((whole - parts).abs() <= 1e-12);
            }
        }
    }
}
