//! A-posteriori estimation of hidden feedback parameters, short-term
//! prediction, prediction correction and the long/short strategic forecast
//! through the associated game of virtual players.

use crate::engine::{EpsSource, GameSpec, GameState, Grid, PureControl, Run, Trajectory};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tactics::bind_parameters;

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonEstimate {
    /// Estimation window, node indices of the source trajectory (inclusive).
    pub first: usize,
    pub last: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Constant ε̂ per player over the window.
    pub eps: Vec<Vec<f64>>,
    pub identifiable: Vec<bool>,
    /// Largest absolute residual of the fitted controls.
    pub residual: f64,
}

impl EpsilonEstimate {
    pub fn all_identifiable(&self) -> bool {
        self.identifiable.iter().all(|&b| b)
    }
}

/// Least-squares ε̂ over nodes `[a, b]` of `traj`, assuming each player's
/// coupling is affine in ε. The coupling is probed at ε = 0 and at the unit
/// vectors; the hidden maps are never evaluated.
pub fn estimate_epsilon(game: &GameSpec, traj: &Trajectory, a: usize, b: usize) -> Result<EpsilonEstimate> {
    if game.coalitions.is_some() {
        return Err(Error::contract("cannot separate per-player controls of a coalition game"));
    }
    if !(a < b && b < traj.len()) {
        return Err(Error::contract(format!(
            "estimation window [{a}, {b}] needs at least two nodes of a {}-node trajectory",
            traj.len()
        )));
    }
    let lambda_at = |t: f64| -> Result<Vec<f64>> {
        match &game.binding.lambda {
            Some(s) => s.eval(t),
            None => Ok(Vec::new()),
        }
    };
    let offsets = game.player_offsets();
    let mut control_offsets = Vec::with_capacity(game.players.len());
    let mut c = 0;
    for p in &game.players {
        control_offsets.push(c);
        c += p.law.control_dim();
    }

    let mut eps = Vec::with_capacity(game.players.len());
    let mut identifiable = Vec::with_capacity(game.players.len());
    let mut residual = 0.0_f64;
    for (i, player) in game.players.iter().enumerate() {
        let (d, m) = (player.law.eps_dim(), player.law.control_dim());
        if d == 0 {
            eps.push(Vec::new());
            identifiable.push(true);
            continue;
        }
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for k in a..=b {
            let lambda = lambda_at(traj.times[k])?;
            let bound = bind_parameters(game, &game.theta0, &game.omega0, &lambda);
            let (u0a, _) = offsets[i];
            let u0 = &traj.u0[k][u0a..u0a + player.law.u0_dim()];
            let phi = &traj.phi[k];
            let base = bound.coupling(i, u0, phi, &vec![0.0; d])?;
            let mut cols = Vec::with_capacity(d);
            for j in 0..d {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                let one = bound.coupling(i, u0, phi, &e)?;
                e[j] = 2.0;
                let two = bound.coupling(i, u0, phi, &e)?;
                let col: Vec<f64> = one.iter().zip(&base).map(|(x, y)| x - y).collect();
                for r in 0..m {
                    let expect = base[r] + 2.0 * col[r];
                    if (two[r] - expect).abs() > 1e-9 * (1.0 + expect.abs()) {
                        return Err(Error::contract(format!(
                            "coupling of player {} ({}) is not affine in eps{}",
                            i + 1,
                            player.name,
                            j + 1
                        )));
                    }
                }
                cols.push(col);
            }
            let u = &traj.u[k][control_offsets[i]..control_offsets[i] + m];
            for r in 0..m {
                rows.push(cols.iter().map(|col| col[r]).collect::<Vec<f64>>());
                targets.push(vec![u[r] - base[r]]);
            }
        }
        let fit = linalg::solve(&rows, &targets);
        residual = residual.max(fit.max_abs_residual());
        identifiable.push(fit.rank == d);
        eps.push(fit.coef.into_iter().next().unwrap_or_default());
    }
    Ok(EpsilonEstimate {
        first: a,
        last: b,
        t_start: traj.times[a],
        t_end: traj.times[b],
        eps,
        identifiable,
        residual,
    })
}

/// Assumed pure controls and ε per player, with the admissible depth.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub controls: Vec<PureControl>,
    pub eps: Vec<Vec<f64>>,
    pub max_depth: f64,
    pub h: f64,
}

fn rebased(game: &GameSpec, t0: f64) -> GameSpec {
    let mut g = game.clone();
    g.t0 = t0;
    g
}

fn drive(mut run: Run<'_>) -> Result<Trajectory> {
    while !run.done() {
        run.sample()?;
        run.complete()?;
        run.step()?;
    }
    Ok(run.into_trajectory())
}

/// Integrate forward from `from` over `dt` under the predictor's controls and
/// ε̂ in place of the hidden maps.
pub fn short_term_predict(game: &GameSpec, from: &GameState, dt: f64, predictor: &Predictor) -> Result<Trajectory> {
    if !(dt > 0.0 && dt <= predictor.max_depth * (1.0 + 1e-12)) {
        return Err(Error::contract(format!(
            "prediction depth {dt} outside (0, {}]",
            predictor.max_depth
        )));
    }
    let g = rebased(game, from.t);
    let grid = Grid::new(from.t, from.t + dt, predictor.h)?;
    let run = Run::new(&g, grid)?
        .starting_at(from.phi.clone())?
        .with_strategies(&predictor.controls)?
        .with_eps_source(EpsSource::Fixed(&predictor.eps))?;
    drive(run)
}

#[derive(Debug, Clone)]
pub struct PredictionReport {
    pub game: GameSpec,
    pub t0: f64,
    pub dt: f64,
    pub predictor: Predictor,
    /// φ° and u°_{[t0]} of the baseline prediction.
    pub baseline: Trajectory,
    pub corrected: Trajectory,
    pub corrected_eps: Vec<Vec<f64>>,
    pub realized_end: Vec<f64>,
    pub baseline_error: f64,
    pub corrected_error: f64,
}

fn endpoint_error(pred: &Trajectory, realized: &[f64]) -> f64 {
    pred.final_phi()
        .iter()
        .zip(realized)
        .fold(0.0_f64, |m, (p, r)| m.max((p - r).abs()))
}

fn node_at(traj: &Trajectory, t: f64) -> Result<usize> {
    traj.grid
        .node_of(t)
        .filter(|&k| k < traj.len())
        .ok_or_else(|| Error::contract(format!("time {t} is not a node of the realized trajectory")))
}

/// Baseline prediction from the realized state at `t0`, scored against the
/// realized state at `t0 + dt`. The corrected fields start as copies.
pub fn predict_against(
    game: &GameSpec,
    realized: &Trajectory,
    t0: f64,
    dt: f64,
    predictor: &Predictor,
) -> Result<PredictionReport> {
    let k0 = node_at(realized, t0)?;
    let k1 = node_at(realized, t0 + dt)?;
    let from = GameState {
        t: realized.times[k0],
        phi: realized.phi[k0].clone(),
    };
    let baseline = short_term_predict(game, &from, dt, predictor)?;
    let realized_end = realized.phi[k1].clone();
    let err = endpoint_error(&baseline, &realized_end);
    Ok(PredictionReport {
        game: game.clone(),
        t0: from.t,
        dt,
        predictor: predictor.clone(),
        corrected: baseline.clone(),
        baseline,
        corrected_eps: predictor.eps.clone(),
        realized_end,
        baseline_error: err,
        corrected_error: err,
    })
}

/// Re-predict with ε̂ substituted for the baseline's assumption on every
/// identifiable player. The estimate window must end where the prediction
/// starts.
pub fn correct_prediction(report: &PredictionReport, estimate: &EpsilonEstimate) -> Result<PredictionReport> {
    if (estimate.t_end - report.t0).abs() > 1e-9 * report.t0.abs().max(1.0) {
        return Err(Error::contract(format!(
            "estimate window ends at {}, prediction starts at {}",
            estimate.t_end, report.t0
        )));
    }
    let mut predictor = report.predictor.clone();
    if estimate.eps.len() != predictor.eps.len() {
        return Err(Error::contract("estimate and predictor disagree on the player count"));
    }
    for (i, e) in estimate.eps.iter().enumerate() {
        if estimate.identifiable[i] {
            predictor.eps[i] = e.clone();
        }
    }
    let from = GameState {
        t: report.t0,
        phi: report.baseline.phi[0].clone(),
    };
    let corrected = short_term_predict(&report.game, &from, report.dt, &predictor)?;
    let mut out = report.clone();
    out.corrected_error = endpoint_error(&corrected, &report.realized_end);
    out.corrected = corrected;
    out.corrected_eps = predictor.eps;
    Ok(out)
}

/// The ordinary game B of a game A: every real player keeps its control and
/// a virtual player supplies its hidden parameters.
#[derive(Debug, Clone)]
pub struct AssociatedGame<'a> {
    pub game: &'a GameSpec,
    pub virtual_players: Vec<PureControl>,
}

pub fn associated_game(game: &GameSpec, virtual_players: Vec<PureControl>) -> Result<AssociatedGame<'_>> {
    if virtual_players.len() != game.players.len() {
        return Err(Error::contract(format!(
            "{} real players need {} virtual strategies, got {}",
            game.players.len(),
            game.players.len(),
            virtual_players.len()
        )));
    }
    for (i, (v, p)) in virtual_players.iter().zip(&game.players).enumerate() {
        if v.dim() != p.law.eps_dim() {
            return Err(Error::contract(format!(
                "virtual strategy {} has dimension {}, player {} has {} hidden parameters",
                i + 1,
                v.dim(),
                p.name,
                p.law.eps_dim()
            )));
        }
    }
    Ok(AssociatedGame { game, virtual_players })
}

impl AssociatedGame<'_> {
    /// Control channels of B: real and virtual players together.
    pub fn channels(&self) -> usize {
        self.game.players.len() + self.virtual_players.len()
    }

    /// Long-term layer: B played from `from` to the final time `horizon`.
    pub fn play(&self, from: &GameState, horizon: f64, h: f64) -> Result<Trajectory> {
        let g = rebased(self.game, from.t);
        let grid = Grid::new(from.t, horizon, h)?;
        let run = Run::new(&g, grid)?
            .starting_at(from.phi.clone())?
            .with_eps_source(EpsSource::Virtual(&self.virtual_players))?;
        drive(run)
    }
}

#[derive(Debug, Clone)]
pub struct ShortLayer {
    pub dt: f64,
    pub predictor: Predictor,
}

#[derive(Debug, Clone)]
pub struct StrategicForecast {
    pub channels: usize,
    pub long: Trajectory,
    pub short: Option<Trajectory>,
    /// Short-term layer on `[t0, t0 + dt]`, continued by B's virtual
    /// strategies from the short-term endpoint.
    pub combined: Trajectory,
}

fn join(head: &Trajectory, tail: &Trajectory) -> Trajectory {
    let n = head.len() - 1;
    let cat = |a: &[Vec<f64>], b: &[Vec<f64>]| a[..n].iter().chain(b).cloned().collect::<Vec<_>>();
    Trajectory {
        grid: Grid {
            t0: head.grid.t0,
            h: head.grid.h,
            steps: n + tail.grid.steps,
        },
        times: head.times[..n].iter().chain(&tail.times).copied().collect(),
        phi: cat(&head.phi, &tail.phi),
        u0: cat(&head.u0, &tail.u0),
        u: cat(&head.u, &tail.u),
        eps: cat(&head.eps, &tail.eps),
        xi: match (&head.xi, &tail.xi) {
            (Some(a), Some(b)) => Some(cat(a, b)),
            _ => None,
        },
    }
}

pub fn strategic_forecast(
    b: &AssociatedGame<'_>,
    from: &GameState,
    horizon: f64,
    h: f64,
    short: Option<&ShortLayer>,
) -> Result<StrategicForecast> {
    let long = b.play(from, horizon, h)?;
    let (short_traj, combined) = match short {
        None => (None, long.clone()),
        Some(layer) => {
            if layer.predictor.h != h {
                return Err(Error::contract("short-term layer must use the forecast step"));
            }
            let s = short_term_predict(b.game, from, layer.dt, &layer.predictor)?;
            let end = *s.times.last().expect("nonempty prediction");
            let combined = if (horizon - end).abs() <= 1e-9 * horizon.abs().max(1.0) {
                s.clone()
            } else {
                let tail = b.play(
                    &GameState {
                        t: end,
                        phi: s.final_phi().to_vec(),
                    },
                    horizon,
                    h,
                )?;
                join(&s, &tail)
            };
            (Some(s), combined)
        }
    };
    Ok(StrategicForecast {
        channels: b.channels(),
        long,
        short: short_traj,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate, EvolutionField, FeedbackLaw, HiddenMap, Player};

    fn lin2_with(a: f64, e1: HiddenMap, e2: HiddenMap, phi0: f64) -> GameSpec {
        GameSpec::new(vec![phi0], EvolutionField::new(1, move |f| vec![a * f.phi[0] + f.u[0] + f.u[1]]))
            .with_player(Player::new("p1", PureControl::constant(vec![0.0]), FeedbackLaw::affine(e1)))
            .with_player(Player::new("p2", PureControl::constant(vec![0.0]), FeedbackLaw::affine(e2)))
    }

    fn lin2(a: f64, eps: [f64; 2], phi0: f64) -> GameSpec {
        lin2_with(a, HiddenMap::constant(vec![eps[0]]), HiddenMap::constant(vec![eps[1]]), phi0)
    }

    fn zero_controls() -> Vec<PureControl> {
        vec![PureControl::constant(vec![0.0]), PureControl::constant(vec![0.0])]
    }

    #[test]
    fn constant_eps_recovered_exactly() {
        let game = lin2(0.3, [-2.5, -1.5], 1.0);
        let traj = simulate(&game, 1.0, 0.01).unwrap();
        let est = estimate_epsilon(&game, &traj, 10, 60).unwrap();
        assert!(est.all_identifiable());
        assert!((est.eps[0][0] + 2.5).abs() < 1e-8 && (est.eps[1][0] + 1.5).abs() < 1e-8, "{:?}", est.eps);
        assert!(est.residual < 1e-10);
    }

    #[test]
    fn zero_regressor_is_unidentifiable() {
        let game = lin2(0.3, [-2.5, -1.5], 0.0);
        let traj = simulate(&game, 1.0, 0.01).unwrap();
        let est = estimate_epsilon(&game, &traj, 0, 100).unwrap();
        assert_eq!(est.identifiable, vec![false, false]);
    }

    #[test]
    fn piecewise_eps_recovered_per_segment() {
        let game = lin2_with(
            0.0,
            HiddenMap::new(1, |h| vec![if h.t < 0.495 { -1.0 } else { -2.0 }]),
            HiddenMap::constant(vec![0.5]),
            1.0,
        );
        let traj = simulate(&game, 1.0, 0.01).unwrap();
        let first = estimate_epsilon(&game, &traj, 0, 49).unwrap();
        let second = estimate_epsilon(&game, &traj, 50, 100).unwrap();
        assert!((first.eps[0][0] + 1.0).abs() < 1e-8);
        assert!((second.eps[0][0] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn estimator_never_reads_hidden_map() {
        let game = lin2(0.0, [-1.0, 0.5], 1.0);
        let traj = simulate(&game, 0.5, 0.01).unwrap();
        let poisoned = lin2_with(0.0, HiddenMap::new(1, |_| panic!("hidden map read")), HiddenMap::constant(vec![9.0]), 1.0);
        let est = estimate_epsilon(&poisoned, &traj, 0, 50).unwrap();
        assert!((est.eps[0][0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn nonlinear_coupling_is_rejected() {
        let game = GameSpec::new(vec![1.0], EvolutionField::new(1, |f| vec![f.u[0]])).with_player(Player::new(
            "p",
            PureControl::constant(vec![0.0]),
            FeedbackLaw::new(1, 1, |c| vec![c.eps[0] * c.eps[0]], HiddenMap::constant(vec![1.0])),
        ));
        let traj = simulate(&game, 0.1, 0.01).unwrap();
        assert!(matches!(estimate_epsilon(&game, &traj, 0, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn short_window_is_contract_error() {
        let game = lin2(0.0, [-1.0, 0.5], 1.0);
        let traj = simulate(&game, 0.5, 0.01).unwrap();
        assert!(estimate_epsilon(&game, &traj, 3, 3).is_err());
    }

    fn predictor(eps: [f64; 2], h: f64) -> Predictor {
        Predictor {
            controls: zero_controls(),
            eps: vec![vec![eps[0]], vec![eps[1]]],
            max_depth: 0.5,
            h,
        }
    }

    #[test]
    fn zero_field_prediction_stays_put() {
        let game = GameSpec::new(vec![0.3, -2.0], EvolutionField::zero(2)).with_player(Player::new(
            "p",
            PureControl::constant(vec![0.0]),
            FeedbackLaw::affine(HiddenMap::constant(vec![1.0])),
        ));
        let p = Predictor {
            controls: vec![PureControl::constant(vec![0.0])],
            eps: vec![vec![1.0]],
            max_depth: 1.0,
            h: 0.01,
        };
        let from = GameState { t: 0.2, phi: vec![0.3, -2.0] };
        let pred = short_term_predict(&game, &from, 0.5, &p).unwrap();
        assert_eq!(pred.final_phi(), &[0.3, -2.0]);
    }

    #[test]
    fn exact_estimate_predicts_within_integration_error() {
        let (a, e, phi0) = (0.3, [-2.5, -1.5], 1.0);
        let game = lin2(a, e, phi0);
        let t0 = 0.5;
        let from = GameState {
            t: t0,
            phi: vec![phi0 * ((a + e[0] + e[1]) * t0).exp()],
        };
        let pred = short_term_predict(&game, &from, 0.5, &predictor(e, 1e-3)).unwrap();
        let exact = phi0 * ((a + e[0] + e[1]) * 1.0_f64).exp();
        assert!((pred.final_phi()[0] - exact).abs() < 1e-6);
    }

    #[test]
    fn depth_beyond_maximum_is_contract_error() {
        let game = lin2(0.3, [-2.5, -1.5], 1.0);
        let from = GameState { t: 0.0, phi: vec![1.0] };
        assert!(matches!(
            short_term_predict(&game, &from, 0.6, &predictor([-2.5, -1.5], 1e-2)),
            Err(Error::Contract(_))
        ));
        assert!(short_term_predict(&game, &from, 0.0, &predictor([-2.5, -1.5], 1e-2)).is_err());
    }

    #[test]
    fn identity_correction_reproduces_baseline() {
        let game = lin2(0.3, [-2.5, -1.5], 1.0);
        let traj = simulate(&game, 1.0, 0.01).unwrap();
        let report = predict_against(&game, &traj, 0.5, 0.5, &predictor([-2.5, -1.5], 0.01)).unwrap();
        let est = estimate_epsilon(&game, &traj, 0, 50).unwrap();
        let mut same = est.clone();
        same.eps = report.predictor.eps.clone();
        let corrected = correct_prediction(&report, &same).unwrap();
        assert_eq!(corrected.corrected, report.baseline);
        assert_eq!(corrected.corrected_error, corrected.baseline_error);
    }

    #[test]
    fn planted_offset_is_corrected() {
        let game = lin2(0.3, [-2.5, -1.0], 1.0);
        let traj = simulate(&game, 1.0, 0.01).unwrap();
        let report = predict_against(&game, &traj, 0.5, 0.5, &predictor([-2.5, -1.5], 0.01)).unwrap();
        let est = estimate_epsilon(&game, &traj, 0, 50).unwrap();
        let corrected = correct_prediction(&report, &est).unwrap();
        assert!(corrected.corrected_error < corrected.baseline_error);
        assert!(corrected.corrected_error < 1e-9, "{}", corrected.corrected_error);
    }

    #[test]
    fn non_adjacent_estimate_is_rejected() {
        let game = lin2(0.3, [-2.5, -1.0], 1.0);
        let traj = simulate(&game, 1.0, 0.01).unwrap();
        let report = predict_against(&game, &traj, 0.5, 0.5, &predictor([-2.5, -1.5], 0.01)).unwrap();
        let est = estimate_epsilon(&game, &traj, 0, 40).unwrap();
        assert!(correct_prediction(&report, &est).is_err());
    }

    #[test]
    fn associated_game_doubles_channels() {
        let game = lin2(0.3, [-2.5, -1.5], 1.0);
        let b = associated_game(&game, vec![PureControl::constant(vec![-2.5]), PureControl::constant(vec![-1.5])]).unwrap();
        assert_eq!(b.channels(), 4);
        assert!(matches!(
            associated_game(&game, vec![PureControl::constant(vec![-2.5])]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn oracle_virtual_players_reproduce_simulation() {
        let game = lin2(0.3, [-2.5, -1.5], 1.0);
        let b = associated_game(&game, vec![PureControl::constant(vec![-2.5]), PureControl::constant(vec![-1.5])]).unwrap();
        let f = strategic_forecast(&b, &GameState { t: 0.0, phi: vec![1.0] }, 1.0, 0.01, None).unwrap();
        assert_eq!(f.long, simulate(&game, 1.0, 0.01).unwrap());
        assert_eq!(f.combined, f.long);
    }

    #[test]
    fn short_layer_improves_drifting_forecast() {
        let game = lin2_with(
            0.2,
            HiddenMap::constant(vec![-0.5]),
            HiddenMap::new(1, |h| vec![-1.0 - 0.5 * h.t]),
            1.0,
        );
        let traj = simulate(&game, 2.0, 0.01).unwrap();
        let b = associated_game(&game, vec![PureControl::constant(vec![-0.5]), PureControl::constant(vec![-1.0])]).unwrap();
        let est = estimate_epsilon(&game, &traj, 50, 100).unwrap();
        let layer = ShortLayer {
            dt: 0.5,
            predictor: Predictor {
                controls: zero_controls(),
                eps: est.eps.clone(),
                max_depth: 0.5,
                h: 0.01,
            },
        };
        let from = GameState { t: traj.times[100], phi: traj.phi[100].clone() };
        let f = strategic_forecast(&b, &from, 2.0, 0.01, Some(&layer)).unwrap();
        let real = traj.final_phi()[0];
        let long_err = (f.long.final_phi()[0] - real).abs();
        let comb_err = (f.combined.final_phi()[0] - real).abs();
        assert!(comb_err <= long_err, "{comb_err} vs {long_err}");
        assert_eq!(f.combined.len(), f.long.len());
        assert_eq!(f.short.as_ref().unwrap().len(), 51);
    }
}
