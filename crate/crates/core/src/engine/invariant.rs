use std::fmt;
use std::sync::Arc;

use super::Trajectory;

#[derive(Debug, Clone, Copy)]
pub struct InvariantInput<'a> {
    pub t: f64,
    pub phi: &'a [f64],
    pub u0: &'a [f64],
    pub u: &'a [f64],
    pub eps: &'a [f64],
}

/// A quantity `F_α(u, u°, φ)` expected to stay constant along a run.
#[derive(Clone)]
pub struct InvariantFunctional {
    pub name: String,
    pub tolerance: f64,
    f: Arc<dyn Fn(&InvariantInput<'_>) -> f64 + Send + Sync>,
}

impl fmt::Debug for InvariantFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InvariantFunctional")
            .field("name", &self.name)
            .field("tolerance", &self.tolerance)
            .finish_non_exhaustive()
    }
}

impl InvariantFunctional {
    pub fn new<F>(name: impl Into<String>, tolerance: f64, f: F) -> Self
    where
        F: Fn(&InvariantInput<'_>) -> f64 + Send + Sync + 'static,
    {
        InvariantFunctional {
            name: name.into(),
            tolerance,
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, input: &InvariantInput<'_>) -> f64 {
        (self.f)(input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDrift {
    pub name: String,
    pub max_drift: f64,
    /// Node where the drift peaks.
    pub worst_node: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// `drift_α = max_t |F_α(t) − F_α(t_0)|` for each functional.
pub fn check_invariant_functionals(traj: &Trajectory, fs: &[InvariantFunctional]) -> Vec<FunctionalDrift> {
    let at = |k: usize| InvariantInput {
        t: traj.times[k],
        phi: &traj.phi[k],
        u0: &traj.u0[k],
        u: &traj.u[k],
        eps: &traj.eps[k],
    };
    fs.iter()
        .map(|f| {
            let (mut max_drift, mut worst_node) = (0.0_f64, 0);
            if !traj.is_empty() {
                let f0 = f.eval(&at(0));
                for k in 1..traj.len() {
                    let d = (f.eval(&at(k)) - f0).abs();
                    // NaN drift must count as a failure, so compare negated.
                    if !(d <= max_drift) {
                        max_drift = d;
                        worst_node = k;
                    }
                }
            }
            FunctionalDrift {
                name: f.name.clone(),
                max_drift,
                worst_node,
                tolerance: f.tolerance,
                pass: max_drift <= f.tolerance,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate, EvolutionField, FeedbackLaw, GameSpec, HiddenMap, Player, PureControl};

    fn run(law: FeedbackLaw) -> Trajectory {
        let game = GameSpec::new(vec![1.0], EvolutionField::new(1, |f| vec![-f.phi[0] + f.u[0]])).with_player(
            Player::new("p", PureControl::new(1, |s| vec![(3.0 * s.t).sin()]), law),
        );
        simulate(&game, 2.0, 0.01).unwrap()
    }

    #[test]
    fn identity_coupling_has_zero_drift() {
        let traj = run(FeedbackLaw::identity(1));
        let f = InvariantFunctional::new("u-u0", 0.0, |x| x.u[0] - x.u0[0]);
        let report = check_invariant_functionals(&traj, &[f]);
        assert_eq!(report[0].max_drift, 0.0);
        assert!(report[0].pass);
    }

    #[test]
    fn affine_identity_holds_to_round_off() {
        let traj = run(FeedbackLaw::affine(HiddenMap::new(1, |h| vec![0.3 + 0.1 * h.phi[0]])));
        let f = InvariantFunctional::new("u-u0-eps*phi", 1e-12, |x| x.u[0] - x.u0[0] - x.eps[0] * x.phi[0]);
        let report = check_invariant_functionals(&traj, &[f]);
        assert!(report[0].pass, "{:?}", report[0]);
    }

    #[test]
    fn varying_control_fails_with_drift() {
        let traj = run(FeedbackLaw::identity(1));
        let f = InvariantFunctional::new("u", 1e-6, |x| x.u[0]);
        let report = check_invariant_functionals(&traj, &[f]);
        assert!(!report[0].pass);
        assert!(report[0].max_drift > 0.9);
        assert!(report[0].worst_node > 0);
    }

    #[test]
    fn single_node_trajectory_reports_zero_drift() {
        let traj = run(FeedbackLaw::identity(1)).slice(3, 3);
        let f = InvariantFunctional::new("u", 0.0, |x| x.u[0]);
        assert_eq!(check_invariant_functionals(&traj, &[f])[0].max_drift, 0.0);
    }
}
