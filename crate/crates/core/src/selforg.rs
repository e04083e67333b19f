//! Tactical behavioral self-organization: with the dependence on comments
//! held fixed, improve the comment rule Θ within a parametrized family.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::rng;
use crate::tactics::{run_tactical, CommentRule, TacticalSpec, TacticalTrace};

/// `p ↦ Θ_p` over a box of parameters.
#[derive(Clone)]
pub struct ThetaFamily {
    pub bounds: Vec<(f64, f64)>,
    pub p0: Vec<f64>,
    make: Arc<dyn Fn(&[f64]) -> CommentRule + Send + Sync>,
}

impl fmt::Debug for ThetaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThetaFamily")
            .field("bounds", &self.bounds)
            .field("p0", &self.p0)
            .finish_non_exhaustive()
    }
}

impl ThetaFamily {
    pub fn new<F>(bounds: Vec<(f64, f64)>, p0: Vec<f64>, make: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> CommentRule + Send + Sync + 'static,
    {
        if bounds.is_empty() {
            return Err(Error::contract("parameter family needs at least one parameter"));
        }
        if bounds.iter().any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::contract("parameter bounds must be finite with lo < hi"));
        }
        let family = ThetaFamily {
            bounds,
            p0,
            make: Arc::new(make),
        };
        family.check(&family.p0)?;
        Ok(family)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn check(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::contract(format!("parameter has {} components, family has {}", p.len(), self.dim())));
        }
        for (j, (x, (lo, hi))) in p.iter().zip(&self.bounds).enumerate() {
            if !(lo <= x && x <= hi) {
                return Err(Error::contract(format!("p{} = {x} is outside [{lo}, {hi}]", j + 1)));
            }
        }
        Ok(())
    }

    pub fn rule(&self, p: &[f64]) -> CommentRule {
        (self.make)(p)
    }
}

/// Objective over a tactical trace; higher is better.
#[derive(Clone)]
pub struct PerformanceFunctional {
    pub name: String,
    f: Arc<dyn Fn(&TacticalTrace) -> f64 + Send + Sync>,
}

impl fmt::Debug for PerformanceFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerformanceFunctional").field("name", &self.name).finish_non_exhaustive()
    }
}

/// Node values a trajectory integrand may read.
#[derive(Debug, Clone, Copy)]
pub struct NodeView<'a> {
    pub t: f64,
    pub phi: &'a [f64],
    pub u0: &'a [f64],
    pub u: &'a [f64],
    pub xi: &'a [f64],
}

impl PerformanceFunctional {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&TacticalTrace) -> f64 + Send + Sync + 'static,
    {
        PerformanceFunctional {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, trace: &TacticalTrace) -> f64 {
        (self.f)(trace)
    }
}

/// Trapezoid integral of `g` along the trajectory nodes.
pub fn trajectory_integral(traj: &Trajectory, g: impl Fn(&NodeView<'_>) -> f64) -> f64 {
    let at = |k: usize| {
        g(&NodeView {
            t: traj.times[k],
            phi: &traj.phi[k],
            u0: &traj.u0[k],
            u: &traj.u[k],
            xi: traj.xi.as_ref().map_or(&[][..], |x| &x[k]),
        })
    };
    let mut sum = 0.0;
    let mut left = at(0);
    for k in 0..traj.len().saturating_sub(1) {
        let right = at(k + 1);
        sum += 0.5 * (traj.times[k + 1] - traj.times[k]) * (left + right);
        left = right;
    }
    sum
}

#[derive(Debug, Clone, PartialEq)]
pub enum Score {
    Value(f64),
    Failed(String),
}

impl Score {
    pub fn value(&self) -> Option<f64> {
        match self {
            Score::Value(v) => Some(*v),
            Score::Failed(_) => None,
        }
    }

    /// Failures rank below every value.
    fn beats(&self, other: &Score) -> bool {
        match (self, other) {
            (Score::Value(a), Score::Value(b)) => a > b,
            (Score::Value(_), Score::Failed(_)) => true,
            _ => false,
        }
    }
}

/// Context shared by all evaluations of one search.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub spec: &'a TacticalSpec,
    pub horizon: f64,
    pub h: f64,
    pub j: &'a PerformanceFunctional,
}

/// Score of Θ_p on the scenario.
pub fn evaluate_theta(family: &ThetaFamily, p: &[f64], objective: &Objective<'_>) -> Result<Score> {
    family.check(p)?;
    let mut spec = objective.spec.clone();
    spec.rule = family.rule(p);
    Ok(match run_tactical(&spec, objective.horizon, objective.h) {
        Ok(trace) => {
            let v = objective.j.eval(&trace);
            if v.is_finite() {
                Score::Value(v)
            } else {
                Score::Failed(format!("objective evaluated to {v}"))
            }
        }
        Err(e) => Score::Failed(e.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accepted {
    /// Number of candidate evaluations spent when this point was accepted.
    pub evaluation: usize,
    pub p: Vec<f64>,
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub best_p: Vec<f64>,
    pub best_score: Score,
    /// Starting point first, then every accepted improvement.
    pub history: Vec<Accepted>,
    pub evaluations: usize,
}

/// Seeded coordinate hill-climbing. Each coordinate (in a seeded order per
/// sweep) tries `p ± s_j`, clamped to the box; the better candidate replaces
/// `p` if strictly better, ties going to `+`. Steps start at a quarter of the
/// box width and halve after a sweep without improvement. `budget` counts
/// candidate evaluations; the starting point is free.
pub fn adapt_theta(family: &ThetaFamily, objective: &Objective<'_>, budget: usize, seed: u64) -> Result<Adaptation> {
    let mut p = family.p0.clone();
    let mut score = evaluate_theta(family, &p, objective)?;
    let mut history = vec![Accepted {
        evaluation: 0,
        p: p.clone(),
        score: score.clone(),
    }];
    let mut steps: Vec<f64> = family.bounds.iter().map(|(lo, hi)| 0.25 * (hi - lo)).collect();
    let mut order: Vec<usize> = (0..family.dim()).collect();
    let mut rng = rng::stream(seed, rng::SELF_ORGANIZATION);
    let mut used = 0;

    while used < budget {
        order.shuffle(&mut rng);
        let mut improved = false;
        for &j in &order {
            if used >= budget {
                break;
            }
            let (lo, hi) = family.bounds[j];
            let mut plus = p.clone();
            plus[j] = (p[j] + steps[j]).clamp(lo, hi);
            let mut minus = p.clone();
            minus[j] = (p[j] - steps[j]).clamp(lo, hi);

            let (sp, sm) = if budget - used >= 2 {
                used += 2;
                let (a, b) = rayon::join(
                    || evaluate_theta(family, &plus, objective),
                    || evaluate_theta(family, &minus, objective),
                );
                (a?, Some(b?))
            } else {
                used += 1;
                (evaluate_theta(family, &plus, objective)?, None)
            };
            let (cand, cand_score) = match sm {
                Some(sm) if sm.beats(&sp) => (minus, sm),
                _ => (plus, sp),
            };
            if cand_score.beats(&score) {
                p = cand;
                score = cand_score;
                improved = true;
                history.push(Accepted {
                    evaluation: used,
                    p: p.clone(),
                    score: score.clone(),
                });
            }
        }
        if !improved {
            steps.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
    Ok(Adaptation {
        best_p: p,
        best_score: score,
        history,
        evaluations: used,
    })
}
