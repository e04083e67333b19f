use std::fmt;
use std::sync::Arc;

use super::{CouplingInput, ParamView, Player};
use crate::error::{Error, Result};

/// What a coalition aggregator sees: every member's pure control, hidden
/// parameters and realized coupling, plus the shared state.
#[derive(Debug, Clone, Copy)]
pub struct AggregateInput<'a> {
    pub members: &'a [usize],
    pub u0: &'a [&'a [f64]],
    pub eps: &'a [&'a [f64]],
    pub realized: &'a [Vec<f64>],
    pub phi: &'a [f64],
}

#[derive(Clone)]
pub enum Aggregator {
    /// Sum of the members' realized couplings.
    Sum,
    Custom {
        dim: usize,
        f: Arc<dyn Fn(&AggregateInput<'_>) -> Vec<f64> + Send + Sync>,
    },
}

impl fmt::Debug for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregator::Sum => f.write_str("Sum"),
            Aggregator::Custom { dim, .. } => write!(f, "Custom {{ dim: {dim} }}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Coalition {
    /// Zero-based player indices.
    pub members: Vec<usize>,
    pub aggregator: Aggregator,
}

impl Coalition {
    pub fn new(members: Vec<usize>, aggregator: Aggregator) -> Self {
        Coalition { members, aggregator }
    }

    pub fn sum(members: Vec<usize>) -> Self {
        Coalition::new(members, Aggregator::Sum)
    }

    pub fn dim(&self, players: &[Player]) -> usize {
        match &self.aggregator {
            Aggregator::Sum => self
                .members
                .first()
                .and_then(|&m| players.get(m))
                .map_or(0, |p| p.law.control_dim()),
            Aggregator::Custom { dim, .. } => *dim,
        }
    }
}

/// Coalitions `I_1..I_m`; a player may sit in several of them.
#[derive(Clone, Debug, Default)]
pub struct CoalitionMap {
    pub coalitions: Vec<Coalition>,
}

impl CoalitionMap {
    pub fn new(coalitions: Vec<Coalition>) -> Self {
        CoalitionMap { coalitions }
    }

    pub fn singletons(n: usize) -> Self {
        CoalitionMap::new((0..n).map(|i| Coalition::sum(vec![i])).collect())
    }

    pub fn validate(&self, players: &[Player]) -> Result<()> {
        if self.coalitions.is_empty() {
            return Err(Error::contract("coalition map is empty"));
        }
        for (c, coalition) in self.coalitions.iter().enumerate() {
            if coalition.members.is_empty() {
                return Err(Error::contract(format!("coalition {} has no members", c + 1)));
            }
            if let Some(&m) = coalition.members.iter().find(|&&m| m >= players.len()) {
                return Err(Error::contract(format!(
                    "coalition {} references player {} but only {} exist",
                    c + 1,
                    m + 1,
                    players.len()
                )));
            }
            if let Aggregator::Sum = coalition.aggregator {
                let dim = players[coalition.members[0]].law.control_dim();
                if coalition
                    .members
                    .iter()
                    .any(|&m| players[m].law.control_dim() != dim)
                {
                    return Err(Error::contract(format!(
                        "coalition {} sums controls of different dimensions",
                        c + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn aggregate(
        &self,
        players: &[Player],
        u0: &[Vec<f64>],
        phi: &[f64],
        eps: &[Vec<f64>],
        params: ParamView<'_>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.coalitions.len());
        for coalition in &self.coalitions {
            let mut realized = Vec::with_capacity(coalition.members.len());
            for &m in &coalition.members {
                realized.push(players[m].law.eval_control_with(&CouplingInput {
                    u0: &u0[m],
                    phi,
                    eps: &eps[m],
                    theta: params.theta,
                    omega: params.omega,
                    lambda: params.lambda,
                })?);
            }
            let v = match &coalition.aggregator {
                Aggregator::Sum => {
                    let mut v = vec![0.0; realized[0].len()];
                    for r in &realized {
                        for (a, b) in v.iter_mut().zip(r) {
                            *a += b;
                        }
                    }
                    v
                }
                Aggregator::Custom { dim, f } => {
                    let u0s: Vec<&[f64]> = coalition.members.iter().map(|&m| u0[m].as_slice()).collect();
                    let epss: Vec<&[f64]> = coalition.members.iter().map(|&m| eps[m].as_slice()).collect();
                    let v = f(&AggregateInput {
                        members: &coalition.members,
                        u0: &u0s,
                        eps: &epss,
                        realized: &realized,
                        phi,
                    });
                    crate::error::check_dim("coalition aggregate", v.len(), *dim)?;
                    v
                }
            };
            out.push(v);
        }
        Ok(out)
    }
}
