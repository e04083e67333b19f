//! Turning a parsed document into runnable specs. Every expression is
//! scope-checked here, so a compiled scenario never reads an undeclared
//! variable at run time.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::doc::*;
use crate::dialogue::{FixedPartition, IntentionField, Quadrature, Side, Stream, WindowFunctional, WindowFunctionals, WindowKind};
use crate::engine::{Aggregator, Coalition, CoalitionMap, EvolutionField, FeedbackLaw, GameSpec, Grid, HiddenMap, Player, PureControl};
use crate::error::{Error, Result, SourcePos};
use crate::expr::{Bindings, Expr, Family, Scope};
use crate::multisystem::{Block, InteractionTerm, Partition, Probe, SynthComponent, SynthesisRule};
use crate::perception::{OracleConfig, SetTerminationRule};
use crate::prediction::Predictor;
use crate::selforg::{trajectory_integral, PerformanceFunctional, ThetaFamily};
use crate::tactics::{CommentRule, DependenceMode, ParametricBinding, Segmenter, SlowControl, TacticalSpec, TacticalTrace};
use crate::verbalization::{Cell, CellComplex, RecurrenceFamily};

/// Command-line overrides of the document's run settings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub step: Option<f64>,
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub t0: f64,
    pub horizon: f64,
    pub step: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct System {
    pub name: String,
    pub spec: TacticalSpec,
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub family: ThetaFamily,
    pub objective: PerformanceFunctional,
    pub budget: usize,
}

#[derive(Debug, Clone)]
pub struct PredictConfig {
    pub t0: f64,
    pub dt: f64,
    pub window: f64,
    pub predictor: Predictor,
    pub virtual_players: Option<Vec<PureControl>>,
}

#[derive(Debug, Clone)]
pub struct LocalizeConfig {
    pub candidates: Vec<Partition>,
    pub probes: Vec<Probe>,
}

/// A compiled scenario: one or more tactical systems plus the analysis
/// settings of each command.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub doc: ScenarioDoc,
    pub hash: String,
    pub settings: Settings,
    pub systems: Vec<System>,
    pub interaction: [Option<InteractionTerm>; 2],
    pub synthesis: Option<SynthesisRule>,
    pub localize: Option<LocalizeConfig>,
    pub recurrence: RecurrenceFamily,
    pub adapt: Option<AdaptConfig>,
    pub predict: Option<PredictConfig>,
    pub oracle: OracleConfig,
}

/// Parse and compile in one go.
pub fn load_scenario(text: &str, overrides: &Overrides) -> Result<Scenario> {
    let doc = parse_scenario(text)?;
    compile(&doc, text, overrides)
}

struct Ctx<'a> {
    text: &'a str,
    constants: &'a BTreeMap<String, f64>,
}

impl Ctx<'_> {
    fn pos(&self, src: &Src, col: usize) -> Option<SourcePos> {
        let start = src.span().start;
        matches!(self.text.as_bytes().get(start), Some(b'"' | b'\'')).then(|| position(self.text, start + col))
    }

    fn expr(&self, path: &str, src: &Src, scope: &Scope) -> Result<Expr> {
        Expr::compile(src.get_ref(), self.constants, scope).map_err(|e| Error::Validation {
            path: path.to_string(),
            pos: self.pos(src, e.col),
            message: format!("{} in `{}`", e.message, src.get_ref()),
        })
    }

    fn list(&self, path: &str, srcs: &[Src], scope: &Scope) -> Result<Arc<Vec<Expr>>> {
        if srcs.is_empty() {
            return Err(Error::validation(path, "needs at least one expression"));
        }
        let out = srcs
            .iter()
            .enumerate()
            .map(|(i, s)| self.expr(&format!("{path}[{i}]"), s, scope))
            .collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(out))
    }
}

fn eval_all(es: &[Expr], b: &Bindings<'_>) -> Vec<f64> {
    es.iter().map(|e| e.eval(b)).collect()
}

/// Contract failures of constructors become validation errors at `path`.
fn at(path: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Contract(m) => Error::validation(path, m),
        other => other,
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn mode(m: ModeDoc) -> DependenceMode {
    match m {
        ModeDoc::None => DependenceMode::None,
        ModeDoc::Known => DependenceMode::Known,
        ModeDoc::Unknown => DependenceMode::Unknown,
    }
}

fn on(cond: bool, dim: usize) -> usize {
    if cond {
        dim
    } else {
        0
    }
}

/// The per-system sections, borrowed from either document layout.
struct Parts<'a> {
    state: &'a StateDoc,
    players: &'a [PlayerDoc],
    game: Option<&'a GameDoc>,
    binding: Option<&'a BindingDoc>,
    intention: Option<&'a IntentionDoc>,
    coalitions: &'a [CoalitionDoc],
    windows: Option<&'a WindowsDoc>,
    functionals: Option<&'a FunctionalsDoc>,
    comment: Option<&'a CommentDoc>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Dims {
    phi: usize,
    theta: usize,
    omega: usize,
    v: usize,
    lambda: usize,
    xi: usize,
    u0: usize,
    eps: usize,
    control: usize,
}

/// Variables visible to strategies: a player never sees ε.
fn strategy_scope(context: String, d: &Dims, omega_visible: bool) -> Scope {
    Scope::new(context)
        .with_time()
        .allow(Family::Phi, d.phi)
        .allow(Family::Theta, d.theta)
        .allow(Family::Omega, on(omega_visible, d.omega))
        .allow(Family::Lambda, d.lambda)
}

struct Compiled {
    spec: TacticalSpec,
    dims: Dims,
    omega_visible: bool,
}

fn compile_system(cx: &Ctx<'_>, prefix: &str, parts: &Parts<'_>, settings: &Settings) -> Result<Compiled> {
    let p = |k: &str| join(prefix, k);
    let mut d = Dims {
        phi: parts.state.phi0.len(),
        ..Default::default()
    };
    if d.phi == 0 {
        return Err(Error::validation(p("state.phi0"), "state needs at least one component"));
    }
    if parts.state.dynamics.len() != d.phi {
        return Err(Error::validation(
            p("state.dynamics"),
            format!("{} expressions for a {}-dimensional state", parts.state.dynamics.len(), d.phi),
        ));
    }
    let theta0 = parts.comment.map_or_else(Vec::new, |c| c.theta0.clone());
    d.theta = theta0.len();
    let fdoc = parts.functionals.cloned().unwrap_or_default();
    d.omega = fdoc.omega.iter().map(|f| f.expr.len()).sum();
    d.v = fdoc.v.iter().map(|f| f.expr.len()).sum();
    d.xi = parts.intention.map_or(0, |i| i.xi0.len());
    let omega_visible = parts.game.is_some_and(|g| g.omega_visible);

    let bdoc = parts.binding.cloned().unwrap_or_default();
    let feedback = mode(bdoc.feedback);
    let lambda = match &bdoc.lambda {
        None => None,
        Some(l) => {
            let es = cx.list(&p("binding.lambda.schedule"), &l.schedule, &Scope::new("the slow-control schedule").with_time())?;
            d.lambda = es.len();
            Some(SlowControl::new(es.len(), l.evolution, mode(l.feedback), move |t| {
                eval_all(&es, &Bindings { t, ..Default::default() })
            }))
        }
    };
    let lambda_evolution = lambda.as_ref().is_some_and(|l| l.evolution);
    let lambda_feedback = lambda.as_ref().map_or(DependenceMode::None, |l| l.feedback);

    // Global offsets of every player's u°, ε and noise blocks.
    let mut names: Vec<&str> = Vec::new();
    let mut offsets = Vec::new();
    let (mut u0_at, mut eps_at, mut noise_at) = (0, 0, 0);
    for (i, pl) in parts.players.iter().enumerate() {
        if names.contains(&pl.name.as_str()) {
            return Err(Error::validation(p(&format!("players[{i}].name")), format!("duplicate player `{}`", pl.name)));
        }
        names.push(&pl.name);
        let e = pl.hidden.as_ref().map_or(0, |h| h.eps.len());
        let nz = pl.hidden.as_ref().map_or(0, |h| h.noise);
        offsets.push((u0_at, eps_at, noise_at));
        u0_at += pl.pure.len();
        eps_at += e;
        noise_at += nz;
    }
    d.u0 = u0_at;
    d.eps = eps_at;

    let mut players = Vec::with_capacity(parts.players.len());
    for (i, pl) in parts.players.iter().enumerate() {
        let path = |k: &str| p(&format!("players[{i}].{k}"));
        let (ua, ea, na) = offsets[i];
        let du0 = pl.pure.len();
        let de = pl.hidden.as_ref().map_or(0, |h| h.eps.len());
        let dn = pl.hidden.as_ref().map_or(0, |h| h.noise);

        let scope = strategy_scope(format!("the pure control of `{}`", pl.name), &d, omega_visible);
        let es = cx.list(&path("pure"), &pl.pure, &scope)?;
        let mut pure = PureControl::new(du0, move |s| {
            eval_all(
                &es,
                &Bindings {
                    t: s.t,
                    phi: s.phi,
                    theta: s.theta,
                    omega: s.omega.unwrap_or(&[]),
                    lambda: s.lambda,
                    ..Default::default()
                },
            )
        });
        if let Some(b) = &pl.bounds {
            pure = pure
                .with_bounds(b.iter().map(|[lo, hi]| (*lo, *hi)).collect())
                .map_err(at(&path("bounds")))?;
        }

        let known = feedback == DependenceMode::Known;
        let hidden = match &pl.hidden {
            None => HiddenMap::none(),
            Some(h) => {
                let unknown = feedback == DependenceMode::Unknown;
                let scope = Scope::new(format!("the hidden map of `{}`", pl.name))
                    .with_time()
                    .allow_range(Family::U0, ua..ua + du0)
                    .allow(Family::Phi, d.phi)
                    .allow_range(Family::Noise, na..na + dn)
                    .allow(Family::Theta, on(unknown, d.theta))
                    .allow(Family::Omega, on(unknown, d.omega))
                    .allow(Family::Lambda, on(lambda_feedback == DependenceMode::Unknown, d.lambda));
                let es = cx.list(&path("hidden.eps"), &h.eps, &scope)?;
                HiddenMap::new(de, move |x| {
                    eval_all(
                        &es,
                        &Bindings {
                            t: x.t,
                            u0: x.u0,
                            phi: x.phi,
                            noise: x.noise,
                            theta: x.theta,
                            omega: x.omega,
                            lambda: x.lambda,
                            ..Default::default()
                        },
                    )
                })
                .with_noise(dn)
            }
        };
        let law = match &pl.coupling {
            None if de == 0 => FeedbackLaw::new(du0, du0, |c| c.u0.to_vec(), hidden),
            None => {
                return Err(Error::validation(
                    path("coupling"),
                    "a player with hidden parameters needs an explicit coupling",
                ))
            }
            Some(srcs) => {
                let scope = Scope::new(format!("the coupling of `{}`", pl.name))
                    .allow_range(Family::U0, ua..ua + du0)
                    .allow(Family::Phi, d.phi)
                    .allow_range(Family::Eps, ea..ea + de)
                    .allow(Family::Theta, on(known, d.theta))
                    .allow(Family::Omega, on(known, d.omega))
                    .allow(Family::Lambda, on(lambda_feedback == DependenceMode::Known, d.lambda));
                let es = cx.list(&path("coupling"), srcs, &scope)?;
                FeedbackLaw::new(
                    du0,
                    es.len(),
                    move |c| {
                        eval_all(
                            &es,
                            &Bindings {
                                u0: c.u0,
                                phi: c.phi,
                                eps: c.eps,
                                theta: c.theta,
                                omega: c.omega,
                                lambda: c.lambda,
                                ..Default::default()
                            },
                        )
                    },
                    hidden,
                )
            }
        };
        players.push(Player::new(pl.name.clone(), pure, law));
    }

    let coalitions = if parts.coalitions.is_empty() {
        d.control = players.iter().map(|pl| pl.law.control_dim()).sum();
        None
    } else {
        let mut list = Vec::new();
        for (c, co) in parts.coalitions.iter().enumerate() {
            let path = p(&format!("coalitions[{c}]"));
            let mut members = Vec::new();
            for m in &co.members {
                let k = names
                    .iter()
                    .position(|n| n == m)
                    .ok_or_else(|| Error::validation(format!("{path}.members"), format!("unknown player `{m}`")))?;
                members.push(k);
            }
            let aggregator = match &co.aggregate {
                None => Aggregator::Sum,
                Some(srcs) => {
                    let sum = |f: &dyn Fn(&Player) -> usize| members.iter().map(|&k| f(&players[k])).sum::<usize>();
                    // Members' blocks stacked in the order listed.
                    let scope = Scope::new("a coalition aggregate")
                        .allow(Family::Phi, d.phi)
                        .allow(Family::U, sum(&|pl| pl.law.control_dim()))
                        .allow(Family::U0, sum(&|pl| pl.law.u0_dim()))
                        .allow(Family::Eps, sum(&|pl| pl.law.eps_dim()));
                    let es = cx.list(&format!("{path}.aggregate"), srcs, &scope)?;
                    Aggregator::Custom {
                        dim: es.len(),
                        f: Arc::new(move |a| {
                            let u: Vec<f64> = a.realized.concat();
                            let u0: Vec<f64> = a.u0.concat();
                            let eps: Vec<f64> = a.eps.concat();
                            eval_all(
                                &es,
                                &Bindings {
                                    phi: a.phi,
                                    u: &u,
                                    u0: &u0,
                                    eps: &eps,
                                    ..Default::default()
                                },
                            )
                        }),
                    }
                }
            };
            list.push(Coalition::new(members, aggregator));
        }
        let map = CoalitionMap::new(list);
        map.validate(&players).map_err(at(&p("coalitions")))?;
        d.control = map.coalitions.iter().map(|c| c.dim(&players)).sum();
        Some(map)
    };

    let scope = Scope::new("the state dynamics")
        .with_time()
        .allow(Family::Phi, d.phi)
        .allow(Family::U, d.control)
        .allow(Family::Theta, on(bdoc.theta_evolution, d.theta))
        .allow(Family::Omega, on(bdoc.omega_evolution, d.omega))
        .allow(Family::Lambda, on(lambda_evolution, d.lambda));
    let es = cx.list(&p("state.dynamics"), &parts.state.dynamics, &scope)?;
    let field = EvolutionField::new(d.phi, move |f| {
        eval_all(
            &es,
            &Bindings {
                t: f.t,
                phi: f.phi,
                u: f.u,
                theta: f.theta,
                omega: f.omega,
                lambda: f.lambda,
                ..Default::default()
            },
        )
    });

    let intention = match parts.intention {
        None => None,
        Some(i) => {
            if i.dynamics.len() != d.xi {
                return Err(Error::validation(
                    p("intention.dynamics"),
                    format!("{} expressions for a {}-dimensional intention state", i.dynamics.len(), d.xi),
                ));
            }
            let scope = Scope::new("the intention dynamics")
                .with_time()
                .allow(Family::Xi, d.xi)
                .allow(Family::U, d.control);
            let es = cx.list(&p("intention.dynamics"), &i.dynamics, &scope)?;
            Some(IntentionField::new(i.xi0.clone(), move |x| {
                eval_all(
                    &es,
                    &Bindings {
                        t: x.t,
                        xi: x.xi,
                        u: x.u,
                        ..Default::default()
                    },
                )
            }))
        }
    };

    let functional = |side: Side, i: usize, f: &FunctionalDoc| -> Result<WindowFunctional> {
        let (key, stream_dims) = match side {
            Side::State => ("omega", (Family::Eps, d.eps)),
            Side::Control => ("v", (Family::U0, d.u0)),
        };
        let path = p(&format!("functionals.{key}[{i}]"));
        if f.stream == StreamDoc::Xi && intention.is_none() {
            return Err(Error::validation(format!("{path}.stream"), "reads ξ but the scenario has no [intention]"));
        }
        let scope = Scope::new(format!("the {key} functional"))
            .with_time()
            .allow(stream_dims.0, stream_dims.1)
            .allow(Family::Phi, on(f.stream == StreamDoc::Phi, d.phi))
            .allow(Family::Xi, on(f.stream == StreamDoc::Xi, d.xi));
        let es = cx.list(&format!("{path}.expr"), &f.expr, &scope)?;
        let kind = match f.kind {
            KindDoc::Integral => WindowKind::Integral,
            KindDoc::Mean => WindowKind::Mean,
            KindDoc::First => WindowKind::First,
            KindDoc::Last => WindowKind::Last,
        };
        let name = f.name.clone().unwrap_or_else(|| format!("{key}{}", i + 1));
        Ok(WindowFunctional::new(name, side, kind, es.len(), move |w| {
            eval_all(
                &es,
                &Bindings {
                    t: w.t,
                    eps: w.eps,
                    u0: w.u0,
                    phi: w.phi,
                    xi: w.xi,
                    ..Default::default()
                },
            )
        })
        .reading(match f.stream {
            StreamDoc::Phi => Stream::Phi,
            StreamDoc::Xi => Stream::Xi,
        })
        .with_quadrature(match f.quadrature {
            QuadratureDoc::Trapezoid => Quadrature::Trapezoid,
            QuadratureDoc::Hold => Quadrature::Hold,
        }))
    };
    let omega_fs = fdoc.omega.iter().enumerate().map(|(i, f)| functional(Side::State, i, f)).collect::<Result<Vec<_>>>()?;
    let v_fs = fdoc.v.iter().enumerate().map(|(i, f)| functional(Side::Control, i, f)).collect::<Result<Vec<_>>>()?;
    let functionals = WindowFunctionals::new(omega_fs, v_fs).map_err(at(&p("functionals")))?;

    let grid = Grid::new(settings.t0, settings.horizon, settings.step).map_err(at("run"))?;
    let segmenter = match parts.windows {
        None => Segmenter::Fixed(vec![0, grid.steps]),
        Some(w) => {
            let wp = p("windows");
            match w.kind {
                WindowsKindDoc::Fixed => {
                    let partition = match (&w.count, &w.boundaries) {
                        (Some(n), None) if *n > 0 => FixedPartition::uniform(settings.t0, settings.horizon, *n),
                        (None, Some(b)) => FixedPartition::new(b.clone()),
                        _ => {
                            return Err(Error::validation(wp, "fixed windows need a positive `count` or a `boundaries` list"))
                        }
                    };
                    Segmenter::Fixed(partition.nodes(&grid).map_err(at(&wp))?)
                }
                WindowsKindDoc::Cells => {
                    if w.cells.is_empty() {
                        return Err(Error::validation(format!("{wp}.cells"), "cell windows need at least one cell"));
                    }
                    let scope = Scope::new("a cell predicate").allow(Family::Eps, d.eps);
                    let mut cells = Vec::new();
                    for (c, cell) in w.cells.iter().enumerate() {
                        let e = cx.expr(&format!("{wp}.cells[{c}].predicate"), &cell.predicate, &scope)?;
                        cells.push(Cell::new(cell.label.clone(), move |eps| {
                            e.eval(&Bindings { eps, ..Default::default() }) != 0.0
                        }));
                    }
                    let mut complex = CellComplex::new(d.eps, cells).map_err(at(&wp))?;
                    if let Some(hy) = w.hysteresis {
                        complex = complex.with_hysteresis(hy).map_err(at(&format!("{wp}.hysteresis")))?;
                    }
                    Segmenter::Cells(complex)
                }
                WindowsKindDoc::Sets => {
                    let src = w
                        .rule
                        .as_ref()
                        .ok_or_else(|| Error::validation(&wp, "set windows need a termination `rule`"))?;
                    let scope = Scope::new("the set termination rule")
                        .with_time()
                        .allow(Family::Phi, d.phi)
                        .allow(Family::PhiStart, d.phi)
                        .allow(Family::Omega, d.omega);
                    let e = cx.expr(&format!("{wp}.rule"), src, &scope)?;
                    let rule = SetTerminationRule::new(w.guard.unwrap_or(f64::INFINITY), move |s| {
                        e.eval(&Bindings {
                            t: s.t,
                            phi: s.phi,
                            phi_start: s.phi_start,
                            omega: s.omega_start,
                            ..Default::default()
                        }) != 0.0
                    });
                    rule.validate().map_err(at(&format!("{wp}.guard")))?;
                    Segmenter::Sets(rule)
                }
            }
        }
    };

    let rule = match parts.comment.and_then(|c| c.rule.as_ref()) {
        None => CommentRule::frozen(theta0.clone()),
        Some(srcs) => {
            let path = p("comment.rule");
            if srcs.len() != d.theta {
                return Err(Error::validation(
                    path,
                    format!("{} expressions for {} comment components", srcs.len(), d.theta),
                ));
            }
            let scope = Scope::new("the comment rule")
                .allow(Family::Theta, d.theta)
                .allow(Family::Omega, d.omega)
                .allow(Family::V, d.v);
            let es = cx.list(&path, srcs, &scope)?;
            CommentRule::new(theta0.clone(), move |c| {
                eval_all(
                    &es,
                    &Bindings {
                        theta: c.theta,
                        omega: c.omega,
                        v: c.v,
                        ..Default::default()
                    },
                )
            })
        }
    };

    let mut game = GameSpec::new(parts.state.phi0.clone(), field)
        .with_seed(settings.seed)
        .with_theta0(theta0)
        .with_binding(ParametricBinding {
            theta_evolution: bdoc.theta_evolution,
            omega_evolution: bdoc.omega_evolution,
            feedback,
            lambda,
        });
    game.t0 = settings.t0;
    game.omega0 = vec![0.0; d.omega];
    game.omega_visible = omega_visible;
    game.players = players;
    game.coalitions = coalitions;
    game.intention = intention;
    game.validate().map_err(at(prefix))?;
    Ok(Compiled {
        spec: TacticalSpec {
            game,
            segmenter,
            functionals,
            rule,
        },
        dims: d,
        omega_visible,
    })
}

fn node_term(cx: &Ctx<'_>, path: &str, t: &TermDoc, d: &Dims) -> Result<Box<dyn Fn(&TacticalTrace) -> f64 + Send + Sync>> {
    let node_scope = Scope::new("a trajectory objective term")
        .with_time()
        .allow(Family::Phi, d.phi)
        .allow(Family::U0, d.u0)
        .allow(Family::U, d.control)
        .allow(Family::Xi, d.xi);
    let window_scope = Scope::new("a window objective term")
        .allow(Family::Theta, d.theta)
        .allow(Family::Omega, d.omega)
        .allow(Family::V, d.v);
    let w = t.weight;
    let kind = t.kind;
    Ok(match kind {
        TermKindDoc::Integral | TermKindDoc::Mean | TermKindDoc::Final => {
            let e = cx.expr(path, &t.expr, &node_scope)?;
            Box::new(move |trace| {
                let tr = &trace.trajectory;
                let g = |k: usize| {
                    e.eval(&Bindings {
                        t: tr.times[k],
                        phi: &tr.phi[k],
                        u0: &tr.u0[k],
                        u: &tr.u[k],
                        xi: tr.xi.as_ref().map_or(&[][..], |x| &x[k]),
                        ..Default::default()
                    })
                };
                let value = match kind {
                    TermKindDoc::Final => g(tr.len() - 1),
                    _ => {
                        let i = trajectory_integral(tr, |n| {
                            e.eval(&Bindings {
                                t: n.t,
                                phi: n.phi,
                                u0: n.u0,
                                u: n.u,
                                xi: n.xi,
                                ..Default::default()
                            })
                        });
                        if kind == TermKindDoc::Mean {
                            i / (tr.times[tr.len() - 1] - tr.times[0])
                        } else {
                            i
                        }
                    }
                };
                w * value
            })
        }
        _ => {
            let e = cx.expr(path, &t.expr, &window_scope)?;
            Box::new(move |trace| {
                let tr = &trace.transcript;
                let vals: Vec<f64> = (0..tr.len())
                    .map(|n| {
                        e.eval(&Bindings {
                            theta: &trace.comments[n + 1],
                            omega: &tr.omega[n],
                            v: &tr.v[n],
                            ..Default::default()
                        })
                    })
                    .collect();
                let value = match kind {
                    TermKindDoc::WindowSum => vals.iter().sum(),
                    TermKindDoc::WindowMean => vals.iter().sum::<f64>() / vals.len() as f64,
                    _ => vals.last().copied().unwrap_or(f64::NAN),
                };
                w * value
            })
        }
    })
}

fn compile_adapt(cx: &Ctx<'_>, a: &AdaptDoc, c: &Compiled) -> Result<AdaptConfig> {
    let d = &c.dims;
    let dp = a.bounds.len();
    let fixed = c.spec.rule.theta0.clone();
    let theta0 = match &a.theta0 {
        None => None,
        Some(srcs) => {
            if srcs.len() != d.theta {
                return Err(Error::validation(
                    "adapt.theta0",
                    format!("{} expressions for {} comment components", srcs.len(), d.theta),
                ));
            }
            Some(cx.list("adapt.theta0", srcs, &Scope::new("the adapted initial comment").allow(Family::P, dp))?)
        }
    };
    if a.rule.len() != d.theta {
        return Err(Error::validation(
            "adapt.rule",
            format!("{} expressions for {} comment components", a.rule.len(), d.theta),
        ));
    }
    let scope = Scope::new("the adapted comment rule")
        .allow(Family::Theta, d.theta)
        .allow(Family::Omega, d.omega)
        .allow(Family::V, d.v)
        .allow(Family::P, dp);
    let rule = cx.list("adapt.rule", &a.rule, &scope)?;
    let family = ThetaFamily::new(a.bounds.iter().map(|[lo, hi]| (*lo, *hi)).collect(), a.p0.clone(), move |p| {
        let th0 = match &theta0 {
            None => fixed.clone(),
            Some(es) => eval_all(es, &Bindings { p, ..Default::default() }),
        };
        let rule = rule.clone();
        let p = p.to_vec();
        CommentRule::new(th0, move |c| {
            eval_all(
                &rule,
                &Bindings {
                    theta: c.theta,
                    omega: c.omega,
                    v: c.v,
                    p: &p,
                    ..Default::default()
                },
            )
        })
    })
    .map_err(at("adapt"))?;
    if a.objective.is_empty() {
        return Err(Error::validation("adapt.objective", "needs at least one term"));
    }
    let terms = a
        .objective
        .iter()
        .enumerate()
        .map(|(i, t)| node_term(cx, &format!("adapt.objective[{i}].expr"), t, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptConfig {
        family,
        objective: PerformanceFunctional::new("objective", move |trace| terms.iter().map(|f| f(trace)).sum()),
        budget: a.budget,
    })
}

fn compile_predict(cx: &Ctx<'_>, pd: &PredictDoc, c: &Compiled, step: f64) -> Result<PredictConfig> {
    let players = &c.spec.game.players;
    let strategies = |key: &str, lists: &[Vec<Src>], dim: &dyn Fn(&Player) -> usize| -> Result<Vec<PureControl>> {
        if lists.len() != players.len() {
            return Err(Error::validation(
                format!("predict.{key}"),
                format!("{} entries for {} players", lists.len(), players.len()),
            ));
        }
        let mut out = Vec::new();
        for (i, (srcs, pl)) in lists.iter().zip(players).enumerate() {
            let path = format!("predict.{key}[{i}]");
            if srcs.len() != dim(pl) {
                return Err(Error::validation(path, format!("{} expressions, `{}` needs {}", srcs.len(), pl.name, dim(pl))));
            }
            let scope = strategy_scope(format!("an assumed strategy of `{}`", pl.name), &c.dims, c.omega_visible);
            let es = cx.list(&path, srcs, &scope)?;
            out.push(PureControl::new(es.len(), move |s| {
                eval_all(
                    &es,
                    &Bindings {
                        t: s.t,
                        phi: s.phi,
                        theta: s.theta,
                        omega: s.omega.unwrap_or(&[]),
                        lambda: s.lambda,
                        ..Default::default()
                    },
                )
            }));
        }
        Ok(out)
    };
    let controls = match &pd.controls {
        None => players.iter().map(|p| p.pure.clone()).collect(),
        Some(lists) => strategies("controls", lists, &|p| p.law.u0_dim())?,
    };
    let virtual_players = pd
        .virtual_players
        .as_ref()
        .map(|lists| strategies("virtual", lists, &|p| p.law.eps_dim()))
        .transpose()?;
    if pd.eps.len() != players.len() {
        return Err(Error::validation(
            "predict.eps",
            format!("{} entries for {} players", pd.eps.len(), players.len()),
        ));
    }
    for (i, (e, pl)) in pd.eps.iter().zip(players).enumerate() {
        if e.len() != pl.law.eps_dim() {
            return Err(Error::validation(
                format!("predict.eps[{i}]"),
                format!("{} values, `{}` has {} hidden parameters", e.len(), pl.name, pl.law.eps_dim()),
            ));
        }
    }
    if !(pd.dt > 0.0 && pd.window > 0.0 && pd.max_depth > 0.0) {
        return Err(Error::validation("predict", "`dt`, `window` and `max_depth` must be positive"));
    }
    Ok(PredictConfig {
        t0: pd.t0,
        dt: pd.dt,
        window: pd.window,
        predictor: Predictor {
            controls,
            eps: pd.eps.clone(),
            max_depth: pd.max_depth,
            h: step,
        },
        virtual_players,
    })
}

/// Offsets of each system's block in a stacked vector.
fn stack_offsets(dims: &[usize]) -> Vec<usize> {
    let mut at = 0;
    dims.iter()
        .map(|d| {
            let a = at;
            at += d;
            a
        })
        .collect()
}

fn compile_synthesis(cx: &Ctx<'_>, list: &[SynthesisDoc], compiled: &[Compiled]) -> Result<SynthesisRule> {
    if list.len() != compiled.len() {
        return Err(Error::validation(
            "synthesis",
            format!("{} components for {} systems", list.len(), compiled.len()),
        ));
    }
    let th: Vec<usize> = compiled.iter().map(|c| c.dims.theta).collect();
    let om: Vec<usize> = compiled.iter().map(|c| c.dims.omega).collect();
    let vv: Vec<usize> = compiled.iter().map(|c| c.dims.v).collect();
    let (tho, omo, vo) = (stack_offsets(&th), stack_offsets(&om), stack_offsets(&vv));
    let scope = Scope::new("a synthesis rule")
        .allow(Family::Theta, th.iter().sum())
        .allow(Family::Omega, om.iter().sum())
        .allow(Family::V, vv.iter().sum());
    let mut components = Vec::new();
    for (j, s) in list.iter().enumerate() {
        let path = format!("synthesis[{j}]");
        let mut inputs = Vec::new();
        for &k in &s.inputs {
            if k == 0 || k > compiled.len() {
                return Err(Error::validation(
                    format!("{path}.inputs"),
                    format!("system {k} does not exist (systems are numbered 1..={})", compiled.len()),
                ));
            }
            if inputs.contains(&(k - 1)) {
                return Err(Error::validation(format!("{path}.inputs"), format!("system {k} listed twice")));
            }
            inputs.push(k - 1);
        }
        if inputs.is_empty() {
            return Err(Error::validation(format!("{path}.inputs"), "needs at least one system"));
        }
        if s.rule.len() != th[j] {
            return Err(Error::validation(
                format!("{path}.rule"),
                format!("{} expressions for {} comment components of system {}", s.rule.len(), th[j], j + 1),
            ));
        }
        let es = cx.list(&format!("{path}.rule"), &s.rule, &scope)?;
        for (r, e) in es.iter().enumerate() {
            for (fam, dims, offs) in [(Family::Theta, &th, &tho), (Family::Omega, &om, &omo), (Family::V, &vv, &vo)] {
                for i in e.indices(fam) {
                    let owner = (0..dims.len()).find(|&k| i >= offs[k] && i < offs[k] + dims[k]).expect("index in scope");
                    if !inputs.contains(&owner) {
                        return Err(Error::validation(
                            format!("{path}.rule[{r}]"),
                            format!(
                                "`{}{}` belongs to system {}, which is not among the inputs",
                                fam.prefix(),
                                i + 1,
                                owner + 1
                            ),
                        ));
                    }
                }
            }
        }
        let (th, om, vv) = (th.clone(), om.clone(), vv.clone());
        let (tho, omo, vo) = (tho.clone(), omo.clone(), vo.clone());
        let sys = inputs.clone();
        components.push(SynthComponent::new(inputs, move |x| {
            let mut theta = vec![0.0; th.iter().sum()];
            let mut omega = vec![0.0; om.iter().sum()];
            let mut v = vec![0.0; vv.iter().sum()];
            for (tr, &k) in x.triples.iter().zip(&sys) {
                theta[tho[k]..tho[k] + th[k]].copy_from_slice(tr.theta);
                omega[omo[k]..omo[k] + om[k]].copy_from_slice(tr.omega);
                v[vo[k]..vo[k] + vv[k]].copy_from_slice(tr.v);
            }
            eval_all(
                &es,
                &Bindings {
                    theta: &theta,
                    omega: &omega,
                    v: &v,
                    ..Default::default()
                },
            )
        }));
    }
    Ok(SynthesisRule { components })
}

fn compile_interaction(cx: &Ctx<'_>, i: &InteractionDoc, compiled: &[Compiled]) -> Result<[Option<InteractionTerm>; 2]> {
    if compiled.len() != 2 {
        return Err(Error::validation("interaction", format!("interaction couples two systems, found {}", compiled.len())));
    }
    let mut out = [None, None];
    for (s, srcs) in [&i.term12, &i.term21].into_iter().enumerate() {
        let Some(srcs) = srcs else { continue };
        let key = if s == 0 { "interaction.term12" } else { "interaction.term21" };
        let (me, other) = (&compiled[s].dims, &compiled[1 - s].dims);
        if srcs.len() != me.theta {
            return Err(Error::validation(
                key,
                format!("{} expressions for {} comment components of system {}", srcs.len(), me.theta, s + 1),
            ));
        }
        // θ of the receiving system first, then the other system's.
        let scope = Scope::new("an interaction term")
            .allow(Family::Theta, me.theta + other.theta)
            .allow(Family::Omega, me.omega)
            .allow(Family::V, me.v);
        let es = cx.list(key, srcs, &scope)?;
        out[s] = Some(InteractionTerm::new(es.len(), move |x| {
            let theta = [x.theta_self, x.theta_other].concat();
            eval_all(
                &es,
                &Bindings {
                    theta: &theta,
                    omega: x.omega,
                    v: x.v,
                    ..Default::default()
                },
            )
        }));
    }
    Ok(out)
}

fn compile_localize(l: &LocalizeDoc, compiled: &[Compiled]) -> Result<LocalizeConfig> {
    let totals = [
        compiled.iter().map(|c| c.dims.theta).sum::<usize>(),
        compiled.iter().map(|c| c.dims.omega).sum(),
        compiled.iter().map(|c| c.dims.v).sum(),
    ];
    let zero_based = |path: String, xs: &[usize], total: usize| -> Result<Vec<usize>> {
        xs.iter()
            .map(|&x| {
                if x == 0 || x > total {
                    Err(Error::validation(&path, format!("coordinate {x} outside 1..={total}")))
                } else {
                    Ok(x - 1)
                }
            })
            .collect()
    };
    let mut candidates = Vec::new();
    for (c, blocks) in l.candidates.iter().enumerate() {
        let mut out = Vec::new();
        for (b, block) in blocks.iter().enumerate() {
            let path = |k: &str| format!("localize.candidates[{c}][{b}].{k}");
            out.push(Block {
                theta: zero_based(path("theta"), &block.theta, totals[0])?,
                omega: zero_based(path("omega"), &block.omega, totals[1])?,
                v: zero_based(path("v"), &block.v, totals[2])?,
            });
        }
        candidates.push(Partition { blocks: out });
    }
    let probes = l
        .probes
        .iter()
        .map(|p| Probe {
            seed: p.seed,
            theta0: p.theta0.clone(),
        })
        .collect();
    Ok(LocalizeConfig { candidates, probes })
}

/// Compile `doc` under `overrides`. `text` is the source the document was
/// parsed from, used for error positions; pass `""` when there is none.
pub fn compile(doc: &ScenarioDoc, text: &str, overrides: &Overrides) -> Result<Scenario> {
    let settings = Settings {
        t0: doc.run.t0,
        horizon: overrides.horizon.unwrap_or(doc.run.horizon),
        step: overrides.step.unwrap_or(doc.run.step),
        seed: overrides.seed.unwrap_or(doc.seed),
    };
    if !(settings.step > 0.0 && settings.step.is_finite()) {
        return Err(Error::validation("run.step", format!("step must be positive, got {}", settings.step)));
    }
    if !(settings.horizon > settings.t0) {
        return Err(Error::validation(
            "run.horizon",
            format!("horizon {} must exceed t0 = {}", settings.horizon, settings.t0),
        ));
    }
    let cx = Ctx {
        text,
        constants: &doc.constants,
    };
    let mut compiled = Vec::new();
    let mut names = Vec::new();
    if let Some(state) = &doc.state {
        let parts = Parts {
            state,
            players: &doc.players,
            game: doc.game.as_ref(),
            binding: doc.binding.as_ref(),
            intention: doc.intention.as_ref(),
            coalitions: &doc.coalitions,
            windows: doc.windows.as_ref(),
            functionals: doc.functionals.as_ref(),
            comment: doc.comment.as_ref(),
        };
        compiled.push(compile_system(&cx, "", &parts, &settings)?);
        names.push(doc.name.clone().unwrap_or_else(|| "system".to_string()));
    }
    for (j, s) in doc.systems.iter().enumerate() {
        let parts = Parts {
            state: &s.state,
            players: &s.players,
            game: s.game.as_ref(),
            binding: s.binding.as_ref(),
            intention: s.intention.as_ref(),
            coalitions: &s.coalitions,
            windows: s.windows.as_ref(),
            functionals: s.functionals.as_ref(),
            comment: s.comment.as_ref(),
        };
        let mut c = compile_system(&cx, &format!("systems[{j}]"), &parts, &settings)?;
        c.spec.game.noise_stream = j as u64;
        compiled.push(c);
        names.push(s.name.clone());
    }

    let interaction = match &doc.interaction {
        None => [None, None],
        Some(i) => compile_interaction(&cx, i, &compiled)?,
    };
    let synthesis = if doc.synthesis.is_empty() {
        None
    } else {
        Some(compile_synthesis(&cx, &doc.synthesis, &compiled)?)
    };
    let localize = doc.localize.as_ref().map(|l| compile_localize(l, &compiled)).transpose()?;
    let single = |section: &str| -> Result<&Compiled> {
        if compiled.len() == 1 {
            Ok(&compiled[0])
        } else {
            Err(Error::validation(section, "only available for single-system scenarios"))
        }
    };
    let adapt = match &doc.adapt {
        None => None,
        Some(a) => Some(compile_adapt(&cx, a, single("adapt")?)?),
    };
    let predict = match &doc.predict {
        None => None,
        Some(p) => Some(compile_predict(&cx, p, single("predict")?, settings.step)?),
    };
    let recurrence = doc.verbalize.as_ref().map_or(
        RecurrenceFamily::Affine {
            intercept: true,
            use_summary: false,
        },
        |v| RecurrenceFamily::Affine {
            intercept: v.intercept,
            use_summary: v.summary,
        },
    );
    let od = doc.oracle.clone().unwrap_or_default();
    let theta_dim = compiled[0].dims.theta;
    let invariant_theta = od
        .invariant_theta
        .iter()
        .map(|&j| {
            if j == 0 || j > theta_dim {
                Err(Error::validation(
                    "oracle.invariant_theta",
                    format!("comment component {j} outside 1..={theta_dim}"),
                ))
            } else {
                Ok(j - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let oracle = OracleConfig {
        quasirandom_threshold: od.quasirandom_threshold,
        resonance_threshold: od.resonance_threshold,
        invariant_depth: od.invariant_depth,
        invariant_lag: od.invariant_lag,
        invariant_tol: od.invariant_tol,
        invariant_theta,
    };

    Ok(Scenario {
        doc: doc.clone(),
        hash: scenario_hash(doc),
        settings,
        systems: names
            .into_iter()
            .zip(compiled)
            .map(|(name, c)| System { name, spec: c.spec })
            .collect(),
        interaction,
        synthesis,
        localize,
        recurrence,
        adapt,
        predict,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::simulate;

    const LIN2: &str = include_str!("../../../../scenarios/lin2.toml");
    const COUPLE2: &str = include_str!("../../../../scenarios/couple2.toml");

    fn validation(text: &str) -> (String, Option<SourcePos>, String) {
        match load_scenario(text, &Overrides::default()).unwrap_err() {
            Error::Validation { path, pos, message } => (path, pos, message),
            other => panic!("expected a validation error, got {other}"),
        }
    }

    #[test]
    fn lin2_compiles_to_closed_form_game() {
        let sc = load_scenario(LIN2, &Overrides::default()).unwrap();
        assert_eq!(sc.systems.len(), 1);
        assert_eq!(sc.settings.seed, 7);
        let game = &sc.systems[0].spec.game;
        let traj = simulate(game, 1.0, 1e-3).unwrap();
        let end = traj.phi.last().unwrap()[0];
        assert!((end - (-1.2_f64).exp()).abs() < 1e-9, "{end}");
    }

    #[test]
    fn overrides_replace_run_settings() {
        let o = Overrides {
            seed: Some(99),
            step: Some(0.01),
            horizon: Some(2.0),
        };
        let sc = load_scenario(LIN2, &o).unwrap();
        assert_eq!((sc.settings.seed, sc.settings.step, sc.settings.horizon), (99, 0.01, 2.0));
    }

    #[test]
    fn undeclared_variable_names_path_and_position() {
        let text = LIN2.replace("\"u0_1 + eps1 * phi1\"", "\"u0_1 + eps1 * psi1\"");
        let (path, pos, message) = validation(&text);
        assert_eq!(path, "players[0].coupling[0]");
        assert!(message.contains("psi1"), "{message}");
        let pos = pos.unwrap();
        let line = text.lines().nth(pos.line - 1).unwrap();
        assert!(line[pos.column - 1..].starts_with("psi1"), "{line} @ {}", pos.column);
    }

    #[test]
    fn players_cannot_read_hidden_feedback() {
        let text = LIN2.replacen("pure = [\"0\"]", "pure = [\"eps1\"]", 1);
        let (path, _, _) = validation(&text);
        assert_eq!(path, "players[0].pure[0]");
    }

    #[test]
    fn bad_step_is_rejected() {
        let (path, _, _) = validation(&LIN2.replace("step = 1e-3", "step = -1.0"));
        assert_eq!(path, "run.step");
    }

    #[test]
    fn systems_sharing_a_seed_draw_distinct_noise() {
        let sc = load_scenario(COUPLE2, &Overrides::default()).unwrap();
        let a = simulate(&sc.systems[0].spec.game, 0.1, 1e-3).unwrap();
        let b = simulate(&sc.systems[1].spec.game, 0.1, 1e-3).unwrap();
        assert_ne!(a.eps[5][0] - (-0.2), b.eps[5][0] - 0.1);
    }
}
