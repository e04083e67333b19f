//! Executes one command over a compiled scenario, producing the trace log, a
//! JSON report and console summary lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dialogue::DialogueTranscript;
use crate::engine::{simulate, GameState, Trajectory};
use crate::error::{Error, Result};
use crate::multisystem::{
    couple_comments, localize_system, run_coupled, run_unified, synthesize_comments, Partition, SynthesisRule,
    SystemBundle, UnifiedSystem,
};
use crate::perception::{run_oracle, PerceptionSpec};
use crate::prediction::{associated_game, correct_prediction, estimate_epsilon, predict_against, strategic_forecast, Predictor, ShortLayer};
use crate::scenario::{Scenario, TraceLog};
use crate::selforg::{adapt_theta, Objective, Score};
use crate::tactics::{run_tactical, CommentRule, Segmenter, TacticalSpec, TacticalTrace};
use crate::verbalization::{fit_recurrence, segment_by_cells, RecurrenceFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Simulate,
    Verbalize,
    Tactical,
    Adapt,
    Predict,
    Roulette,
    Oracle,
    Couple,
    Synthesize,
    Localize,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Simulate,
        Command::Verbalize,
        Command::Tactical,
        Command::Adapt,
        Command::Predict,
        Command::Roulette,
        Command::Oracle,
        Command::Couple,
        Command::Synthesize,
        Command::Localize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Verbalize => "verbalize",
            Command::Tactical => "tactical",
            Command::Adapt => "adapt",
            Command::Predict => "predict",
            Command::Roulette => "roulette",
            Command::Oracle => "oracle",
            Command::Couple => "couple",
            Command::Synthesize => "synthesize",
            Command::Localize => "localize",
        }
    }

    pub fn from_name(name: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: TraceLog,
    pub report: Value,
    /// One line per closed window, then command-specific lines.
    pub summary: Vec<String>,
}

impl RunOutput {
    pub fn report_text(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("reports always serialize") + "\n"
    }

    /// Output name to SHA-256, as recorded in run manifests.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("trace".to_string(), self.log.hash()),
            (
                "report".to_string(),
                hex::encode(Sha256::digest(self.report_text().as_bytes())),
            ),
        ])
    }
}

fn vec_str(xs: &[f64]) -> String {
    let mut s = String::from("[");
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{x:.6}");
    }
    s.push(']');
    s
}

fn window_lines(out: &mut Vec<String>, name: &str, trace: &TacticalTrace) {
    let tr = &trace.transcript;
    for n in 0..tr.len() {
        out.push(format!(
            "{name} n={} t={:.6} omega={} v={} theta={}",
            n + 1,
            tr.boundaries[n + 1],
            vec_str(&tr.omega[n]),
            vec_str(&tr.v[n]),
            vec_str(&trace.comments[n + 1])
        ));
    }
}

fn cell_names(spec: &TacticalSpec) -> Vec<String> {
    match &spec.segmenter {
        Segmenter::Cells(c) => c.cells.iter().map(|c| c.label.clone()).collect(),
        _ => Vec::new(),
    }
}

fn only_one(sc: &Scenario, cmd: Command) -> Result<&TacticalSpec> {
    match sc.systems.as_slice() {
        [s] => Ok(&s.spec),
        _ => Err(Error::validation(
            "systems",
            format!("`{}` runs on single-system scenarios", cmd.name()),
        )),
    }
}

fn missing(section: &str, cmd: Command) -> Error {
    Error::validation(section, format!("`{}` needs a [{section}] section", cmd.name()))
}

fn tactical_json(name: &str, trace: &TacticalTrace) -> Value {
    json!({
        "name": name,
        "windows": trace.transcript.len(),
        "boundaries": trace.transcript.boundaries,
        "final_phi": trace.trajectory.final_phi(),
        "final_theta": trace.comments.last(),
        "ends": trace.ends.iter().map(|e| format!("{e:?}").to_lowercase()).collect::<Vec<_>>(),
    })
}

/// Window means of φ, the summaries an affine recurrence may read.
fn phi_means(traj: &Trajectory, nodes: &[usize]) -> Vec<Vec<f64>> {
    nodes
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let span = traj.times[b] - traj.times[a];
            let mut acc = vec![0.0; traj.phi[a].len()];
            for k in a..b {
                let half = 0.5 * (traj.times[k + 1] - traj.times[k]);
                for (s, (l, r)) in acc.iter_mut().zip(traj.phi[k].iter().zip(&traj.phi[k + 1])) {
                    *s += half * (l + r);
                }
            }
            acc.iter().map(|s| s / span).collect()
        })
        .collect()
}

fn verbalize(sc: &Scenario, log: &mut TraceLog, summary: &mut Vec<String>) -> Result<Value> {
    let (horizon, h) = (sc.settings.horizon, sc.settings.step);
    let mut systems = Vec::new();
    for (j, sys) in sc.systems.iter().enumerate() {
        let spec = &sys.spec;
        let traj = simulate(&spec.game, horizon, h)?;
        let names = cell_names(spec);
        let (nodes, node_labels) = match &spec.segmenter {
            Segmenter::Cells(c) => {
                let seg = segment_by_cells(&traj.times, &traj.eps, c)?;
                (seg.nodes, seg.labels.iter().map(|&l| names[l].clone()).collect())
            }
            Segmenter::Fixed(nodes) => (nodes.clone(), Vec::new()),
            Segmenter::Sets(_) => {
                return Err(Error::validation("windows.kind", "`verbalize` needs fixed or cell windows"));
            }
        };
        let transcript = DialogueTranscript::from_nodes(&traj, &spec.functionals, &nodes)?;
        log.push_trajectory(j, &traj, &node_labels);
        for n in 0..transcript.len() {
            log.windows.push(crate::scenario::WindowRow {
                system: j,
                n: n + 1,
                t: transcript.boundaries[n + 1],
                omega: transcript.omega[n].clone(),
                v: transcript.v[n].clone(),
                theta: Vec::new(),
            });
            summary.push(format!(
                "{} n={} t={:.6} omega={} v={}",
                sys.name,
                n + 1,
                transcript.boundaries[n + 1],
                vec_str(&transcript.omega[n]),
                vec_str(&transcript.v[n])
            ));
        }
        let summaries = matches!(sc.recurrence, RecurrenceFamily::Affine { use_summary: true, .. }).then(|| phi_means(&traj, &nodes));
        let recurrence = match fit_recurrence(&transcript, summaries.as_deref(), &sc.recurrence) {
            Ok(m) => json!({
                "coefficients": m.coefficients,
                "max_residual": m.max_residual,
                "rank": m.rank,
                "rank_deficient": m.rank_deficient,
            }),
            Err(e) => json!({ "error": e.to_string() }),
        };
        let window_labels: Vec<&String> = if node_labels.is_empty() {
            Vec::new()
        } else {
            nodes[..nodes.len() - 1].iter().map(|&k| &node_labels[k]).collect()
        };
        systems.push(json!({
            "name": sys.name,
            "windows": transcript.len(),
            "boundaries": transcript.boundaries,
            "labels": window_labels,
            "recurrence": recurrence,
        }));
    }
    Ok(json!({ "systems": systems }))
}

fn bundle_of(sc: &Scenario) -> Result<SystemBundle> {
    SystemBundle::new(sc.systems.iter().map(|s| s.spec.clone()).collect())
}

fn unified(sc: &Scenario) -> Result<UnifiedSystem> {
    let bundle = bundle_of(sc)?;
    let rule = sc.synthesis.clone().unwrap_or_else(|| SynthesisRule::diagonal(&bundle));
    synthesize_comments(bundle, rule)
}

fn partition_json(p: &Partition) -> Value {
    let one = |xs: &[usize]| xs.iter().map(|x| x + 1).collect::<Vec<_>>();
    Value::Array(
        p.blocks
            .iter()
            .map(|b| json!({ "theta": one(&b.theta), "omega": one(&b.omega), "v": one(&b.v) }))
            .collect(),
    )
}

fn score_json(s: &Score) -> Value {
    match s {
        Score::Value(v) => json!(v),
        Score::Failed(m) => json!({ "failed": m }),
    }
}

/// Run `cmd` on `sc`.
pub fn execute(cmd: Command, sc: &Scenario) -> Result<RunOutput> {
    let st = &sc.settings;
    let (horizon, h) = (st.horizon, st.step);
    let mut log = TraceLog::new(&sc.hash, st.seed, cmd.name(), h, horizon);
    let mut summary = Vec::new();
    let report = match cmd {
        Command::Simulate => {
            let mut systems = Vec::new();
            for (j, sys) in sc.systems.iter().enumerate() {
                let traj = simulate(&sys.spec.game, horizon, h)?;
                log.push_trajectory(j, &traj, &[]);
                summary.push(format!("{} t={:.6} phi={}", sys.name, traj.times[traj.len() - 1], vec_str(traj.final_phi())));
                systems.push(json!({ "name": sys.name, "nodes": traj.len(), "final_phi": traj.final_phi() }));
            }
            json!({ "systems": systems })
        }
        Command::Verbalize => verbalize(sc, &mut log, &mut summary)?,
        Command::Tactical => {
            let mut systems = Vec::new();
            for (j, sys) in sc.systems.iter().enumerate() {
                let trace = run_tactical(&sys.spec, horizon, h)?;
                log.push_tactical(j, &trace, &cell_names(&sys.spec));
                window_lines(&mut summary, &sys.name, &trace);
                systems.push(tactical_json(&sys.name, &trace));
            }
            json!({ "systems": systems })
        }
        Command::Adapt => {
            let spec = only_one(sc, cmd)?;
            let cfg = sc.adapt.as_ref().ok_or_else(|| missing("adapt", cmd))?;
            let objective = Objective {
                spec,
                horizon,
                h,
                j: &cfg.objective,
            };
            let res = adapt_theta(&cfg.family, &objective, cfg.budget, st.seed)?;
            let mut best = spec.clone();
            best.rule = cfg.family.rule(&res.best_p);
            let trace = run_tactical(&best, horizon, h)?;
            log.push_tactical(0, &trace, &cell_names(spec));
            for a in &res.history {
                summary.push(format!("accept evaluation={} p={} J={:?}", a.evaluation, vec_str(&a.p), a.score.value()));
            }
            window_lines(&mut summary, &sc.systems[0].name, &trace);
            json!({
                "best_p": res.best_p,
                "best_score": score_json(&res.best_score),
                "evaluations": res.evaluations,
                "history": res.history.iter().map(|a| json!({
                    "evaluation": a.evaluation,
                    "p": a.p,
                    "score": score_json(&a.score),
                })).collect::<Vec<_>>(),
                "run": tactical_json(&sc.systems[0].name, &trace),
            })
        }
        Command::Predict => {
            let spec = only_one(sc, cmd)?;
            let cfg = sc.predict.as_ref().ok_or_else(|| missing("predict", cmd))?;
            let trace = run_tactical(spec, horizon, h)?;
            let traj = &trace.trajectory;
            let node = |t: f64| {
                traj.grid
                    .node_of(t)
                    .filter(|&k| k < traj.len())
                    .ok_or_else(|| Error::validation("predict", format!("time {t} is not a node of the run")))
            };
            let (ka, k0) = (node(cfg.t0 - cfg.window)?, node(cfg.t0)?);
            let estimate = estimate_epsilon(&spec.game, traj, ka, k0)?;
            let baseline = predict_against(&spec.game, traj, cfg.t0, cfg.dt, &cfg.predictor)?;
            let corrected = correct_prediction(&baseline, &estimate)?;
            let forecast = match &cfg.virtual_players {
                None => Value::Null,
                Some(v) => {
                    let b = associated_game(&spec.game, v.clone())?;
                    let from = GameState {
                        t: traj.times[k0],
                        phi: traj.phi[k0].clone(),
                    };
                    let layer = ShortLayer {
                        dt: cfg.dt,
                        predictor: Predictor {
                            eps: corrected.corrected_eps.clone(),
                            ..cfg.predictor.clone()
                        },
                    };
                    let f = strategic_forecast(&b, &from, horizon, h, Some(&layer))?;
                    json!({
                        "channels": f.channels,
                        "long_final_phi": f.long.final_phi(),
                        "combined_final_phi": f.combined.final_phi(),
                        "realized_final_phi": traj.final_phi(),
                    })
                }
            };
            log.push_tactical(0, &trace, &cell_names(spec));
            window_lines(&mut summary, &sc.systems[0].name, &trace);
            summary.push(format!(
                "predict t0={:.6} dt={:.6} baseline_error={:.3e} corrected_error={:.3e}",
                corrected.t0, cfg.dt, corrected.baseline_error, corrected.corrected_error
            ));
            json!({
                "estimate": {
                    "t_start": estimate.t_start,
                    "t_end": estimate.t_end,
                    "eps": estimate.eps,
                    "identifiable": estimate.identifiable,
                    "residual": estimate.residual,
                },
                "t0": corrected.t0,
                "dt": cfg.dt,
                "realized_phi": corrected.realized_end,
                "baseline_phi": corrected.baseline.final_phi(),
                "corrected_phi": corrected.corrected.final_phi(),
                "corrected_eps": corrected.corrected_eps,
                "baseline_error": corrected.baseline_error,
                "corrected_error": corrected.corrected_error,
                "forecast": forecast,
            })
        }
        Command::Roulette | Command::Oracle => {
            let spec = only_one(sc, cmd)?;
            let Segmenter::Sets(sets) = &spec.segmenter else {
                return Err(Error::validation("windows.kind", format!("`{}` needs set windows", cmd.name())));
            };
            let rule = match cmd {
                Command::Roulette => CommentRule::frozen(spec.rule.theta0.clone()),
                _ => spec.rule.clone(),
            };
            let pspec = PerceptionSpec {
                game: spec.game.clone(),
                sets: sets.clone(),
                functionals: spec.functionals.clone(),
                rule,
            };
            let o = run_oracle(&pspec, horizon, h, &sc.oracle)?;
            log.push_tactical(0, &o.run.trace, &[]);
            window_lines(&mut summary, &sc.systems[0].name, &o.run.trace);
            summary.push(format!(
                "{} sets={} roulette={} resonant={} invariants={}",
                cmd.name(),
                o.run.sets.len(),
                o.roulette,
                o.resonance.resonant,
                o.invariants.len()
            ));
            json!({
                "sets": o.run.sets.iter().map(|s| json!({
                    "t_start": s.t_start,
                    "t_end": s.t_end,
                    "guarded": s.guarded(),
                })).collect::<Vec<_>>(),
                "frozen": o.frozen,
                "roulette": o.roulette,
                "quasirandom": o.quasirandom.iter().map(|q| json!({
                    "autocorr": q.autocorr,
                    "degenerate": q.degenerate,
                    "quasirandom": q.quasirandom,
                })).collect::<Vec<_>>(),
                "resonance": {
                    "corr": o.resonance.corr,
                    "degenerate": o.resonance.degenerate,
                    "resonant": o.resonance.resonant,
                    "warning": o.resonance.warning,
                },
                "invariants": o.invariants.iter().map(|i| json!({
                    "first": i.first + 1,
                    "last": i.last + 1,
                    "coefficients": i.coefficients,
                    "constant": i.constant,
                    "residual": i.residual,
                })).collect::<Vec<_>>(),
            })
        }
        Command::Couple => {
            if sc.systems.len() != 2 {
                return Err(Error::validation("systems", "`couple` needs exactly two systems"));
            }
            let [t12, t21] = sc.interaction.clone();
            let coupled = couple_comments(sc.systems[0].spec.clone(), sc.systems[1].spec.clone(), t12, t21)?;
            let traces = run_coupled(&coupled, horizon, h)?;
            let mut systems = Vec::new();
            for (j, (trace, sys)) in traces.iter().zip(&sc.systems).enumerate() {
                log.push_tactical(j, trace, &cell_names(&sys.spec));
                window_lines(&mut summary, &sys.name, trace);
                systems.push(tactical_json(&sys.name, trace));
            }
            json!({ "systems": systems })
        }
        Command::Synthesize => {
            let u = unified(sc)?;
            let ut = run_unified(&u, horizon, h)?;
            let mut systems = Vec::new();
            for (j, (trace, sys)) in ut.traces.iter().zip(&sc.systems).enumerate() {
                log.push_tactical(j, trace, &cell_names(&sys.spec));
                window_lines(&mut summary, &sys.name, trace);
                systems.push(tactical_json(&sys.name, trace));
            }
            json!({
                "graph": u.rule.graph().iter().map(|g| g.iter().map(|k| k + 1).collect::<Vec<_>>()).collect::<Vec<_>>(),
                "comments": ut.comments,
                "systems": systems,
            })
        }
        Command::Localize => {
            let cfg = sc.localize.as_ref().ok_or_else(|| missing("localize", cmd))?;
            let u = unified(sc)?;
            let res = localize_system(&u, &cfg.candidates, &cfg.probes, horizon, h)?;
            let ut = run_unified(&u, horizon, h)?;
            for (j, (trace, sys)) in ut.traces.iter().zip(&sc.systems).enumerate() {
                log.push_tactical(j, trace, &cell_names(&sys.spec));
                window_lines(&mut summary, &sys.name, trace);
            }
            summary.push(format!(
                "localize chosen={} blocks={} error={:.3e}",
                res.chosen + 1,
                res.partition.blocks.len(),
                res.error
            ));
            json!({
                "chosen": res.chosen + 1,
                "partition": partition_json(&res.partition),
                "error": res.error,
                "fits": res.fits.iter().map(|f| json!({
                    "coefficients": f.coefficients,
                    "rank": f.rank,
                    "max_residual": f.max_residual,
                })).collect::<Vec<_>>(),
                "scores": res.scores.iter().map(|s| json!({
                    "error": s.error,
                    "cross_dependencies": s.cross_dependencies,
                    "blocks": s.blocks,
                })).collect::<Vec<_>>(),
            })
        }
    };
    Ok(RunOutput {
        log,
        report: json!({
            "command": cmd.name(),
            "scenario_hash": sc.hash,
            "seed": st.seed,
            "step": h,
            "horizon": horizon,
            "result": report,
        }),
        summary,
    })
}
