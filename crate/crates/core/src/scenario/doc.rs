//! Scenario documents: TOML text with expression strings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::error::{Error, Result, SourcePos};
use crate::expr::Expr;

pub const SCENARIO_SCHEMA: &str = "tactica-scenario/1";
pub const DEFAULT_STEP: f64 = 1e-3;

/// An expression string with its location in the source text.
pub type Src = Spanned<String>;

fn is_false(b: &bool) -> bool {
    !*b
}

fn default_step() -> f64 {
    DEFAULT_STEP
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constants: BTreeMap<String, f64>,
    pub run: RunDoc,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub players: Vec<PlayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game: Option<GameDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<BindingDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intention: Option<IntentionDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coalitions: Vec<CoalitionDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<WindowsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functionals: Option<FunctionalsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<CommentDoc>,

    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub systems: Vec<SystemDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<InteractionDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synthesis: Vec<SynthesisDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localize: Option<LocalizeDoc>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalize: Option<VerbalizeDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<PredictDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDoc {
    #[serde(default)]
    pub t0: f64,
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDoc {
    pub phi0: Vec<f64>,
    pub dynamics: Vec<Src>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayerDoc {
    pub name: String,
    pub pure: Vec<Src>,
    /// Realized control; the pure control itself when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<Vec<Src>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
    /// Withheld from strategies; see [`player_view`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<HiddenDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenDoc {
    pub eps: Vec<Src>,
    #[serde(default)]
    pub noise: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameDoc {
    #[serde(default)]
    pub omega_visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeDoc {
    #[default]
    None,
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingDoc {
    #[serde(default)]
    pub theta_evolution: bool,
    #[serde(default)]
    pub omega_evolution: bool,
    #[serde(default)]
    pub feedback: ModeDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaDoc {
    pub schedule: Vec<Src>,
    #[serde(default)]
    pub evolution: bool,
    #[serde(default)]
    pub feedback: ModeDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentionDoc {
    pub xi0: Vec<f64>,
    pub dynamics: Vec<Src>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoalitionDoc {
    pub members: Vec<String>,
    /// Sum of the members' realized controls when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Vec<Src>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowsKindDoc {
    Fixed,
    Cells,
    Sets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowsDoc {
    pub kind: WindowsKindDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hysteresis: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Src>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<CellDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellDoc {
    pub label: String,
    pub predicate: Src,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalsDoc {
    #[serde(default)]
    pub omega: Vec<FunctionalDoc>,
    #[serde(default)]
    pub v: Vec<FunctionalDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindDoc {
    Integral,
    Mean,
    First,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamDoc {
    #[default]
    Phi,
    Xi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadratureDoc {
    #[default]
    Trapezoid,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: KindDoc,
    #[serde(default)]
    pub stream: StreamDoc,
    #[serde(default)]
    pub quadrature: QuadratureDoc,
    pub expr: Vec<Src>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommentDoc {
    pub theta0: Vec<f64>,
    /// Frozen comments when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Vec<Src>>,
}

/// One system of a multi-system document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDoc {
    pub name: String,
    pub state: StateDoc,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub players: Vec<PlayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game: Option<GameDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<BindingDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intention: Option<IntentionDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coalitions: Vec<CoalitionDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<WindowsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functionals: Option<FunctionalsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<CommentDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term12: Option<Vec<Src>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term21: Option<Vec<Src>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisDoc {
    /// One-based system numbers.
    pub inputs: Vec<usize>,
    pub rule: Vec<Src>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizeDoc {
    pub candidates: Vec<Vec<BlockDoc>>,
    pub probes: Vec<ProbeDoc>,
}

/// One-based coordinates of the stacked θ, ω and v vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDoc {
    pub theta: Vec<usize>,
    #[serde(default)]
    pub omega: Vec<usize>,
    #[serde(default)]
    pub v: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerbalizeDoc {
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub summary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKindDoc {
    Integral,
    Mean,
    Final,
    WindowSum,
    WindowMean,
    WindowLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermDoc {
    #[serde(default = "one")]
    pub weight: f64,
    pub kind: TermKindDoc,
    pub expr: Src,
}

fn one() -> f64 {
    1.0
}

fn default_budget() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptDoc {
    pub bounds: Vec<[f64; 2]>,
    pub p0: Vec<f64>,
    /// θ_0 as a function of p; the comment section's θ_0 when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<Src>>,
    pub rule: Vec<Src>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    pub objective: Vec<TermDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictDoc {
    pub max_depth: f64,
    pub t0: f64,
    pub dt: f64,
    /// Length of the estimation window ending at `t0`.
    pub window: f64,
    /// Assumed ε per player for the baseline prediction.
    pub eps: Vec<Vec<f64>>,
    /// Assumed pure controls per player; the players' own when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<Vec<Vec<Src>>>,
    /// Virtual-player strategies for the long-term forecast.
    #[serde(default, rename = "virtual", skip_serializing_if = "Option::is_none")]
    pub virtual_players: Option<Vec<Vec<Src>>>,
}

fn default_qr() -> f64 {
    crate::perception::QUASIRANDOM_THRESHOLD
}
fn default_res() -> f64 {
    crate::perception::RESONANCE_THRESHOLD
}
fn default_depth() -> usize {
    6
}
fn default_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDoc {
    #[serde(default = "default_qr")]
    pub quasirandom_threshold: f64,
    #[serde(default = "default_res")]
    pub resonance_threshold: f64,
    #[serde(default = "default_depth")]
    pub invariant_depth: usize,
    #[serde(default)]
    pub invariant_lag: usize,
    #[serde(default = "default_tol")]
    pub invariant_tol: f64,
    /// One-based θ components searched for invariants; all when empty.
    #[serde(default)]
    pub invariant_theta: Vec<usize>,
}

impl Default for OracleDoc {
    fn default() -> Self {
        OracleDoc {
            quasirandom_threshold: default_qr(),
            resonance_threshold: default_res(),
            invariant_depth: default_depth(),
            invariant_lag: 0,
            invariant_tol: default_tol(),
            invariant_theta: Vec::new(),
        }
    }
}

/// One-based line and column of byte offset `at` in `text`.
pub fn position(text: &str, at: usize) -> SourcePos {
    let mut at = at.min(text.len());
    while !text.is_char_boundary(at) {
        at -= 1;
    }
    let before = &text[..at];
    let line = before.matches('\n').count() + 1;
    let column = before[before.rfind('\n').map_or(0, |i| i + 1)..].chars().count() + 1;
    SourcePos { line, column }
}

/// Keys serde reports as expected for an unknown field, from its message.
fn suggestion(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    let (unknown, tail) = rest.split_once('`')?;
    let expected: Vec<&str> = tail.split('`').skip(1).step_by(2).collect();
    expected
        .into_iter()
        .map(|k| (strsim::levenshtein(unknown, k), k))
        .filter(|(d, k)| *d <= unknown.len().max(k.len()) / 2 + 1)
        .min()
        .map(|(_, k)| k.to_string())
}

/// Parse and structurally validate a scenario document. Expressions are
/// checked when the document is compiled.
pub fn parse_scenario(text: &str) -> Result<ScenarioDoc> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Validation {
        path: String::new(),
        pos: e.span().map(|s| position(text, s.start)),
        message: e.message().to_string(),
    })?;
    let doc: ScenarioDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let mut message = inner.message().to_string();
        if let Some(s) = suggestion(&message) {
            message.push_str(&format!("; did you mean `{s}`?"));
        }
        Error::Validation {
            path: if path == "." { String::new() } else { path },
            pos: inner.span().map(|s| position(text, s.start)),
            message,
        }
    })?;
    if doc.schema != SCENARIO_SCHEMA {
        return Err(Error::validation(
            "schema",
            format!("unsupported schema `{}`, expected `{SCENARIO_SCHEMA}`", doc.schema),
        ));
    }
    let single = doc.state.is_some();
    let multi = !doc.systems.is_empty();
    if single == multi {
        return Err(Error::validation(
            "",
            "a scenario declares either a single system ([state]) or a list of [[systems]]",
        ));
    }
    if multi
        && (!doc.players.is_empty()
            || doc.game.is_some()
            || doc.binding.is_some()
            || doc.intention.is_some()
            || !doc.coalitions.is_empty()
            || doc.windows.is_some()
            || doc.functionals.is_some()
            || doc.comment.is_some())
    {
        return Err(Error::validation("", "system sections of a multi-system scenario belong under [[systems]]"));
    }
    Ok(doc)
}

fn canonical_src(s: &mut Src, constants: &BTreeMap<String, f64>) {
    if let Ok(e) = Expr::parse_with(s.get_ref(), constants) {
        *s.get_mut() = e.to_string();
    }
}

fn canonical_list(v: &mut [Src], c: &BTreeMap<String, f64>) {
    v.iter_mut().for_each(|s| canonical_src(s, c));
}

fn canonical_system(
    c: &BTreeMap<String, f64>,
    state: Option<&mut StateDoc>,
    players: &mut [PlayerDoc],
    binding: Option<&mut BindingDoc>,
    intention: Option<&mut IntentionDoc>,
    coalitions: &mut [CoalitionDoc],
    windows: Option<&mut WindowsDoc>,
    functionals: Option<&mut FunctionalsDoc>,
    comment: Option<&mut CommentDoc>,
) {
    if let Some(s) = state {
        canonical_list(&mut s.dynamics, c);
    }
    for p in players {
        canonical_list(&mut p.pure, c);
        if let Some(cp) = p.coupling.as_mut() {
            canonical_list(cp, c);
        }
        if let Some(h) = p.hidden.as_mut() {
            canonical_list(&mut h.eps, c);
        }
    }
    if let Some(l) = binding.and_then(|b| b.lambda.as_mut()) {
        canonical_list(&mut l.schedule, c);
    }
    if let Some(i) = intention {
        canonical_list(&mut i.dynamics, c);
    }
    for co in coalitions {
        if let Some(a) = co.aggregate.as_mut() {
            canonical_list(a, c);
        }
    }
    if let Some(w) = windows {
        if let Some(r) = w.rule.as_mut() {
            canonical_src(r, c);
        }
        w.cells.iter_mut().for_each(|cell| canonical_src(&mut cell.predicate, c));
    }
    if let Some(f) = functionals {
        for fd in f.omega.iter_mut().chain(f.v.iter_mut()) {
            canonical_list(&mut fd.expr, c);
        }
    }
    if let Some(r) = comment.and_then(|cm| cm.rule.as_mut()) {
        canonical_list(r, c);
    }
}

/// The document with every expression re-printed in canonical form.
pub fn canonicalize(doc: &ScenarioDoc) -> ScenarioDoc {
    let mut d = doc.clone();
    let c = d.constants.clone();
    canonical_system(
        &c,
        d.state.as_mut(),
        &mut d.players,
        d.binding.as_mut(),
        d.intention.as_mut(),
        &mut d.coalitions,
        d.windows.as_mut(),
        d.functionals.as_mut(),
        d.comment.as_mut(),
    );
    for s in &mut d.systems {
        canonical_system(
            &c,
            Some(&mut s.state),
            &mut s.players,
            s.binding.as_mut(),
            s.intention.as_mut(),
            &mut s.coalitions,
            s.windows.as_mut(),
            s.functionals.as_mut(),
            s.comment.as_mut(),
        );
    }
    if let Some(i) = d.interaction.as_mut() {
        for t in [i.term12.as_mut(), i.term21.as_mut()].into_iter().flatten() {
            canonical_list(t, &c);
        }
    }
    for s in &mut d.synthesis {
        canonical_list(&mut s.rule, &c);
    }
    if let Some(a) = d.adapt.as_mut() {
        if let Some(t) = a.theta0.as_mut() {
            canonical_list(t, &c);
        }
        canonical_list(&mut a.rule, &c);
        a.objective.iter_mut().for_each(|t| canonical_src(&mut t.expr, &c));
    }
    if let Some(p) = d.predict.as_mut() {
        for lists in [p.controls.as_mut(), p.virtual_players.as_mut()].into_iter().flatten() {
            lists.iter_mut().for_each(|l| canonical_list(l, &c));
        }
    }
    d
}

/// Canonical text of a document: canonical expressions, fixed key order.
pub fn to_canonical_text(doc: &ScenarioDoc) -> String {
    toml::to_string(&canonicalize(doc)).expect("scenario documents always serialize")
}

/// SHA-256 of the canonical text, hex encoded.
pub fn scenario_hash(doc: &ScenarioDoc) -> String {
    hex::encode(Sha256::digest(to_canonical_text(doc).as_bytes()))
}

/// The document as the players see it: hidden ε-maps stripped.
pub fn player_view(doc: &ScenarioDoc) -> ScenarioDoc {
    let mut d = doc.clone();
    d.players.iter_mut().for_each(|p| p.hidden = None);
    for s in &mut d.systems {
        s.players.iter_mut().for_each(|p| p.hidden = None);
    }
    d
}
