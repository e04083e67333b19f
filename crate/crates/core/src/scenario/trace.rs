//! Trace logs: one row per grid node and one per closed window, written as
//! JSON lines or tab-separated text.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::tactics::TacticalTrace;

pub const TRACE_SCHEMA: &str = "tactica-trace/1";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub schema: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub command: String,
    pub step: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRow {
    pub system: usize,
    pub t: f64,
    pub phi: Vec<f64>,
    pub u0: Vec<f64>,
    pub u: Vec<f64>,
    pub eps: Vec<f64>,
    /// Active cell, for cell-segmented runs.
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRow {
    pub system: usize,
    pub n: usize,
    /// Closing time `t_n`.
    pub t: f64,
    pub omega: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLog {
    pub header: TraceHeader,
    pub nodes: Vec<NodeRow>,
    pub windows: Vec<WindowRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Jsonl,
    Tsv,
}

impl TraceLog {
    pub fn new(scenario_hash: &str, seed: u64, command: &str, step: f64, horizon: f64) -> Self {
        TraceLog {
            header: TraceHeader {
                schema: TRACE_SCHEMA.to_string(),
                scenario_hash: scenario_hash.to_string(),
                seed,
                command: command.to_string(),
                step,
                horizon,
            },
            nodes: Vec::new(),
            windows: Vec::new(),
        }
    }

    /// Node rows of a plain trajectory. `labels`, when nonempty, names the
    /// active cell per node.
    pub fn push_trajectory(&mut self, system: usize, traj: &Trajectory, labels: &[String]) {
        for k in 0..traj.len() {
            self.nodes.push(NodeRow {
                system,
                t: traj.times[k],
                phi: traj.phi[k].clone(),
                u0: traj.u0[k].clone(),
                u: traj.u[k].clone(),
                eps: traj.eps[k].clone(),
                label: labels.get(k).cloned(),
            });
        }
    }

    /// Node rows plus one window row per closed window.
    pub fn push_tactical(&mut self, system: usize, trace: &TacticalTrace, cell_names: &[String]) {
        let labels: Vec<String> = trace
            .labels
            .iter()
            .map(|&l| cell_names.get(l).cloned().unwrap_or_else(|| l.to_string()))
            .collect();
        self.push_trajectory(system, &trace.trajectory, &labels);
        let tr = &trace.transcript;
        for n in 0..tr.len() {
            self.windows.push(WindowRow {
                system,
                n: n + 1,
                t: tr.boundaries[n + 1],
                omega: tr.omega[n].clone(),
                v: tr.v[n].clone(),
                theta: trace.comments.get(n + 1).cloned().unwrap_or_default(),
            });
        }
    }

    pub fn render(&self, format: TraceFormat) -> String {
        match format {
            TraceFormat::Jsonl => render_jsonl(self),
            TraceFormat::Tsv => render_tsv(self),
        }
    }

    /// SHA-256 of the JSON-lines rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(render_jsonl(self).as_bytes()))
    }
}

/// 17 significant digits; non-finite values become `null`.
fn num(out: &mut String, x: f64) {
    if x.is_finite() {
        let _ = write!(out, "{x:.16e}");
    } else {
        out.push_str("null");
    }
}

fn json_vec(out: &mut String, key: &str, xs: &[f64]) {
    let _ = write!(out, ",\"{key}\":[");
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        num(out, *x);
    }
    out.push(']');
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn render_jsonl(log: &TraceLog) -> String {
    let h = &log.header;
    let mut out = String::new();
    let _ = write!(
        out,
        "{{\"schema\":{},\"scenario_hash\":{},\"seed\":{},\"command\":{},\"step\":",
        json_str(&h.schema),
        json_str(&h.scenario_hash),
        h.seed,
        json_str(&h.command)
    );
    num(&mut out, h.step);
    out.push_str(",\"horizon\":");
    num(&mut out, h.horizon);
    out.push_str("}\n");
    for r in &log.nodes {
        let _ = write!(out, "{{\"kind\":\"node\",\"system\":{},\"t\":", r.system);
        num(&mut out, r.t);
        json_vec(&mut out, "phi", &r.phi);
        json_vec(&mut out, "u0", &r.u0);
        json_vec(&mut out, "u", &r.u);
        json_vec(&mut out, "eps", &r.eps);
        match &r.label {
            Some(l) => {
                let _ = write!(out, ",\"label\":{}", json_str(l));
            }
            None => out.push_str(",\"label\":null"),
        }
        out.push_str("}\n");
    }
    for r in &log.windows {
        let _ = write!(out, "{{\"kind\":\"window\",\"system\":{},\"n\":{},\"t\":", r.system, r.n);
        num(&mut out, r.t);
        json_vec(&mut out, "omega", &r.omega);
        json_vec(&mut out, "v", &r.v);
        json_vec(&mut out, "theta", &r.theta);
        out.push_str("}\n");
    }
    out
}

fn tsv_nums(out: &mut String, xs: &[f64]) {
    for x in xs {
        out.push('\t');
        if x.is_finite() {
            let _ = write!(out, "{x:.16e}");
        } else {
            let _ = write!(out, "{x}");
        }
    }
}

fn names(prefix: &str, n: usize) -> String {
    (1..=n).map(|i| format!("\t{prefix}{i}")).collect()
}

fn render_tsv(log: &TraceLog) -> String {
    let h = &log.header;
    let mut out = String::new();
    let _ = writeln!(out, "#schema\t{}", h.schema);
    let _ = writeln!(out, "#scenario_hash\t{}", h.scenario_hash);
    let _ = writeln!(out, "#seed\t{}", h.seed);
    let _ = writeln!(out, "#command\t{}", h.command);
    let _ = writeln!(out, "#step\t{:.16e}", h.step);
    let _ = writeln!(out, "#horizon\t{:.16e}", h.horizon);
    let mut layout = None;
    for r in &log.nodes {
        let l = (r.phi.len(), r.u0.len(), r.u.len(), r.eps.len());
        if layout != Some(l) {
            let _ = writeln!(
                out,
                "#nodes\tsystem\tt{}{}{}{}\tlabel",
                names("phi", l.0),
                names("u0_", l.1),
                names("u", l.2),
                names("eps", l.3)
            );
            layout = Some(l);
        }
        let _ = write!(out, "{}", r.system);
        tsv_nums(&mut out, &[r.t]);
        tsv_nums(&mut out, &r.phi);
        tsv_nums(&mut out, &r.u0);
        tsv_nums(&mut out, &r.u);
        tsv_nums(&mut out, &r.eps);
        let _ = writeln!(out, "\t{}", r.label.as_deref().unwrap_or(""));
    }
    let mut layout = None;
    for r in &log.windows {
        let l = (r.omega.len(), r.v.len(), r.theta.len());
        if layout != Some(l) {
            let _ = writeln!(
                out,
                "#windows\tsystem\tn\tt{}{}{}",
                names("omega", l.0),
                names("v", l.1),
                names("theta", l.2)
            );
            layout = Some(l);
        }
        let _ = write!(out, "{}\t{}", r.system, r.n);
        tsv_nums(&mut out, &[r.t]);
        tsv_nums(&mut out, &r.omega);
        tsv_nums(&mut out, &r.v);
        tsv_nums(&mut out, &r.theta);
        out.push('\n');
    }
    out
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write through a sibling temporary file so readers never see a partial
/// log.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, text).map_err(io(path))?;
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn write_trace(log: &TraceLog, path: &Path, format: TraceFormat) -> Result<()> {
    write_text(path, &log.render(format))
}

pub fn read_trace(path: &Path) -> Result<TraceLog> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    parse_trace(&text).map_err(|e| e.under(&path.display().to_string()))
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Validation {
        path: String::new(),
        pos: Some(crate::error::SourcePos { line, column: 1 }),
        message: message.into(),
    }
}

/// Parse either rendering, detected from the first character.
pub fn parse_trace(text: &str) -> Result<TraceLog> {
    match text.trim_start().chars().next() {
        Some('{') => parse_jsonl(text),
        Some('#') => parse_tsv(text),
        _ => Err(bad(1, "not a trace log")),
    }
}

fn floats<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let v: Vec<Option<f64>> = Deserialize::deserialize(d)?;
    Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
}

fn float<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let v: Option<f64> = Deserialize::deserialize(d)?;
    Ok(v.unwrap_or(f64::NAN))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    schema: String,
    scenario_hash: String,
    seed: u64,
    command: String,
    #[serde(deserialize_with = "float")]
    step: f64,
    #[serde(deserialize_with = "float")]
    horizon: f64,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum JsonRow {
    Node {
        system: usize,
        #[serde(deserialize_with = "float")]
        t: f64,
        #[serde(deserialize_with = "floats")]
        phi: Vec<f64>,
        #[serde(deserialize_with = "floats")]
        u0: Vec<f64>,
        #[serde(deserialize_with = "floats")]
        u: Vec<f64>,
        #[serde(deserialize_with = "floats")]
        eps: Vec<f64>,
        label: Option<String>,
    },
    Window {
        system: usize,
        n: usize,
        #[serde(deserialize_with = "float")]
        t: f64,
        #[serde(deserialize_with = "floats")]
        omega: Vec<f64>,
        #[serde(deserialize_with = "floats")]
        v: Vec<f64>,
        #[serde(deserialize_with = "floats")]
        theta: Vec<f64>,
    },
}

fn check_schema(schema: &str) -> Result<()> {
    if schema != TRACE_SCHEMA {
        return Err(Error::validation(
            "schema",
            format!("unsupported trace schema `{schema}`, expected `{TRACE_SCHEMA}`"),
        ));
    }
    Ok(())
}

fn parse_jsonl(text: &str) -> Result<TraceLog> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty trace"))?;
    let h: JsonHeader = serde_json::from_str(first).map_err(|e| bad(1, e.to_string()))?;
    check_schema(&h.schema)?;
    let mut log = TraceLog::new(&h.scenario_hash, h.seed, &h.command, h.step, h.horizon);
    for (i, line) in lines {
        match serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))? {
            JsonRow::Node {
                system,
                t,
                phi,
                u0,
                u,
                eps,
                label,
            } => log.nodes.push(NodeRow {
                system,
                t,
                phi,
                u0,
                u,
                eps,
                label,
            }),
            JsonRow::Window {
                system,
                n,
                t,
                omega,
                v,
                theta,
            } => log.windows.push(WindowRow {
                system,
                n,
                t,
                omega,
                v,
                theta,
            }),
        }
    }
    Ok(log)
}

/// Width of each run of consecutive columns sharing a prefix, for the given
/// prefixes in order.
fn widths(cols: &[&str], prefixes: &[&str]) -> Vec<usize> {
    let is = |c: &str, p: &str| c.strip_prefix(p).is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()));
    prefixes.iter().map(|p| cols.iter().filter(|c| is(c, p)).count()).collect()
}

fn parse_tsv(text: &str) -> Result<TraceLog> {
    let mut meta = std::collections::BTreeMap::new();
    let mut node_w: Option<Vec<usize>> = None;
    let mut window_w: Option<Vec<usize>> = None;
    let mut nodes = Vec::new();
    let mut windows = Vec::new();
    let mut in_windows = false;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if let Some(key) = fields[0].strip_prefix('#') {
            match key {
                "nodes" => {
                    node_w = Some(widths(&fields, &["phi", "u0_", "u", "eps"]));
                    in_windows = false;
                }
                "windows" => {
                    window_w = Some(widths(&fields, &["omega", "v", "theta"]));
                    in_windows = true;
                }
                _ => {
                    meta.insert(key.to_string(), fields.get(1).copied().unwrap_or("").to_string());
                }
            }
            continue;
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| bad(ln, format!("bad number `{s}`")));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, format!("bad integer `{s}`")));
        let take = |at: &mut usize, n: usize| -> Result<Vec<f64>> {
            let out = fields
                .get(*at..*at + n)
                .ok_or_else(|| bad(ln, "row is shorter than its header"))?
                .iter()
                .map(|s| parse_f(s))
                .collect::<Result<Vec<_>>>()?;
            *at += n;
            Ok(out)
        };
        if in_windows {
            let w = window_w.as_ref().ok_or_else(|| bad(ln, "window row before its header"))?;
            let mut at = 3;
            if fields.len() < 3 {
                return Err(bad(ln, "row is shorter than its header"));
            }
            windows.push(WindowRow {
                system: parse_u(fields[0])?,
                n: parse_u(fields[1])?,
                t: parse_f(fields[2])?,
                omega: take(&mut at, w[0])?,
                v: take(&mut at, w[1])?,
                theta: take(&mut at, w[2])?,
            });
        } else {
            let w = node_w.as_ref().ok_or_else(|| bad(ln, "node row before its header"))?;
            let mut at = 2;
            if fields.len() < 2 {
                return Err(bad(ln, "row is shorter than its header"));
            }
            let system = parse_u(fields[0])?;
            let t = parse_f(fields[1])?;
            let phi = take(&mut at, w[0])?;
            let u0 = take(&mut at, w[1])?;
            let u = take(&mut at, w[2])?;
            let eps = take(&mut at, w[3])?;
            let label = fields.get(at).filter(|s| !s.is_empty()).map(|s| s.to_string());
            nodes.push(NodeRow {
                system,
                t,
                phi,
                u0,
                u,
                eps,
                label,
            });
        }
    }
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::validation(k, "missing from trace header"));
    let schema = get("schema")?;
    check_schema(schema)?;
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::validation(k, "not a number")) };
    let mut log = TraceLog::new(
        get("scenario_hash")?,
        get("seed")?.parse().map_err(|_| Error::validation("seed", "not an integer"))?,
        get("command")?,
        num("step")?,
        num("horizon")?,
    );
    log.nodes = nodes;
    log.windows = windows;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TraceLog {
        let mut log = TraceLog::new("abc", 7, "tactical", 1e-3, 0.3);
        for k in 0..4 {
            let t = 0.1 * k as f64;
            log.nodes.push(NodeRow {
                system: 0,
                t,
                phi: vec![(t + 0.3).exp(), -1.0 / 3.0],
                u0: vec![0.0],
                u: vec![std::f64::consts::PI * t],
                eps: vec![1e-300, -2.5e17],
                label: (k % 2 == 0).then(|| "low".to_string()),
            });
        }
        log.windows.push(WindowRow {
            system: 0,
            n: 1,
            t: 0.3,
            omega: vec![0.1 + 0.2],
            v: vec![],
            theta: vec![1.0, f64::MIN_POSITIVE],
        });
        log
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let log = sample();
        let text = log.render(TraceFormat::Jsonl);
        assert!(text.starts_with("{\"schema\":\"tactica-trace/1\""));
        assert_eq!(text.lines().count(), 1 + 4 + 1);
        assert_eq!(parse_trace(&text).unwrap(), log);
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let log = sample();
        let text = log.render(TraceFormat::Tsv);
        assert!(text.starts_with("#schema\ttactica-trace/1\n"));
        assert_eq!(parse_trace(&text).unwrap(), log);
    }

    #[test]
    fn file_round_trip_and_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_trace(&sample(), &path, TraceFormat::Jsonl).unwrap();
        assert_eq!(read_trace(&path).unwrap(), sample());
        let missing = dir.path().join("no/such/dir/t.tsv");
        match write_trace(&sample(), &missing, TraceFormat::Tsv).unwrap_err() {
            Error::Io { path, .. } => assert_eq!(path, missing),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.hash(), b.hash());
        b.header.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn foreign_schema_is_rejected() {
        let text = sample().render(TraceFormat::Jsonl).replace("tactica-trace/1", "x/2");
        assert!(parse_trace(&text).is_err());
    }
}
