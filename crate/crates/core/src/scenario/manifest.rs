//! Run manifests and deterministic replay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::compile::{compile, Overrides};
use super::doc::{parse_scenario, scenario_hash};
use crate::error::{Error, Result};
use crate::expr::GRAMMAR_VERSION;
use crate::runner::{execute, Command, RunOutput};
use crate::scenario::Scenario;

pub const MANIFEST_SCHEMA: &str = "tactica-manifest/1";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RNG: &str = "chacha8";

/// Everything needed to reproduce a run: the scenario (by hash), the
/// effective seed, step and horizon, and the hashes of what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub engine_version: String,
    pub grammar_version: u32,
    pub rng: String,
    pub step: f64,
    pub horizon: f64,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn for_run(command: Command, scenario: &Scenario, output: &RunOutput) -> Self {
        RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            command: command.name().to_string(),
            scenario_hash: scenario.hash.clone(),
            seed: scenario.settings.seed,
            engine_version: ENGINE_VERSION.to_string(),
            grammar_version: GRAMMAR_VERSION,
            rng: RNG.to_string(),
            step: scenario.settings.step,
            horizon: scenario.settings.horizon,
            outputs: output.hashes(),
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifests always serialize") + "\n"
    }
}

pub fn parse_manifest(text: &str) -> Result<RunManifest> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let m: RunManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Validation {
            path: if path == "." { String::new() } else { path },
            pos: Some(crate::error::SourcePos {
                line: inner.line(),
                column: inner.column(),
            }),
            message: inner.to_string(),
        }
    })?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Error::validation(
            "schema",
            format!("unsupported manifest schema `{}`, expected `{MANIFEST_SCHEMA}`", m.schema),
        ));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub command: String,
    pub matches: Vec<String>,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-run the manifest's command on `scenario_text` and compare output
/// hashes. A scenario whose hash differs from the manifest's is refused.
pub fn replay_run(manifest: &RunManifest, scenario_text: &str) -> Result<ReplayReport> {
    let doc = parse_scenario(scenario_text)?;
    let hash = scenario_hash(&doc);
    if hash != manifest.scenario_hash {
        return Err(Error::Replay(format!(
            "scenario hash {hash} does not match the manifest's {}",
            manifest.scenario_hash
        )));
    }
    let command = Command::from_name(&manifest.command)
        .ok_or_else(|| Error::validation("command", format!("unknown command `{}`", manifest.command)))?;
    let overrides = Overrides {
        seed: Some(manifest.seed),
        step: Some(manifest.step),
        horizon: Some(manifest.horizon),
    };
    let scenario = compile(&doc, scenario_text, &overrides)?;
    let output = execute(command, &scenario)?;
    let actual = output.hashes();
    let mut report = ReplayReport {
        command: manifest.command.clone(),
        matches: Vec::new(),
        mismatches: Vec::new(),
    };
    let mut check = |name: &str, expected: &str, got: &str| {
        if expected == got {
            report.matches.push(name.to_string());
        } else {
            report.mismatches.push(Mismatch {
                name: name.to_string(),
                expected: expected.to_string(),
                actual: got.to_string(),
            });
        }
    };
    check("engine_version", &manifest.engine_version, ENGINE_VERSION);
    check("grammar_version", &manifest.grammar_version.to_string(), &GRAMMAR_VERSION.to_string());
    check("rng", &manifest.rng, RNG);
    let names: std::collections::BTreeSet<&String> = manifest.outputs.keys().chain(actual.keys()).collect();
    for name in names {
        let missing = "<missing>".to_string();
        check(
            &format!("outputs.{name}"),
            manifest.outputs.get(name).unwrap_or(&missing),
            actual.get(name).unwrap_or(&missing),
        );
    }
    Ok(report)
}
