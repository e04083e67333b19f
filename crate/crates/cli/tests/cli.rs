use std::path::{Path, PathBuf};

use tactica::scenario::{parse_manifest, read_trace};
use tactica_cli::{manifest_path, report_path, run, EXIT_NUMERIC, EXIT_OK, EXIT_REPLAY, EXIT_USAGE, EXIT_VALIDATION};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn call(args: &[&str], env_seed: Option<&str>) -> Outcome {
    let argv = std::iter::once("tactica").chain(args.iter().copied());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, env_seed, &mut out, &mut err);
    Outcome {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn tactical_on_lin2_writes_trace_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.log");
    let lin2 = scenario("lin2.toml");
    let r = call(&["tactical", "--scenario", lin2.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(r.out.lines().count(), 4, "one line per window:\n{}", r.out);
    assert!(r.out.starts_with("lin2 n=1 t=0.250000"));
    let m = parse_manifest(&std::fs::read_to_string(manifest_path(&out)).unwrap()).unwrap();
    assert_eq!(m.command, "tactical");
    assert_eq!(m.seed, 7);
    let log = read_trace(&out).unwrap();
    assert_eq!(log.hash(), m.outputs["trace"]);
    assert_eq!(log.windows.len(), 4);
    assert!(report_path(&out).exists());
}

#[test]
fn tsv_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.tsv"));
    let lin2 = scenario("lin2.toml");
    for (out, format) in [(&a, "jsonl"), (&b, "tsv")] {
        let r = call(
            &["simulate", "--scenario", lin2.to_str().unwrap(), "--out", out.to_str().unwrap(), "--format", format],
            None,
        );
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
    }
    assert!(std::fs::read_to_string(&b).unwrap().starts_with('#'));
    assert_eq!(read_trace(&a).unwrap(), read_trace(&b).unwrap());
}

#[test]
fn unknown_subcommand_prints_usage() {
    let r = call(&["teleport"], None);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("Usage"), "{}", r.err);
    assert!(r.out.is_empty());
}

#[test]
fn mistyped_override_is_a_usage_error() {
    let lin2 = scenario("lin2.toml");
    let r = call(&["simulate", "--scenario", lin2.to_str().unwrap(), "--seed", "many"], None);
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn help_goes_to_stdout() {
    let r = call(&["--help"], None);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.out.contains("replay"));
}

#[test]
fn undeclared_variable_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("lin2.toml")).unwrap().replace("a * phi1 + u1 + u2", "a * phi1 + u1 + u3");
    let p = write(dir.path(), "bad.toml", &text);
    let r = call(&["simulate", "--scenario", p.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_VALIDATION);
    assert!(r.err.contains("state.dynamics[0]"), "{}", r.err);
    assert!(r.err.contains("u3"), "{}", r.err);
    assert!(r.out.is_empty());
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = "schema = \"tactica-scenario/1\"\n[run]\nhorizon = 1.0\n[state]\nphi0 = [1.0]\ndynamics = [\"sqrt(phi1 - 2)\"]\n";
    let p = write(dir.path(), "nan.toml", text);
    let r = call(&["simulate", "--scenario", p.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_NUMERIC, "{}", r.err);
}

#[test]
fn missing_scenario_file_exits_1() {
    let r = call(&["simulate", "--scenario", "/nonexistent/x.toml"], None);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("/nonexistent/x.toml"), "{}", r.err);
}

#[test]
fn environment_seed_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let roulette = scenario("roulette.toml");
    let seeded = |args: &[&str], env: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut all = vec!["simulate", "--scenario", roulette.to_str().unwrap(), "--out", out.to_str().unwrap()];
        all.extend_from_slice(args);
        assert_eq!(call(&all, env).code, EXIT_OK);
        parse_manifest(&std::fs::read_to_string(manifest_path(&out)).unwrap()).unwrap()
    };
    let flag = seeded(&["--seed", "5"], None, "flag");
    let env = seeded(&[], Some("5"), "env");
    let both = seeded(&["--seed", "5"], Some("9"), "both");
    let default = seeded(&[], None, "default");
    assert_eq!(flag.outputs, env.outputs);
    assert_eq!(flag.outputs, both.outputs);
    assert_eq!(default.seed, 3);
    assert_ne!(default.outputs, flag.outputs);

    let r = call(&["simulate", "--scenario", roulette.to_str().unwrap()], Some("five"));
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("TACTICA_SEED"));
}

#[test]
fn replay_accepts_the_golden_manifest_and_rejects_tampering() {
    let golden = scenario("golden/lin2.tactical.manifest.json");
    let lin2 = scenario("lin2.toml");
    let r = call(&["replay", "--manifest", golden.to_str().unwrap(), "--scenario", lin2.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_OK, "{}{}", r.out, r.err);
    assert!(r.out.contains("match outputs.trace"));

    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(&golden).unwrap().replace("\"seed\": 7", "\"seed\": 8");
    let tampered = write(dir.path(), "m.json", &text);
    let r = call(&["replay", "--manifest", tampered.to_str().unwrap(), "--scenario", lin2.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_REPLAY);
    assert!(r.out.contains("MISMATCH outputs.trace"));

    let other = scenario("cells3.toml");
    let r = call(&["replay", "--manifest", golden.to_str().unwrap(), "--scenario", other.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_REPLAY);
    assert!(r.err.contains("scenario hash"), "{}", r.err);

    let text = std::fs::read_to_string(&golden).unwrap().replace("  \"rng\": \"chacha8\",\n", "");
    let broken = write(dir.path(), "broken.json", &text);
    let r = call(&["replay", "--manifest", broken.to_str().unwrap(), "--scenario", lin2.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_VALIDATION);
    assert!(r.err.contains("rng"), "{}", r.err);
}

#[test]
fn wrong_layout_for_subcommand_is_a_validation_error() {
    let lin2 = scenario("lin2.toml");
    let r = call(&["couple", "--scenario", lin2.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_VALIDATION);
    let r = call(&["roulette", "--scenario", lin2.to_str().unwrap()], None);
    assert_eq!(r.code, EXIT_VALIDATION);
}

#[test]
fn binary_reports_exit_codes_and_reads_the_environment() {
    let bin = env!("CARGO_BIN_EXE_tactica");
    let lin2 = scenario("lin2.toml");
    let ok = std::process::Command::new(bin)
        .args(["tactical", "--scenario", lin2.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    assert_eq!(String::from_utf8_lossy(&ok.stdout).lines().count(), 4);
    let bad = std::process::Command::new(bin)
        .args(["simulate", "--scenario", lin2.to_str().unwrap()])
        .env("TACTICA_SEED", "-1")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("TACTICA_SEED"));
}
