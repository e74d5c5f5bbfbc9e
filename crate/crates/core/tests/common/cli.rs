//! Driving the `cotscale` binary, including the end-to-end golden run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cotscale::protocol::mock::{Script, ScriptEntry};
use cotscale::protocol::BackendRole;
use cotscale::trajectory::read_jsonl;
use serde_json::{json, Value};

use super::*;

pub fn cotscale(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotscale"))
        .current_dir(dir)
        .env_remove("COTSCALE_LOG")
        .args(args)
        .output()
        .unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

pub fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

pub fn scripted_config(dir: &Path, script: &Script, extra: Value) -> PathBuf {
    write_json(&dir.join("script.json"), &serde_json::to_value(script).unwrap());
    let mock = json!({"mock": {"kind": "scripted", "script": "script.json"}});
    let mut config = json!({
        "backends": {"reasoner": mock, "generator": mock, "editor": mock},
        "store_root": "blobs",
    });
    merge(&mut config, extra);
    let path = dir.join("config.json");
    write_json(&path, &config);
    path
}

/// Deep merge, except that backend specs replace each other whole.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("mock") && !o.contains_key("url") => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

pub const E2E_PROMPTS: &str = "a red kite above a sandy beach
two brown dogs playing in fresh snow
a green desk lamp beside a stack of books
a photo of three red apples on a wooden table
a small white boat on a calm lake
";

fn on(prompt: &str, images: usize, text: &str) -> ScriptEntry {
    ScriptEntry::reply(reply(text, true))
        .when(json!({
            "suppress_termination": false,
            "rendered_prompt": {"$contains": prompt},
            "image_refs": {"$len": images},
        }))
        .sticky()
}

/// Every entry is sticky and keyed on request content, so replies do not
/// depend on call order.
fn e2e_script() -> Script {
    Script::new()
        .push(
            BackendRole::Reasoner,
            on("red kite", 1, &edit_text("make the kite larger")),
        )
        .push(
            BackendRole::Reasoner,
            on("red kite", 2, &edit_text("add seagulls in the sky")),
        )
        .push(
            BackendRole::Reasoner,
            on("desk lamp", 1, &edit_text("add a purple elephant on the desk")),
        )
        .push(
            BackendRole::Reasoner,
            on("desk lamp", 2, &edit_text("warm up the lamp light")),
        )
        .push(
            BackendRole::Reasoner,
            on("three red apples", 1, &edit_text("polish the apples")),
        )
        .push(
            BackendRole::Reasoner,
            ScriptEntry::reply(reply(&edit_text("add ripples around the boat"), true))
                .when(json!({"suppress_termination": false, "rendered_prompt": {"$contains": "white boat"}}))
                .sticky(),
        )
        .push(BackendRole::Reasoner, decide(&satisfied_text()).sticky())
        .push(BackendRole::Reasoner, forced_reply())
        .push(
            BackendRole::Judge,
            ScriptEntry::reply(json!({"relevant": false, "rationale": "unrelated object"}))
                .when(json!({"edit_instruction": {"$contains": "elephant"}}))
                .sticky(),
        )
        .push(
            BackendRole::Judge,
            ScriptEntry::reply(json!({"relevant": true, "rationale": "on topic"})).sticky(),
        )
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/e2e")
}

/// Runs synthesize, filter and sweep through the binary; returns the three
/// artifacts compared against the goldens.
pub fn run_e2e(dir: &Path) -> Vec<(&'static str, String)> {
    let stochastic = json!({"mock": {"kind": "stochastic", "seed": 7}});
    let config = scripted_config(
        dir,
        &e2e_script(),
        json!({
            "backends": {
                "judge": {"mock": {"kind": "scripted", "script": "script.json"}},
                "generator": stochastic,
                "editor": stochastic,
                "scorer": stochastic,
                "distance_metric": stochastic,
            },
            "seed": 42,
            "filter": {"quality_source": "scorer"},
        }),
    );
    let config = config.to_str().unwrap();
    std::fs::write(dir.join("prompts.txt"), E2E_PROMPTS).unwrap();
    std::fs::write(
        dir.join("benchmarks.txt"),
        "a photo of three red apples on a wooden table\n",
    )
    .unwrap();

    let out = ok(cotscale(
        dir,
        &[
            "--config",
            config,
            "synthesize",
            "--prompt-file",
            "prompts.txt",
            "--out",
            "syn",
            "--max-rounds",
            "4",
        ],
    ));
    assert!(out.starts_with("trajectories: 5\ncomputed: 5\nreused: 0\n"), "{out}");
    ok(cotscale(
        dir,
        &[
            "--config",
            config,
            "filter",
            "--in",
            "syn/trajectories.jsonl",
            "--benchmarks",
            "benchmarks.txt",
            "--out",
            "cur",
        ],
    ));
    let kept = read_jsonl(&dir.join("cur/trajectories.jsonl")).unwrap();
    let tasks: String = kept
        .iter()
        .map(|t| format!("{}\n", json!({"id": t.id, "prompt": t.user_prompt})))
        .collect();
    std::fs::write(dir.join("tasks.jsonl"), tasks).unwrap();
    let out = ok(cotscale(
        dir,
        &[
            "--config",
            config,
            "sweep",
            "--tasks",
            "tasks.jsonl",
            "--budgets",
            "1..3",
            "--modes",
            "seq,par",
            "--out",
            "sweep",
            "--fixed-clock-ms",
            "0",
        ],
    ));
    assert!(out.contains("failed: 0\n"), "{out}");

    let read = |p: &str| std::fs::read_to_string(dir.join(p)).unwrap();
    vec![
        ("trajectories.jsonl", read("cur/trajectories.jsonl")),
        ("report.json", read("cur/report.json")),
        ("curves.csv", read("sweep/curves.csv")),
    ]
}

/// Compares artifacts with the committed goldens, rewriting them first when
/// `UPDATE_GOLDENS` is set.
pub fn check_goldens(artifacts: &[(&str, String)]) -> Result<(), String> {
    let golden = golden_dir();
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        std::fs::create_dir_all(&golden).map_err(|e| e.to_string())?;
        for (name, body) in artifacts {
            std::fs::write(golden.join(name), body).map_err(|e| e.to_string())?;
        }
    }
    for (name, body) in artifacts {
        let expected = std::fs::read_to_string(golden.join(name))
            .map_err(|e| format!("{name}: {e} (run with UPDATE_GOLDENS=1 to create)"))?;
        if *body != expected {
            return Err(format!("{name} differs from the golden"));
        }
    }
    Ok(())
}
