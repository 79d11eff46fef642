use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use finder_cli::commands::{self, ExtractOptions, Mode, OracleIo, FAILURE_FILE};
use finder_cli::config::{load_config, OracleChoice};
use finder_core::llm_gateway::{ScriptedBackend, TemplateId};
use serde_json::Value;

#[path = "support/ahdb.rs"]
mod ahdb;

const BEETLE: &str = "cabbage_stem_flea_beetle-a9d61250";

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ahdb")
}

/// Copies the fixture (config, corpus, cache) into a fresh directory.
fn fixture_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture_dir();
    std::fs::create_dir(dir.path().join("corpus")).unwrap();
    for name in ["config.json", "replay.jsonl", "gold.json"] {
        std::fs::copy(src.join(name), dir.path().join(name)).unwrap();
    }
    for entry in std::fs::read_dir(src.join("corpus")).unwrap() {
        let path = entry.unwrap().path();
        std::fs::copy(&path, dir.path().join("corpus").join(path.file_name().unwrap())).unwrap();
    }
    dir
}

fn finder(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finder"))
        .current_dir(dir)
        .args(["--config", "config.json"])
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn ingest_index_extract_eval_from_the_command_line() {
    let dir = fixture_copy();
    let d = dir.path();

    let out = finder(d, &["ingest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 documents (2 added"));
    let corpus_bytes = std::fs::read(d.join("workspace/corpus.json")).unwrap();

    let out = finder(d, &["ingest"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 unchanged"));
    assert_eq!(std::fs::read(d.join("workspace/corpus.json")).unwrap(), corpus_bytes);

    assert!(finder(d, &["index"]).status.success());
    assert!(d.join("workspace/index.json").exists());

    let out = finder(d, &["extract"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = read_json(&d.join(format!("output/{BEETLE}.json")));
    assert_eq!(doc["entities"][0]["name"], "Adults");
    assert_eq!(doc["entities"][0]["attributes"]["antennae"], "Long");
    assert_eq!(doc["entities"][1]["name"], "Larvae");
    let run = read_json(&d.join("output/run.json"));
    assert_eq!(run["backend"], "replay");
    assert_eq!(run["counters"]["filter_probes"], 2);

    let out = finder(d, &["eval", "--predictions", "output/predictions.json", "--gold", "gold.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.lines().next().unwrap().contains("Stage 2"));
    assert!(table.contains("Precision AC."));
    let report = read_json(&d.join("output/eval_report.json"));
    assert_eq!(report["stages"][1]["counts"]["tp"], 2);
}

#[test]
fn extract_ingests_and_indexes_on_demand() {
    let dir = fixture_copy();
    let out = finder(dir.path(), &["--output-dir", "elsewhere", "replay"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join(format!("elsewhere/{BEETLE}.json")).exists());
    assert!(dir.path().join("workspace/index.json").exists());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = fixture_copy();
    let d = dir.path();

    std::fs::write(d.join("config.json"), r#"{"pipeline": {"top_k": 0}}"#).unwrap();
    assert_eq!(finder(d, &["ingest"]).status.code(), Some(2));

    std::fs::write(d.join("config.json"), r#"{"corpus_paths": ["empty"]}"#).unwrap();
    std::fs::create_dir(d.join("empty")).unwrap();
    std::fs::write(d.join("empty/notes.bin"), [0u8, 1, 2]).unwrap();
    assert_eq!(finder(d, &["ingest"]).status.code(), Some(1));

    std::fs::write(
        d.join("config.json"),
        r#"{"gateway": {"backend": "remote", "endpoint": "http://127.0.0.1:9", "model": "m", "api_key_env": "FINDER_TEST_UNSET_KEY"}}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_finder"))
        .current_dir(d)
        .args(["--config", "config.json", "extract"])
        .env_remove("FINDER_TEST_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = finder(d, &["eval", "--predictions", "missing.json", "--gold", "gold.json"]);
    assert_eq!(out.status.code(), Some(1));
    let out = finder(d, &["eval", "--predictions", "gold.json", "--gold", "config.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_cache_entry_is_a_gateway_failure_with_report() {
    let dir = fixture_copy();
    let d = dir.path();
    let text = std::fs::read_to_string(d.join("replay.jsonl")).unwrap();
    let kept: String = text.lines().filter(|l| !l.contains("stage4_bind")).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("replay.jsonl"), kept).unwrap();

    let out = finder(d, &["extract"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let failure = read_json(&d.join("output").join(FAILURE_FILE));
    assert_eq!(failure["stage"], "stage4");
    assert_eq!(failure["exit_code"], 3);
    assert_eq!(failure["metadata"]["counters"]["entities"], 2);
}

#[test]
fn unparseable_judge_answer_exits_with_parse_code() {
    let dir = fixture_copy();
    let loaded = load_config(Some(&dir.path().join("config.json"))).unwrap();
    let backend = ScriptedBackend::new(|p| match p.template_id {
        TemplateId::RelevanceJudge => "It depends on the reader.".into(),
        _ => ahdb::respond(p),
    });
    let err = commands::extract(
        &loaded,
        ExtractOptions {
            backend: Some(Box::new(backend)),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let failure = read_json(&dir.path().join("output").join(FAILURE_FILE));
    assert_eq!(failure["stage"], "filter");
}

#[test]
fn interactive_oracle_reads_operator_answers() {
    let dir = fixture_copy();
    let mut loaded = load_config(Some(&dir.path().join("config.json"))).unwrap();
    loaded.config.oracle = OracleChoice::InteractivePrompt;
    let transcript = tempfile::NamedTempFile::new().unwrap();
    let summary = commands::extract(
        &loaded,
        ExtractOptions {
            mode: Mode::Configured,
            backend: Some(Box::new(ScriptedBackend::new(ahdb::respond))),
            oracle_io: OracleIo::Custom(
                Box::new(std::io::Cursor::new(b"maybe\nn\ny\n".to_vec())),
                Box::new(transcript.reopen().unwrap()),
            ),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(summary.entities, 2);
    let shown = std::fs::read_to_string(transcript.path()).unwrap();
    assert_eq!(shown.matches("Relevant? [y/n]").count(), 3);
}

#[test]
fn record_mode_saves_every_completion() {
    let dir = fixture_copy();
    let loaded = load_config(Some(&dir.path().join("config.json"))).unwrap();
    let cache = dir.path().join("fresh.jsonl");
    let summary = commands::extract(
        &loaded,
        ExtractOptions {
            mode: Mode::Record,
            cache_path: Some(cache.clone()),
            backend: Some(Box::new(ScriptedBackend::new(ahdb::respond))),
            ..Default::default()
        },
    )
    .unwrap();
    let recorded = std::fs::read_to_string(&cache).unwrap();
    assert_eq!(recorded.lines().count(), summary.llm_calls);
}

#[test]
fn shipped_replay_cache_matches_the_responder() {
    let dir = fixture_copy();
    let loaded = load_config(Some(&dir.path().join("config.json"))).unwrap();
    let cache = dir.path().join("regenerated.jsonl");
    commands::extract(
        &loaded,
        ExtractOptions {
            mode: Mode::Record,
            cache_path: Some(cache.clone()),
            backend: Some(Box::new(ScriptedBackend::new(ahdb::respond))),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        std::fs::read_to_string(&cache).unwrap(),
        std::fs::read_to_string(fixture_dir().join("replay.jsonl")).unwrap(),
        "run `cargo run -p finder-cli --example record_fixture` to refresh the cache"
    );
}
