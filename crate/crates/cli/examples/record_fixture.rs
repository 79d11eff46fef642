//! Regenerates `fixtures/ahdb/replay.jsonl` from the scripted responder.
//!
//! cargo run -p finder-cli --example record_fixture

use std::path::Path;

use finder_cli::commands::{extract, ExtractOptions, Mode};
use finder_cli::config::load_config;
use finder_core::llm_gateway::ScriptedBackend;

#[path = "../tests/support/ahdb.rs"]
mod ahdb;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ahdb");
    let scratch = tempfile::tempdir()?;
    let mut loaded = load_config(Some(&fixture.join("config.json")))?;
    loaded.config.workspace_dir = scratch.path().join("workspace");
    loaded.config.output_dir = scratch.path().join("output");
    let cache = loaded.config.gateway.replay_cache.clone();
    if cache.exists() {
        std::fs::remove_file(&cache)?;
    }
    let summary = extract(
        &loaded,
        ExtractOptions {
            mode: Mode::Record,
            backend: Some(Box::new(ScriptedBackend::new(ahdb::respond))),
            ..Default::default()
        },
    )?;
    println!("recorded {} calls into {}", summary.llm_calls, cache.display());
    Ok(())
}
