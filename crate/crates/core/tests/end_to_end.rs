use std::path::Path;
use std::sync::Arc;

use serde_json::json;

use finder_core::corpus::{ingest_document, ChunkPolicy, Corpus};
use finder_core::ebr_filter::{LlmJudgeOracle, ScriptedOracle};
use finder_core::evaluation::{evaluate, parse_gold, parse_predictions, predictions_json, EvalStage};
use finder_core::llm_gateway::{
    CompletionParams, Gateway, PromptSet, RecordingBackend, RenderedPrompt, ReplayBackend, ScriptedBackend, TemplateId,
};
use finder_core::pipeline::{run_pipeline, write_outputs, ExtractionResult, PipelineConfig, RunInputs, RUN_MANIFEST};
use finder_core::vector_index::{load_index, save_index, Embedder, HashedBagOfWords, IndexConfig, VectorIndex};

const BEETLE_HTML: &str = "<html><head><title>Cabbage stem flea beetle</title></head><body>\
<h2>Identification</h2>\
<p>Adults are 3&ndash;5 mm long, metallic blue-black or light brown. They have long antennae, large hind legs and jump when disturbed.</p>\
<p>Larvae are white, with very small dark spots on the back, a black head and tail and three pairs of dark legs.</p>\
</body></html>";

const WEEVIL_MD: &str = "# Seed weevil\n\n## Identification\n\nAdults are grey and 3 mm long, with a long curved snout.\n";

const SOWING: &str = "Sow winter oilseed rape from mid-August into a firm, moist seedbed at a suitable seed rate.";

fn corpus() -> Corpus {
    let docs = [("beetle.html", BEETLE_HTML), ("weevil.md", WEEVIL_MD), ("sowing.txt", SOWING)]
        .into_iter()
        .map(|(p, t)| ingest_document(t.as_bytes(), p).unwrap())
        .collect();
    Corpus::build(docs, &ChunkPolicy::default()).unwrap()
}

fn index_of(corpus: &Corpus) -> VectorIndex {
    let mut index = VectorIndex::new(IndexConfig::default(), HashedBagOfWords::default().id());
    let chunks: Vec<_> = corpus.all_chunks().cloned().collect();
    index.index_chunks(&chunks, &HashedBagOfWords::default()).unwrap();
    index
}

fn listed(p: &RenderedPrompt) -> Vec<&str> {
    p.user.lines().filter_map(|l| l.strip_prefix("- ")).collect()
}

fn respond(p: &RenderedPrompt) -> String {
    let beetle = p.user.contains("metallic blue-black");
    let weevil = p.user.contains("curved snout");
    match p.template_id {
        TemplateId::RelevanceJudge => if beetle || weevil { "YES" } else { "NO" }.into(),
        TemplateId::Stage1Descriptors => {
            let mut out = Vec::new();
            if beetle {
                out.extend(["metallic blue-black", "3–5 mm long", "white"]);
            }
            if weevil {
                out.extend(["grey", "3 mm long", "long curved snout"]);
            }
            json!(out).to_string()
        }
        TemplateId::Stage2Attributes => {
            let map: serde_json::Map<_, _> = listed(p)
                .into_iter()
                .map(|d| {
                    let attr = match d {
                        "metallic blue-black" | "white" | "grey" => "colour",
                        "long curved snout" => "snout",
                        _ => "length",
                    };
                    (d.to_string(), json!(attr))
                })
                .collect();
            serde_json::Value::Object(map).to_string()
        }
        TemplateId::AttrDedup => {
            let names: Vec<Vec<&str>> = listed(p).iter().map(|l| vec![l.rsplit_once(" (").unwrap().0]).collect();
            json!(names).to_string()
        }
        TemplateId::Stage3Entities => {
            let mut out = Vec::new();
            if p.user.contains("Adults are") {
                out.push("Adults");
            }
            if p.user.contains("Larvae are") {
                out.push("Larvae");
            }
            json!(out).to_string()
        }
        TemplateId::Stage4Bind => {
            if p.user.contains("curved snout") {
                json!({"colour": "grey", "length": "3 mm", "snout": "long, curved"}).to_string()
            } else if p.user.contains("Entity: Adults") {
                json!({"Colour": "metallic blue-black", "Length": "3–5 mm"}).to_string()
            } else {
                json!({"colour": "white"}).to_string()
            }
        }
    }
}

fn run(gateway: &Gateway, corpus: &Corpus, index: &VectorIndex) -> ExtractionResult {
    let mut oracle = LlmJudgeOracle::new(gateway, PipelineConfig::default().intent());
    run_pipeline(RunInputs {
        corpus,
        index,
        embedder: &HashedBagOfWords::default(),
        gateway,
        oracle: &mut oracle,
        config: &PipelineConfig::default(),
        config_digest: "digest",
    })
    .unwrap()
}

#[test]
fn html_and_markdown_documents_flow_through_every_stage() {
    let corpus = corpus();
    let index = index_of(&corpus);
    let result = run(&Gateway::new(ScriptedBackend::new(respond)), &corpus, &index);

    assert_eq!(result.metadata.counters.chunks_accepted, 2);
    let names: Vec<(&str, &str)> = result
        .records
        .iter()
        .map(|r| (r.doc_id.split('-').next().unwrap(), r.entity.as_str()))
        .collect();
    assert_eq!(names, [("beetle", "Adults"), ("beetle", "Larvae"), ("weevil", "Adults")]);
    let adults = &result.records[0];
    assert_eq!(adults.attributes.get("colour").map(String::as_str), Some("metallic blue-black"));
    assert_eq!(adults.attributes.get("length").map(String::as_str), Some("3–5 mm"));

    let canonical: Vec<&str> = result.canonical_attributes.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(canonical, ["colour", "length", "snout"]);
}

#[test]
fn saved_index_gives_the_same_ranking() {
    let corpus = corpus();
    let index = index_of(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.json");
    save_index(&index, &path).unwrap();
    let loaded = load_index(&path).unwrap();
    let e = HashedBagOfWords::default();
    assert_eq!(
        index.knn_query("appearance, identification", 3, &e).unwrap(),
        loaded.knn_query("appearance, identification", 3, &e).unwrap()
    );
}

#[test]
fn recorded_session_replays_to_identical_outputs() {
    let corpus = corpus();
    let index = index_of(&corpus);
    let recorder = Arc::new(RecordingBackend::new(ScriptedBackend::new(respond)));
    let live = Gateway::with_parts(Box::new(Arc::clone(&recorder)), PromptSet::default(), CompletionParams::default(), 3);
    let first = run(&live, &corpus, &index);

    let replay = Gateway::new(ReplayBackend::new(recorder.cache().clone()));
    let second = run(&replay, &corpus, &index);
    assert_eq!(first.records, second.records);
    assert_eq!(second.metadata.backend, "replay");

    let dir = tempfile::tempdir().unwrap();
    let a = write_outputs(&first, &corpus, &dir.path().join("a")).unwrap();
    let b = write_outputs(&second, &corpus, &dir.path().join("b")).unwrap();
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        if x.file_name().unwrap() == RUN_MANIFEST {
            continue;
        }
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn exported_predictions_score_against_gold() {
    let corpus = corpus();
    let index = index_of(&corpus);
    let result = run(&Gateway::new(ScriptedBackend::new(respond)), &corpus, &index);
    let beetle = &result.records[0].doc_id;

    let predictions = parse_predictions(Path::new("p.json"), &predictions_json(&result).to_string()).unwrap();
    let gold = json!([
        {"stage": "stage3", "items": [
            {"doc_id": beetle, "correct": "Adults"},
            {"doc_id": beetle, "correct": "Larvae"}
        ]},
        {"stage": "stage4", "items": [
            {"doc_id": beetle, "entity": "Adults", "attribute": "colour", "correct": "metallic blue-black"},
            {"doc_id": beetle, "entity": "Adults", "attribute": "length", "correct": "3–5 mm long", "acceptable": ["3–5 mm"]}
        ]}
    ]);
    let gold = parse_gold(Path::new("g.json"), &gold.to_string()).unwrap();
    let report = evaluate(&gold, &predictions).unwrap();

    let stage3 = report.stages.iter().find(|s| s.stage == EvalStage::Stage3).unwrap();
    assert_eq!((stage3.counts.tp, stage3.counts.fp), (2, 1));
    let stage4 = report.stages.iter().find(|s| s.stage == EvalStage::Stage4).unwrap();
    assert_eq!((stage4.counts.tp, stage4.counts.ap), (1, 1));
}

#[test]
fn operator_rejecting_everything_yields_an_empty_result() {
    let corpus = corpus();
    let index = index_of(&corpus);
    let gateway = Gateway::new(ScriptedBackend::new(respond));
    let mut oracle = ScriptedOracle::new(|_| false);
    let result = run_pipeline(RunInputs {
        corpus: &corpus,
        index: &index,
        embedder: &HashedBagOfWords::default(),
        gateway: &gateway,
        oracle: &mut oracle,
        config: &PipelineConfig::default(),
        config_digest: "digest",
    })
    .unwrap();
    assert!(result.records.is_empty());
    assert_eq!(result.metadata.counters.llm_calls, 0);
}
