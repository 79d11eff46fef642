//! Scripted model answers for the AHDB fixture corpus. The shipped replay
//! cache is generated from this responder by the `record_fixture` example.

#![allow(dead_code)]

use finder_core::llm_gateway::{RenderedPrompt, TemplateId};
use serde_json::json;

pub const ADULT_BEHAVIOR: &str = "Emerge and feed on foliage, rest in moist, sheltered places, migrate into crops to mate and feed on foliage, causing characteristic shot-holing of the leaves, lay eggs and feed on leaves until temperatures drop";

/// Attribute for a descriptor phrase, following the sample conversion table.
pub fn attribute_of(phrase: &str) -> &'static str {
    match phrase {
        "metallic blue-black" | "light brown" | "white" | "small dark spots" => "colour",
        "3–5 mm long" | "6 mm in length" => "size",
        "jump when disturbed" => "behavior",
        "long antennae" => "antennae",
        "large hind legs" => "legs",
        _ => "body part",
    }
}

fn listed(p: &RenderedPrompt) -> Vec<String> {
    p.user
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .map(str::to_string)
        .collect()
}

pub fn respond(p: &RenderedPrompt) -> String {
    let adults = p.user.contains("Adults are");
    let larvae = p.user.contains("Larvae are");
    match p.template_id {
        TemplateId::RelevanceJudge => if adults || larvae { "YES" } else { "NO" }.into(),
        TemplateId::Stage1Descriptors => {
            let mut out = Vec::new();
            if adults {
                out.extend([
                    "3–5 mm long",
                    "metallic blue-black",
                    "light brown",
                    "long antennae",
                    "large hind legs",
                    "jump when disturbed",
                ]);
            }
            if larvae {
                out.extend([
                    "white",
                    "small dark spots",
                    "black head and tail",
                    "three pairs of dark legs",
                    "6 mm in length",
                ]);
            }
            serde_json::to_string(&out).unwrap()
        }
        TemplateId::Stage2Attributes => {
            let map: serde_json::Map<String, serde_json::Value> =
                listed(p).into_iter().map(|d| (d.clone(), json!(attribute_of(&d)))).collect();
            serde_json::Value::Object(map).to_string()
        }
        TemplateId::AttrDedup => {
            let groups: Vec<Vec<String>> = listed(p)
                .into_iter()
                .map(|l| vec![l.rsplit_once(" (").map_or(l.as_str(), |(name, _)| name).to_string()])
                .collect();
            serde_json::to_string(&groups).unwrap()
        }
        TemplateId::Stage3Entities => {
            let mut out = Vec::new();
            if adults {
                out.push("Adults");
            }
            if larvae {
                out.push("Larvae");
            }
            serde_json::to_string(&out).unwrap()
        }
        TemplateId::Stage4Bind => {
            if p.user.contains("Entity: Adults") {
                json!({
                    "Colour": "Metallic blue-black, light brown",
                    "Size": "3–5 mm",
                    "Behavior": ADULT_BEHAVIOR,
                    "Antennae": "Long",
                    "Legs": "Large hind legs",
                })
                .to_string()
            } else {
                json!({"Colour": "White", "Size": "6 mm in length when mature"}).to_string()
            }
        }
    }
}
