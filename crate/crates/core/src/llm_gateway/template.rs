use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;

/// Version tag of the bundled prompt assets. Bumped whenever their text
/// changes, since recorded replay caches are keyed on the rendered prompts.
pub const PROMPT_VERSION: &str = "v1";

/// Prepended to every template's system text.
pub const SYSTEM_PREAMBLE: &str = "Answer only in the requested format.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Stage1Descriptors,
    Stage2Attributes,
    AttrDedup,
    Stage3Entities,
    Stage4Bind,
    RelevanceJudge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::Stage1Descriptors,
        TemplateId::Stage2Attributes,
        TemplateId::AttrDedup,
        TemplateId::Stage3Entities,
        TemplateId::Stage4Bind,
        TemplateId::RelevanceJudge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Stage1Descriptors => "stage1_descriptors",
            TemplateId::Stage2Attributes => "stage2_attributes",
            TemplateId::AttrDedup => "attr_dedup",
            TemplateId::Stage3Entities => "stage3_entities",
            TemplateId::Stage4Bind => "stage4_bind",
            TemplateId::RelevanceJudge => "relevance_judge",
        }
    }

    fn asset(self) -> &'static str {
        match self {
            TemplateId::Stage1Descriptors => include_str!("../../prompts/stage1_descriptors.txt"),
            TemplateId::Stage2Attributes => include_str!("../../prompts/stage2_attributes.txt"),
            TemplateId::AttrDedup => include_str!("../../prompts/attr_dedup.txt"),
            TemplateId::Stage3Entities => include_str!("../../prompts/stage3_entities.txt"),
            TemplateId::Stage4Bind => include_str!("../../prompts/stage4_bind.txt"),
            TemplateId::RelevanceJudge => include_str!("../../prompts/relevance_judge.txt"),
        }
    }

    /// Appended to the user message when an answer has to be re-requested.
    pub fn format_reminder(self) -> &'static str {
        match self {
            TemplateId::Stage1Descriptors | TemplateId::Stage3Entities => {
                "Reminder: reply with a JSON array of strings only, for example [\"a\", \"b\"], or [] if there are none."
            }
            TemplateId::Stage2Attributes | TemplateId::Stage4Bind => "Reminder: reply with a single JSON object only.",
            TemplateId::AttrDedup => "Reminder: reply with a JSON array of arrays of names only.",
            TemplateId::RelevanceJudge => "Reminder: reply with exactly one word, YES or NO.",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| GatewayError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub system_text: String,
    pub user_text: String,
}

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

impl PromptTemplate {
    /// Parses the `[system]` / `[user]` asset layout.
    pub fn parse(template_id: TemplateId, asset: &str) -> Self {
        let (system, user) = match asset.split_once("[user]\n") {
            Some((head, user)) => (head.trim_start_matches("[system]\n"), user),
            None => ("", asset),
        };
        Self {
            template_id,
            system_text: system.trim().to_string(),
            user_text: user.trim_end().to_string(),
        }
    }

    /// Names of the slots referenced by the user text, in order of first use.
    pub fn slots(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for cap in SLOT.captures_iter(&self.user_text) {
            let name = cap.get(1).unwrap().as_str();
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    /// Substitutes every `{slot}` in one pass; substituted values are not
    /// re-scanned, so slot-like text inside documents is left alone.
    pub fn render(&self, slots: &BTreeMap<&str, String>) -> Result<RenderedPrompt, GatewayError> {
        for name in self.slots() {
            if slots.get(name).is_none_or(|v| v.trim().is_empty()) {
                return Err(GatewayError::MissingSlot {
                    template: self.template_id,
                    slot: name.to_string(),
                });
            }
        }
        let user = SLOT
            .replace_all(&self.user_text, |cap: &regex::Captures| slots[&cap[1]].clone())
            .into_owned();
        let system = if self.system_text.is_empty() {
            SYSTEM_PREAMBLE.to_string()
        } else {
            format!("{SYSTEM_PREAMBLE}\n{}", self.system_text)
        };
        Ok(RenderedPrompt {
            template_id: self.template_id,
            system,
            user,
        })
    }
}

/// A fully rendered chat prompt: one system and one user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: TemplateId,
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    /// Content address used by the replay cache.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.template_id.as_str().as_bytes());
        h.update([0u8]);
        h.update(self.system.as_bytes());
        h.update([0u8]);
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn with_reminder(&self) -> RenderedPrompt {
        RenderedPrompt {
            template_id: self.template_id,
            system: self.system.clone(),
            user: format!("{}\n\n{}", self.user, self.template_id.format_reminder()),
        }
    }
}

/// User-supplied replacement text for one template.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateOverride {
    pub system: Option<String>,
    pub user: Option<String>,
}

/// The six templates in use for a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: TemplateId::ALL
                .into_iter()
                .map(|id| (id, PromptTemplate::parse(id, id.asset())))
                .collect(),
        }
    }
}

impl PromptSet {
    pub fn with_overrides(overrides: &BTreeMap<String, TemplateOverride>) -> Result<Self, GatewayError> {
        let mut set = PromptSet::default();
        for (name, o) in overrides {
            let id: TemplateId = name.parse()?;
            let t = set.templates.get_mut(&id).expect("all templates present");
            if let Some(system) = &o.system {
                t.system_text = system.clone();
            }
            if let Some(user) = &o.user {
                t.user_text = user.clone();
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, slots: &BTreeMap<&str, String>) -> Result<RenderedPrompt, GatewayError> {
        self.get(id).render(slots)
    }
}

/// Convenience for building slot maps.
pub fn slots<const N: usize>(pairs: [(&'static str, String); N]) -> BTreeMap<&'static str, String> {
    pairs.into_iter().collect()
}
