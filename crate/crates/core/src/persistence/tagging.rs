//! Behavioral tagging of transcripts: case-insensitive lexicon matching,
//! plus an optional model-assisted pass through the chat gateway.

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::events::EventRecord;
use crate::gateway::{ChatMessage, CompletionRequest, Gateway, GatewayError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagProvenance {
    Lexicon,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorTag {
    pub seq: u64,
    pub tag: String,
    pub matched_span: String,
    pub provenance: TagProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagEntry {
    pub tag: String,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexiconError {
    #[error("tag `{0}` has no patterns")]
    NoPatterns(String),
    #[error("tag `{tag}` has a blank pattern at position {index}")]
    BlankPattern { tag: String, index: usize },
    #[error("tag name is empty")]
    EmptyTag,
}

/// Ordered tag definitions. Serialized as a JSON array of
/// `{"tag": ..., "patterns": [...]}` so the order is preserved.
#[derive(Debug, Clone, Default)]
pub struct TagLexicon {
    entries: Vec<TagEntry>,
    compiled: Vec<(usize, Regex)>,
}

impl PartialEq for TagLexicon {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Serialize for TagLexicon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TagLexicon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = Vec::<TagEntry>::deserialize(d)?;
        TagLexicon::new(entries).map_err(serde::de::Error::custom)
    }
}

impl TagLexicon {
    pub fn new(entries: Vec<TagEntry>) -> Result<Self, LexiconError> {
        let mut compiled = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            if e.tag.trim().is_empty() {
                return Err(LexiconError::EmptyTag);
            }
            if e.patterns.is_empty() {
                return Err(LexiconError::NoPatterns(e.tag.clone()));
            }
            for (index, p) in e.patterns.iter().enumerate() {
                if p.trim().is_empty() {
                    return Err(LexiconError::BlankPattern {
                        tag: e.tag.clone(),
                        index,
                    });
                }
                let re = Regex::new(&format!("(?i){}", regex::escape(p))).expect("escaped pattern compiles");
                compiled.push((i, re));
            }
        }
        Ok(Self { entries, compiled })
    }

    pub fn entries(&self) -> &[TagEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A small starter lexicon for common team behaviors.
    pub fn starter() -> Self {
        let e = |tag: &str, ps: &[&str]| TagEntry {
            tag: tag.into(),
            patterns: ps.iter().map(|p| p.to_string()).collect(),
        };
        Self::new(vec![
            e("interruption", &["let me stop you", "hold on", "wait,"]),
            e("agreement", &["i agree", "good idea", "sounds good"]),
            e("disagreement", &["i disagree", "i don't think", "not sure that"]),
            e("planning", &["plan", "next step", "deadline"]),
            e("question", &["?"]),
        ])
        .expect("starter lexicon is valid")
    }
}

/// Every case-insensitive pattern occurrence in utterance events, ordered
/// by event sequence, then pattern order, then position.
pub fn tag_behaviors(events: &[EventRecord], lexicon: &TagLexicon) -> Vec<BehaviorTag> {
    let mut out = Vec::new();
    for e in events.iter().filter(|e| e.kind.is_utterance()) {
        let Some(text) = e.content() else { continue };
        for (entry, re) in &lexicon.compiled {
            for m in re.find_iter(text) {
                out.push(BehaviorTag {
                    seq: e.seq,
                    tag: lexicon.entries[*entry].tag.clone(),
                    matched_span: m.as_str().to_string(),
                    provenance: TagProvenance::Lexicon,
                });
            }
        }
    }
    out
}

/// Asks the model which of the lexicon's tags apply to each utterance. The
/// reply is read as a comma-separated list of tag names; unknown names are
/// ignored.
pub fn model_tag_pass(
    events: &[EventRecord],
    lexicon: &TagLexicon,
    gateway: &Gateway,
    model_id: &str,
) -> Result<Vec<BehaviorTag>, GatewayError> {
    let names: Vec<&str> = lexicon.entries.iter().map(|e| e.tag.as_str()).collect();
    if names.is_empty() {
        return Ok(Vec::new());
    }
    let instruction = format!(
        "You code team chat messages for research. Available tags: {}. \
         Reply with the applicable tag names separated by commas, or `none`.",
        names.join(", ")
    );
    let mut out = Vec::new();
    for e in events.iter().filter(|e| e.kind.is_utterance()) {
        let Some(text) = e.content() else { continue };
        let request = CompletionRequest {
            model_id: model_id.to_string(),
            messages: vec![ChatMessage::system(instruction.clone()), ChatMessage::user(text, None)],
            temperature: 0.0,
            max_output_tokens: 50,
            request_id: format!("{}:tag:{}", e.session_id, e.seq),
        };
        let reply = gateway.complete(&request)?;
        for name in reply.content.split(',').map(str::trim) {
            if let Some(tag) = names.iter().find(|n| n.eq_ignore_ascii_case(name)) {
                out.push(BehaviorTag {
                    seq: e.seq,
                    tag: tag.to_string(),
                    matched_span: text.to_string(),
                    provenance: TagProvenance::Model,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::gateway::{ScriptRule, ScriptedBackend};
    use crate::persistence::events::{EventKind, NewEvent, GENESIS_HASH};
    use serde_json::json;
    use std::sync::Arc;

    fn msg(seq: u64, text: &str) -> EventRecord {
        EventRecord::seal(
            "s",
            seq,
            GENESIS_HASH,
            NewEvent::new(EventKind::Message, 0.0, Some("u"), json!({ "content": text })),
        )
    }

    fn lex(entries: &[(&str, &[&str])]) -> TagLexicon {
        TagLexicon::new(
            entries
                .iter()
                .map(|(t, ps)| TagEntry {
                    tag: t.to_string(),
                    patterns: ps.iter().map(|p| p.to_string()).collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn phrase_is_tagged_case_insensitively() {
        let l = lex(&[("interruption", &["let me stop you"])]);
        let tags = tag_behaviors(&[msg(1, "ok"), msg(2, "Let Me Stop You there")], &l);
        assert_eq!(tags.len(), 1);
        assert_eq!((tags[0].seq, tags[0].matched_span.as_str()), (2, "Let Me Stop You"));
    }

    #[test]
    fn empty_lexicon_tags_nothing() {
        assert!(tag_behaviors(&[msg(1, "anything")], &TagLexicon::default()).is_empty());
    }

    #[test]
    fn overlapping_patterns_both_match() {
        let l = lex(&[("planning", &["plan", "plan b"])]);
        let tags = tag_behaviors(&[msg(1, "plan b")], &l);
        let spans: Vec<&str> = tags.iter().map(|t| t.matched_span.as_str()).collect();
        assert_eq!(spans, ["plan", "plan b"]);
    }

    #[test]
    fn regex_metacharacters_are_literal() {
        let l = lex(&[("question", &["?"])]);
        assert_eq!(tag_behaviors(&[msg(1, "why? how?")], &l).len(), 2);
    }

    #[test]
    fn invalid_lexicons() {
        assert_eq!(
            TagLexicon::new(vec![TagEntry {
                tag: "x".into(),
                patterns: vec![]
            }]),
            Err(LexiconError::NoPatterns("x".into()))
        );
        assert!(serde_json::from_str::<TagLexicon>(r#"[{"tag":"x","patterns":[" "]}]"#).is_err());
    }

    #[test]
    fn model_pass_uses_reply_tags() {
        let backend = ScriptedBackend::new(vec![ScriptRule::new("agree", "agreement, bogus")]).with_fallback("none");
        let gw = Gateway::new(Arc::new(backend), Arc::new(ManualClock::new(0.0)));
        let l = lex(&[("agreement", &["i agree"])]);
        let tags = model_tag_pass(&[msg(1, "we agree on it"), msg(2, "nope")], &l, &gw, "m").unwrap();
        assert_eq!(tags.len(), 1);
        assert_eq!((tags[0].seq, tags[0].provenance), (1, TagProvenance::Model));
    }
}
