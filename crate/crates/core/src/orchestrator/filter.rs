use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogicFilterConfig {
    pub respond_when_mentioned: bool,
    /// Minimum relevance of the best retrieved memory for an unprompted reply.
    pub proactivity_threshold: f64,
    pub min_seconds_between_bot_messages: u64,
    pub max_reply_tokens: u32,
    pub scope_guard_enabled: bool,
}

impl Default for LogicFilterConfig {
    fn default() -> Self {
        Self {
            respond_when_mentioned: true,
            proactivity_threshold: 0.8,
            min_seconds_between_bot_messages: 30,
            max_reply_tokens: 150,
            scope_guard_enabled: true,
        }
    }
}

impl LogicFilterConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.proactivity_threshold) {
            errs.push("logic_filter.proactivity_threshold must lie in [0, 1]".into());
        }
        if self.max_reply_tokens == 0 {
            errs.push("logic_filter.max_reply_tokens must be positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionReason {
    Mentioned,
    Proactive,
    Cooldown,
    BelowThreshold,
}

impl DecisionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionReason::Mentioned => "mentioned",
            DecisionReason::Proactive => "proactive",
            DecisionReason::Cooldown => "cooldown",
            DecisionReason::BelowThreshold => "below_threshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub respond: bool,
    pub reason: DecisionReason,
}

/// Inputs of the response rule that depend on the session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterInput {
    pub mentioned: bool,
    pub relevance: f64,
    pub now: f64,
    pub bot_last_spoke_at: Option<f64>,
}

/// Respond iff the bot is triggered (mentioned while mention replies are
/// on, or relevance at or above the threshold) and the cooldown has
/// elapsed.
pub fn decide(input: &FilterInput, config: &LogicFilterConfig) -> Decision {
    let by_mention = input.mentioned && config.respond_when_mentioned;
    let by_relevance = input.relevance >= config.proactivity_threshold;
    if !by_mention && !by_relevance {
        return Decision {
            respond: false,
            reason: DecisionReason::BelowThreshold,
        };
    }
    let cooled = input
        .bot_last_spoke_at
        .is_none_or(|last| input.now - last >= config.min_seconds_between_bot_messages as f64);
    if !cooled {
        return Decision {
            respond: false,
            reason: DecisionReason::Cooldown,
        };
    }
    Decision {
        respond: true,
        reason: if by_mention {
            DecisionReason::Mentioned
        } else {
            DecisionReason::Proactive
        },
    }
}

/// Detects addressing of the bot by display name, `@name`, or a platform
/// user mention such as `<@U123>`.
#[derive(Debug, Clone)]
pub struct MentionDetector {
    name: Regex,
    platform_tag: String,
}

impl MentionDetector {
    pub fn new(display_name: &str, participant_id: &str) -> Self {
        let name = Regex::new(&format!(
            r"(?i)(^|[^\w])@?{}($|[^\w])",
            regex::escape(display_name.trim())
        ))
        .expect("escaped name compiles");
        Self {
            name,
            platform_tag: format!("<@{participant_id}>"),
        }
    }

    pub fn is_mentioned(&self, text: &str) -> bool {
        text.contains(&self.platform_tag) || self.name.is_match(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(mentioned: bool, relevance: f64, now: f64, last: Option<f64>) -> FilterInput {
        FilterInput {
            mentioned,
            relevance,
            now,
            bot_last_spoke_at: last,
        }
    }

    #[test]
    fn mention_with_cooldown_elapsed() {
        let d = decide(&input(true, 0.1, 100.0, Some(10.0)), &LogicFilterConfig::default());
        assert_eq!(
            d,
            Decision {
                respond: true,
                reason: DecisionReason::Mentioned
            }
        );
    }

    #[test]
    fn below_threshold_stays_silent() {
        let d = decide(&input(false, 0.3, 0.0, None), &LogicFilterConfig::default());
        assert_eq!(
            d,
            Decision {
                respond: false,
                reason: DecisionReason::BelowThreshold
            }
        );
    }

    #[test]
    fn threshold_is_inclusive() {
        let cfg = LogicFilterConfig::default();
        let d = decide(&input(false, cfg.proactivity_threshold, 0.0, None), &cfg);
        assert_eq!(
            d,
            Decision {
                respond: true,
                reason: DecisionReason::Proactive
            }
        );
    }

    #[test]
    fn cooldown_blocks_triggered_reply() {
        let cfg = LogicFilterConfig::default();
        let d = decide(&input(true, 0.0, 101.0, Some(100.0)), &cfg);
        assert_eq!(
            d,
            Decision {
                respond: false,
                reason: DecisionReason::Cooldown
            }
        );
        let d = decide(&input(true, 0.0, 130.0, Some(100.0)), &cfg);
        assert!(d.respond);
    }

    #[test]
    fn mention_ignored_when_disabled() {
        let cfg = LogicFilterConfig {
            respond_when_mentioned: false,
            ..LogicFilterConfig::default()
        };
        assert_eq!(
            decide(&input(true, 0.2, 0.0, None), &cfg).reason,
            DecisionReason::BelowThreshold
        );
    }

    #[test]
    fn mention_detection() {
        let m = MentionDetector::new("Sam", "U42");
        assert!(m.is_mentioned("sam, what do you think?"));
        assert!(m.is_mentioned("ask @Sam"));
        assert!(m.is_mentioned("hey <@U42>"));
        assert!(!m.is_mentioned("the samples are ready"));
        assert!(!m.is_mentioned("Samantha agrees"));
    }
}
