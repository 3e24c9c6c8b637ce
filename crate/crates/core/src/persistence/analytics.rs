//! Team and individual statistics computed from a session event log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::events::{EventKind, EventRecord};
use super::tagging::{tag_behaviors, BehaviorTag, TagLexicon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: u64,
    pub median_seconds: f64,
    pub p90_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsSnapshot {
    pub session_id: String,
    /// Last event sequence number included.
    pub as_of_seq: u64,
    /// Speaker-attributed messages, bot replies included.
    pub total_messages: u64,
    pub message_counts: BTreeMap<String, u64>,
    pub word_counts: BTreeMap<String, u64>,
    /// `turn_matrix[a][b]`: how often `b` spoke immediately after `a`.
    pub turn_matrix: BTreeMap<String, BTreeMap<String, u64>>,
    pub latency: BTreeMap<String, LatencyStats>,
    pub participation_equity: f64,
    pub tags: Vec<BehaviorTag>,
    pub reflections: Vec<String>,
}

/// Linear interpolation between closest ranks; `sorted` must be ascending
/// and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Shannon entropy of the count distribution divided by `ln n`, where `n`
/// is the number of non-zero counts. Defined as 1 when `n <= 1`.
pub fn participation_equity<'a>(counts: impl IntoIterator<Item = &'a u64>) -> f64 {
    let active: Vec<u64> = counts.into_iter().copied().filter(|c| *c > 0).collect();
    let n = active.len();
    if n <= 1 || active.iter().all(|c| *c == active[0]) {
        return 1.0;
    }
    let total: u64 = active.iter().sum();
    let h: f64 = active
        .iter()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * libm::log(p)
        })
        .sum();
    (h / libm::log(n as f64)).clamp(0.0, 1.0)
}

/// Computes the snapshot over `events`. Messages without a speaker (task
/// announcements) are excluded from the per-speaker statistics.
pub fn compute_analytics(session_id: &str, events: &[EventRecord], lexicon: &TagLexicon) -> AnalyticsSnapshot {
    let utterances: Vec<&EventRecord> = events
        .iter()
        .filter(|e| e.kind.is_utterance() && e.speaker_id.is_some())
        .collect();

    let mut message_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut turn_matrix: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut latencies: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    let mut prev: Option<&EventRecord> = None;
    for e in &utterances {
        let speaker = e.speaker_id.clone().unwrap_or_default();
        *message_counts.entry(speaker.clone()).or_default() += 1;
        *word_counts.entry(speaker.clone()).or_default() +=
            e.content().map_or(0, |c| c.split_whitespace().count() as u64);
        if let Some(p) = prev {
            let from = p.speaker_id.clone().unwrap_or_default();
            if from != speaker {
                latencies
                    .entry(speaker.clone())
                    .or_default()
                    .push((e.timestamp - p.timestamp).max(0.0));
            }
            *turn_matrix.entry(from).or_default().entry(speaker).or_default() += 1;
        }
        prev = Some(e);
    }

    let latency = latencies
        .into_iter()
        .map(|(who, mut xs)| {
            xs.sort_by(f64::total_cmp);
            let stats = LatencyStats {
                samples: xs.len() as u64,
                median_seconds: percentile(&xs, 0.5),
                p90_seconds: percentile(&xs, 0.9),
            };
            (who, stats)
        })
        .collect();

    let reflections = events
        .iter()
        .filter(|e| e.kind == EventKind::Reflection)
        .filter_map(|e| e.content().map(str::to_string))
        .collect();

    AnalyticsSnapshot {
        session_id: session_id.to_string(),
        as_of_seq: events.last().map_or(0, |e| e.seq),
        total_messages: utterances.len() as u64,
        participation_equity: participation_equity(message_counts.values()),
        message_counts,
        word_counts,
        turn_matrix,
        latency,
        tags: tag_behaviors(events, lexicon),
        reflections,
    }
}

/// Snapshots after each event with `seq > after_seq`, each computed over the
/// log prefix ending at that event.
pub fn snapshots_after(
    session_id: &str,
    events: &[EventRecord],
    after_seq: u64,
    lexicon: &TagLexicon,
) -> Vec<AnalyticsSnapshot> {
    events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.seq > after_seq)
        .map(|(i, _)| compute_analytics(session_id, &events[..=i], lexicon))
        .collect()
}
