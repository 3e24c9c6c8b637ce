use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::memory::RecordId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectionPolicy {
    /// Reflect after this many observations since the last reflection.
    pub every_messages: usize,
    /// Or once their summed importance reaches this.
    pub importance_threshold: f64,
}

impl Default for ReflectionPolicy {
    fn default() -> Self {
        Self {
            every_messages: 20,
            importance_threshold: 10.0,
        }
    }
}

/// Observations accumulated since the last reflection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReflectionTracker {
    pending: Vec<RecordId>,
    importance_sum: f64,
}

impl ReflectionTracker {
    pub fn observe(&mut self, id: RecordId, importance: f64) {
        self.pending.push(id);
        self.importance_sum += importance;
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn importance_sum(&self) -> f64 {
        self.importance_sum
    }

    pub fn is_due(&self, policy: &ReflectionPolicy) -> bool {
        !self.pending.is_empty()
            && (self.pending.len() >= policy.every_messages || self.importance_sum >= policy.importance_threshold)
    }

    pub fn window(&self) -> Option<RangeInclusive<RecordId>> {
        Some(*self.pending.first()?..=*self.pending.last()?)
    }

    pub fn reset(&mut self) {
        self.pending.clear();
        self.importance_sum = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(importances: &[f64], policy: &ReflectionPolicy) -> Vec<RangeInclusive<RecordId>> {
        let mut t = ReflectionTracker::default();
        let mut out = Vec::new();
        for (i, imp) in importances.iter().enumerate() {
            t.observe(i as RecordId + 1, *imp);
            if t.is_due(policy) {
                out.push(t.window().unwrap());
                t.reset();
            }
        }
        out
    }

    #[test]
    fn nineteen_low_messages_no_reflection() {
        let imps = vec![5.0 / 19.0; 19];
        assert!(run(&imps, &ReflectionPolicy::default()).is_empty());
    }

    #[test]
    fn twentieth_message_triggers() {
        let imps = vec![0.25; 20];
        assert_eq!(run(&imps, &ReflectionPolicy::default()), vec![1..=20]);
    }

    #[test]
    fn importance_mass_triggers_first() {
        // 13 x 0.75 = 9.75, the 14th brings it to 10.5.
        let mut imps = vec![0.75; 14];
        imps.extend(vec![0.1; 20]);
        let windows = run(&imps, &ReflectionPolicy::default());
        assert_eq!(windows[0], 1..=14);
        assert_eq!(windows[1], 15..=34);
    }
}
