use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentError};
use crate::memory::RecordId;
use crate::persistence::EventKind;
use crate::persona::DescriptorTable;
use crate::simulation::{run_simulation, SimulationScript};

/// Values to try per parameter. An empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub k: Vec<usize>,
    pub temperature: Vec<f64>,
    pub max_output_tokens: Vec<u32>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
            && self.beta.is_empty()
            && self.gamma.is_empty()
            && self.lambda.is_empty()
            && self.k.is_empty()
            && self.temperature.is_empty()
            && self.max_output_tokens.is_empty()
    }

    /// Cartesian product in row-major order (alpha varies slowest).
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<SweepCell> {
        fn or<T: Copy>(xs: &[T], d: T) -> Vec<T> {
            if xs.is_empty() {
                vec![d]
            } else {
                xs.to_vec()
            }
        }
        let r = &base.retrieval;
        let m = &base.gateway.model;
        let mut out = Vec::new();
        for &alpha in &or(&self.alpha, r.alpha) {
            for &beta in &or(&self.beta, r.beta) {
                for &gamma in &or(&self.gamma, r.gamma) {
                    for &lambda in &or(&self.lambda, r.lambda) {
                        for &k in &or(&self.k, r.k) {
                            for &temperature in &or(&self.temperature, m.temperature) {
                                for &max_output_tokens in &or(&self.max_output_tokens, m.max_output_tokens) {
                                    out.push(SweepCell {
                                        alpha,
                                        beta,
                                        gamma,
                                        lambda,
                                        k,
                                        temperature,
                                        max_output_tokens,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub k: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl SweepCell {
    fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.retrieval.alpha = self.alpha;
        c.retrieval.beta = self.beta;
        c.retrieval.gamma = self.gamma;
        c.retrieval.lambda = self.lambda;
        c.retrieval.k = self.k;
        c.gateway.model.temperature = self.temperature;
        c.gateway.model.max_output_tokens = self.max_output_tokens;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    /// Mean per-message Jaccard overlap of retrieved ids with the first
    /// (reference) cell.
    pub retrieval_overlap: f64,
    pub replies: usize,
    /// Word count of each bot reply, in order.
    pub reply_words: Vec<usize>,
    pub suppressions: BTreeMap<String, u64>,
    pub reflections: usize,
    /// Mean age in seconds of all retrieved memories at retrieval time.
    pub mean_retrieved_age_seconds: f64,
    /// Retrieved ids per handled message, best first.
    pub retrieved: Vec<Vec<RecordId>>,
}

fn jaccard(a: &[RecordId], b: &[RecordId]) -> f64 {
    let (a, b): (BTreeSet<_>, BTreeSet<_>) = (a.iter().collect(), b.iter().collect());
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Replays `fixture` once per grid cell and tabulates retrieval overlap
/// against the first cell, reply lengths and suppression counts.
pub fn sweep_parameters(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    fixture: &SimulationScript,
    table: &DescriptorTable,
) -> Result<Vec<SweepRow>, ExperimentError> {
    if grid.is_empty() {
        return Err(ExperimentError::EmptyGrid);
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    for cell in grid.cells(base) {
        let config = cell.apply(base);
        let out = run_simulation(fixture, &config, table).map_err(|e| ExperimentError::Simulation(e.to_string()))?;
        let retrieved: Vec<Vec<RecordId>> = out
            .steps
            .iter()
            .map(|s| s.handled.retrieved.iter().map(|m| m.record.id).collect())
            .collect();
        let (mut age_sum, mut age_n) = (0.0, 0usize);
        for s in &out.steps {
            for m in &s.handled.retrieved {
                age_sum += (s.timestamp - m.record.created_at).max(0.0);
                age_n += 1;
            }
        }
        let mut suppressions = BTreeMap::new();
        let mut reply_words = Vec::new();
        let mut reflections = 0;
        for e in &out.events {
            match e.kind {
                EventKind::Suppression => {
                    *suppressions
                        .entry(e.payload_str("reason").unwrap_or("unknown").to_string())
                        .or_insert(0) += 1;
                }
                EventKind::BotReply => {
                    reply_words.push(e.content().unwrap_or_default().split_whitespace().count());
                }
                EventKind::Reflection => reflections += 1,
                _ => {}
            }
        }
        let retrieval_overlap = match rows.first() {
            None => 1.0,
            Some(reference) => {
                let n = retrieved.len().max(reference.retrieved.len());
                if n == 0 {
                    1.0
                } else {
                    let empty = Vec::new();
                    (0..n)
                        .map(|i| {
                            jaccard(
                                retrieved.get(i).unwrap_or(&empty),
                                reference.retrieved.get(i).unwrap_or(&empty),
                            )
                        })
                        .sum::<f64>()
                        / n as f64
                }
            }
        };
        rows.push(SweepRow {
            cell,
            retrieval_overlap,
            replies: reply_words.len(),
            reply_words,
            suppressions,
            reflections,
            mean_retrieved_age_seconds: if age_n == 0 { 0.0 } else { age_sum / age_n as f64 },
            retrieved,
        });
    }
    Ok(rows)
}
