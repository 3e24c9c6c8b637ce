use std::collections::BTreeMap;

use proptest::prelude::*;

use collab_core::embedding::EmbeddingVector;
use collab_core::experiment::{match_teams, AgeBand, CompositionConstraints, ExperimentStatus, PoolEntry};
use collab_core::memory::{
    composite_score, MemoryConfig, MemoryStore, NewMemory, RecordKind, RetrievalQuery, RetrievalWeights,
};
use collab_core::persistence::{Demographics, ParticipantProfile};
use collab_core::persona::{compile_system_prompt, DescriptorTable, FacetSetting, Level, PersonaSpec};

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

fn store_from(vectors: &[(Vec<f64>, f64, u8)]) -> MemoryStore {
    let mut store = MemoryStore::new(MemoryConfig {
        dimension: 4,
        importance_window: 5,
        embedder_version: "test".into(),
    });
    for (i, (v, at, ch)) in vectors.iter().enumerate() {
        store
            .append(NewMemory {
                content: format!("r{i}"),
                kind: RecordKind::Observation,
                speaker_id: "p".into(),
                channel_id: format!("c{ch}"),
                created_at: *at,
                embedding: EmbeddingVector::new(v.clone()).unwrap(),
            })
            .unwrap();
    }
    store
}

fn records() -> impl Strategy<Value = Vec<(Vec<f64>, f64, u8)>> {
    prop::collection::vec(
        (prop::collection::vec(-1.0f64..1.0, 4), 0.0f64..10_000.0, 0u8..2),
        1..60,
    )
}

proptest! {
    #[test]
    fn composite_is_a_convex_combination(r in unit(), v in unit(), i in unit(), a in 0.0f64..10.0, b in 0.0f64..10.0, g in 0.01f64..10.0) {
        let w = RetrievalWeights::new(a, b, g).unwrap();
        prop_assert!((w.alpha() + w.beta() + w.gamma() - 1.0).abs() < 1e-12);
        let c = composite_score(r, v, i, &w).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        prop_assert!((c - (w.alpha() * r + w.beta() * v + w.gamma() * i)).abs() <= 1e-9);
        let same = composite_score(r, r, r, &w).unwrap();
        prop_assert!((same - r).abs() <= 1e-12);
    }

    #[test]
    fn store_invariants(rs in records()) {
        let store = store_from(&rs);
        let mut last = None;
        for r in store.records() {
            prop_assert!((0.0..=1.0).contains(&r.importance));
            prop_assert!(r.source_ids.is_empty());
            prop_assert_eq!(r.embedding.dimension(), 4);
            prop_assert!(last.is_none_or(|l| r.id > l));
            last = Some(r.id);
        }
    }

    #[test]
    fn scaling_weights_keeps_the_ranking(
        rs in records(),
        q in prop::collection::vec(-1.0f64..1.0, 4),
        a in 0.0f64..5.0, b in 0.0f64..5.0, g in 0.01f64..5.0,
        c in 0.01f64..100.0,
        k in 1usize..20,
    ) {
        let store = store_from(&rs);
        let ids = |w: RetrievalWeights| -> Vec<u64> {
            let query = RetrievalQuery {
                query_text: String::new(),
                query_embedding: EmbeddingVector::new(q.clone()).unwrap(),
                now: 10_000.0,
                k,
                lambda: 1e-3,
                weights: w,
                channel_id: None,
            };
            store.retrieve_top_k(&query).unwrap().iter().map(|m| m.record.id).collect()
        };
        prop_assert_eq!(
            ids(RetrievalWeights::new(a, b, g).unwrap()),
            ids(RetrievalWeights::new(c * a, c * b, c * g).unwrap())
        );
    }
}

// -- persona

fn levels() -> impl Strategy<Value = Vec<Option<usize>>> {
    let n = DescriptorTable::default_table().facets().len();
    prop::collection::vec(prop::option::of(0usize..3), n)
}

proptest! {
    #[test]
    fn configured_descriptors_appear_exactly_once(choice in levels()) {
        let table = DescriptorTable::default_table();
        let mut spec = PersonaSpec::neutral("Sam");
        for (key, lv) in table.facets().iter().zip(&choice) {
            if let Some(lv) = lv {
                spec.facets.push(FacetSetting::new(key.domain, key.facet.clone(), Level::ALL[*lv]));
            }
        }
        let prompt = compile_system_prompt(&spec, &table, 100_000).unwrap();
        prop_assert_eq!(&prompt, &compile_system_prompt(&spec, &table, 100_000).unwrap());
        for (key, lv) in table.facets().iter().zip(&choice) {
            for (j, level) in Level::ALL.iter().enumerate() {
                let text = table.descriptor(key, *level).unwrap();
                let n = prompt.matches(text).count();
                if *lv == Some(j) {
                    prop_assert_eq!(n, 1, "{} {:?}", key, level);
                } else if Level::ALL.iter().all(|l| *l == *level || !table.descriptor(key, *l).unwrap().contains(text)) {
                    prop_assert_eq!(n, 0, "{} {:?} should be absent", key, level);
                }
            }
        }
        // a cap below the compiled length fails instead of truncating
        prop_assert!(compile_system_prompt(&spec, &table, prompt.chars().count() - 1).is_err());
    }
}

// -- matching

fn entry(i: usize, gender: Option<&str>, age: Option<u32>) -> PoolEntry {
    PoolEntry {
        participant_id: format!("p{i}"),
        profile: ParticipantProfile {
            participant_id: format!("p{i}"),
            display_name: format!("P{i}"),
            demographics: Demographics {
                age,
                gender: gender.map(str::to_string),
                education: None,
            },
            individual_measures: BTreeMap::new(),
            consent: true,
        },
        enqueued_at: i as f64,
    }
}

fn pool() -> impl Strategy<Value = Vec<PoolEntry>> {
    prop::collection::vec(
        (
            prop::option::of(prop::sample::select(vec!["F", "M", "x"])),
            prop::option::of(18u32..70),
        ),
        0..25,
    )
    .prop_map(|v| v.into_iter().enumerate().map(|(i, (g, a))| entry(i, g, a)).collect())
}

fn constraints() -> impl Strategy<Value = CompositionConstraints> {
    (1usize..4, any::<bool>(), any::<bool>(), 0usize..4, 25u32..45).prop_map(|(size, genders, ages, split, cut)| {
        let f = split.min(size);
        CompositionConstraints {
            team_size: size,
            gender_targets: genders.then(|| BTreeMap::from([("F".to_string(), f), ("M".to_string(), size - f)])),
            age_bands: ages.then(|| {
                vec![
                    AgeBand {
                        min: 18,
                        max: cut,
                        count: size - f,
                    },
                    AgeBand {
                        min: cut + 1,
                        max: 99,
                        count: f,
                    },
                ]
            }),
        }
    })
}

proptest! {
    #[test]
    fn formed_teams_meet_constraints(p in pool(), c in constraints()) {
        let out = match_teams(&p, &c);
        let mut seen: Vec<&str> = Vec::new();
        for t in &out.teams {
            let profiles: Vec<ParticipantProfile> = t.iter().map(|e| e.profile.clone()).collect();
            prop_assert!(c.check_team(&profiles).is_ok());
            seen.extend(t.iter().map(|e| e.participant_id.as_str()));
        }
        seen.extend(out.residual.iter().map(|e| e.participant_id.as_str()));
        seen.sort();
        let mut all: Vec<&str> = p.iter().map(|e| e.participant_id.as_str()).collect();
        all.sort();
        prop_assert_eq!(seen, all);
    }

    #[test]
    fn permuting_later_entries_keeps_earlier_teams(p in pool(), c in constraints(), cut in any::<prop::sample::Index>(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cut = if p.is_empty() { 0 } else { cut.index(p.len() + 1) };
        let mut shuffled = p.clone();
        shuffled[cut..].shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let early = |teams: &[Vec<PoolEntry>]| -> Vec<Vec<String>> {
            teams
                .iter()
                .filter(|t| t.iter().all(|e| e.enqueued_at < cut as f64))
                .map(|t| t.iter().map(|e| e.participant_id.clone()).collect())
                .collect()
        };
        prop_assert_eq!(early(&match_teams(&p, &c).teams), early(&match_teams(&shuffled, &c).teams));
    }
}

#[test]
fn status_transitions_are_monotone() {
    use ExperimentStatus::*;
    let all = [Draft, Open, Running, Closed];
    let rank = |s: ExperimentStatus| all.iter().position(|x| *x == s).unwrap();
    for a in all {
        for b in all {
            if a.can_become(b) {
                assert!(rank(b) > rank(a), "{a:?} -> {b:?}");
            }
        }
    }
    assert!(!Closed.can_become(Draft));
}
