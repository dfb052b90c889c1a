use std::collections::BTreeSet;

use cpzoo::corpus::{self, Corpus, ExpertiseLevel, ModelEntry, SourceFile};
use cpzoo::embedding::{fallback_embed, IndexConfig, UNIT_NORM_TOLERANCE};
use cpzoo::eval::mean_reciprocal_rank;
use cpzoo::index::RetrievalIndex;
use cpzoo::EmbeddingVector;
use proptest::prelude::*;

fn level() -> impl Strategy<Value = ExpertiseLevel> {
    prop_oneof![Just(ExpertiseLevel::Novice), Just(ExpertiseLevel::Intermediate), Just(ExpertiseLevel::Expert)]
}

fn entry() -> impl Strategy<Value = ModelEntry> {
    (
        "[a-z0-9_-]{1,12}",
        ".{0,20}",
        prop::collection::vec(("[a-z]{1,8}\\.(mzn|dzn)", "[a-z%]\\PC{0,80}"), 1..4),
        prop::collection::btree_map(level(), "\\PC{0,40}[a-z]", 0..4),
    )
        .prop_map(|(id, name, files, descriptions)| ModelEntry {
            name: if name.is_empty() { id.clone() } else { name },
            provenance: "generated".into(),
            id,
            source_files: files.into_iter().map(|(f, c)| SourceFile { filename: f, content: c }).collect(),
            descriptions,
        })
}

fn corpus() -> impl Strategy<Value = Corpus> {
    (1u64..50, prop::collection::vec(entry(), 0..8)).prop_map(|(version, entries)| {
        let mut seen = BTreeSet::new();
        let entries = entries.into_iter().filter(|e| seen.insert(e.id.clone())).collect();
        Corpus::from_entries(version, entries).unwrap()
    })
}

fn config() -> impl Strategy<Value = IndexConfig> {
    prop::sample::select(IndexConfig::all())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn corpus_json_round_trips(c in corpus()) {
        let text = corpus::corpus_to_json(&c);
        let back = corpus::corpus_from_json(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(corpus::corpus_to_json(&back), text);
    }

    #[test]
    fn add_entry_leaves_prior_snapshot_alone(c in corpus(), e in entry(), reuse in any::<prop::sample::Index>()) {
        // half the time, collide with an existing id
        let mut e = e;
        if !c.is_empty() && reuse.index(2) == 0 {
            e.id = c.entries()[reuse.index(c.len())].id.clone();
        }
        let before = corpus::corpus_to_json(&c);
        match c.add_entry(e.clone()) {
            Ok(next) => {
                prop_assert_eq!(next.version(), c.version() + 1);
                prop_assert_eq!(next.len(), c.len() + 1);
                prop_assert_eq!(next.get(&e.id), Some(&e));
                for old in c.entries() {
                    prop_assert_eq!(next.get(&old.id), Some(old));
                }
            }
            Err(_) => prop_assert!(c.get(&e.id).is_some() || e.validate().is_err()),
        }
        prop_assert_eq!(corpus::corpus_to_json(&c), before);
    }

    #[test]
    fn mrr_is_bounded_and_order_free(
        ranks in prop::collection::vec(prop::option::of(1usize..30), 1..40),
        k in 1usize..12,
        seed in any::<u64>(),
    ) {
        let m = mean_reciprocal_rank(&ranks, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        let mut shuffled = ranks.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_mul(i + 7) % (i + 1));
        }
        let m2 = mean_reciprocal_rank(&shuffled, k).unwrap();
        prop_assert!((m - m2).abs() <= 1e-12);
        let all_first = ranks.iter().all(|r| *r == Some(1));
        prop_assert_eq!(m == 1.0, all_first);
    }

    #[test]
    fn config_names_round_trip(c in config()) {
        let parsed: IndexConfig = c.name().parse().unwrap();
        prop_assert_eq!(&parsed, &c);
        let lower: IndexConfig = c.name().to_lowercase().parse().unwrap();
        prop_assert_eq!(lower, c);
    }

    #[test]
    fn fallback_vectors_are_unit_or_rejected(text in "\\PC{0,200}", d in 1usize..1024) {
        match fallback_embed(&text, d) {
            Ok(v) => {
                prop_assert_eq!(v.dimension(), d);
                prop_assert!((v.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE);
                prop_assert!(v.values().iter().all(|x| *x >= 0.0));
            }
            Err(_) => prop_assert!(!text.chars().any(char::is_alphanumeric)),
        }
    }

    #[test]
    fn index_json_round_trips(
        vectors in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..20),
        c in config(),
    ) {
        let items: Vec<(String, EmbeddingVector)> = vectors
            .into_iter()
            .enumerate()
            .filter(|(_, v)| v.iter().any(|x| x.abs() > 1e-6))
            .map(|(i, v)| (format!("m{i}"), EmbeddingVector::new(v).unwrap()))
            .collect();
        prop_assume!(!items.is_empty());
        let index = RetrievalIndex::build(c, "fallback-fnv1a-6", 6, items).unwrap();
        let text = index.to_json();
        let back = RetrievalIndex::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
        let q = EmbeddingVector::new(vec![1.0, 0.5, -0.25, 0.0, 2.0, -1.0]).unwrap();
        prop_assert_eq!(index.query_top_k(&q, 20).unwrap(), back.query_top_k(&q, 20).unwrap());
    }
}

#[test]
fn ingest_is_deterministic() {
    let root = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/zoo");
    let a = corpus::corpus_to_json(&corpus::ingest_directory(&root).unwrap());
    let b = corpus::corpus_to_json(&corpus::ingest_directory(&root).unwrap());
    assert_eq!(a, b);
}
