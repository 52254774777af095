mod common;

use std::collections::{BTreeMap, BTreeSet};

use concept_curation::corpus::{Corpus, EmbeddingKind};
use concept_curation::expansion::{
    caption_only, expand_language_driven, expand_vision_driven, support_set, ConceptArchive, ExpansionMode,
};
use concept_curation::index::{brute_force_top_n, VectorIndex};
use concept_curation::Error;
use proptest::prelude::*;

use common::{corpus, index_over, lexicon, matrix, random_unit_rows, rng};

/// Expected support map recomputed from a brute-force retrieval.
fn enumerate_support(
    corpus: &Corpus,
    index: &VectorIndex,
    query: &[f32],
    anchor_row: usize,
    n: usize,
) -> BTreeMap<String, (BTreeSet<usize>, bool)> {
    let anchor = corpus.get(anchor_row).unwrap();
    let mut out: BTreeMap<String, (BTreeSet<usize>, bool)> = BTreeMap::new();
    for c in &anchor.concepts {
        out.entry(c.clone()).or_default().1 = true;
    }
    let n = n.min(corpus.len() - 1);
    for hit in brute_force_top_n(index, query, n, Some(&anchor.id)).unwrap() {
        for c in &corpus.get(hit.row).unwrap().concepts {
            out.entry(c.clone()).or_default().0.insert(hit.row);
        }
    }
    out
}

fn as_map(archive: &ConceptArchive) -> BTreeMap<String, (BTreeSet<usize>, bool)> {
    archive
        .entries
        .iter()
        .map(|e| (e.concept.clone(), (e.support_rows.iter().copied().collect(), e.from_anchor_caption)))
        .collect()
}

fn micro() -> (Corpus, VectorIndex) {
    let lex = lexicon(&["fox", "water", "grass", "horse"]);
    let c = corpus(&["fox water", "fox grass", "horse"], &lex);
    let m = matrix(
        EmbeddingKind::Image,
        &[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]],
    );
    let idx = index_over(&c, m);
    (c, idx)
}

#[test]
fn micro_corpus_archive() {
    let (c, idx) = micro();
    let archive = expand_vision_driven(c.get(0).unwrap(), &idx, &c, 2).unwrap();
    assert_eq!(archive.retrieved_rows, vec![1, 2]);
    let fox = archive.entry("fox").unwrap();
    assert_eq!((fox.n_support(), fox.from_anchor_caption), (1, true));
    let water = archive.entry("water").unwrap();
    assert_eq!((water.n_support(), water.from_anchor_caption), (0, true));
    assert_eq!(archive.entry("grass").unwrap().support_rows, vec![1]);
    assert_eq!(archive.entry("horse").unwrap().support_rows, vec![2]);
    assert!(!archive.entry("horse").unwrap().from_anchor_caption);
    assert_eq!(archive.len(), 4);
    assert_eq!(as_map(&archive), enumerate_support(&c, &idx, idx.matrix().row(0), 0, 2));
}

#[test]
fn zero_retrieval_keeps_caption_concepts() {
    let (c, idx) = micro();
    let archive = expand_vision_driven(c.get(0).unwrap(), &idx, &c, 0).unwrap();
    assert_eq!(archive.concepts().collect::<Vec<_>>(), vec!["fox", "water"]);
    assert!(archive.entries.iter().all(|e| e.n_support() == 0 && e.from_anchor_caption));
    assert_eq!(as_map(&archive), as_map(&caption_only(c.get(0).unwrap())));
}

#[test]
fn oversized_n_is_clamped() {
    let (c, idx) = micro();
    let archive = expand_vision_driven(c.get(0).unwrap(), &idx, &c, 50).unwrap();
    assert!(archive.was_clamped());
    assert_eq!(archive.n_retrieved(), 2);
    assert!(!archive.retrieved_rows.contains(&0));
}

#[test]
fn support_set_lookups() {
    let lex = lexicon(&["fox", "grass", "sky"]);
    let c = corpus(&["sky", "fox grass", "fox", "grass"], &lex);
    let m = matrix(
        EmbeddingKind::Image,
        &[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.8, 0.2], vec![0.0, 1.0]],
    );
    let idx = index_over(&c, m);
    let archive = expand_vision_driven(c.get(0).unwrap(), &idx, &c, 2).unwrap();
    assert_eq!(support_set(&archive, "fox").unwrap(), &[1, 2]);
    assert_eq!(support_set(&archive, "grass").unwrap(), &[1]);
    assert!(support_set(&archive, "sky").unwrap().is_empty());
    assert!(matches!(support_set(&archive, "moon"), Err(Error::UnknownConcept(_))));
    let retrieved: BTreeSet<usize> = archive.retrieved_rows.iter().copied().collect();
    for e in &archive.entries {
        assert!(e.support_rows.iter().all(|r| retrieved.contains(r)));
    }
}

#[test]
fn language_mode_follows_text_not_vision() {
    // Pair 2 looks like the anchor but its caption text is far away; pair 1's
    // caption text matches the anchor image.
    let lex = lexicon(&["fox", "dog", "cat"]);
    let c = corpus(&["fox", "dog", "cat"], &lex);
    let images = matrix(
        EmbeddingKind::Image,
        &[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.95, 0.31, 0.0]],
    );
    let captions = matrix(
        EmbeddingKind::CaptionText,
        &[vec![0.0, 1.0, 0.0], vec![0.98, 0.0, 0.2], vec![0.0, -1.0, 0.1]],
    );
    let caption_index = index_over(&c, captions);
    let image_index = index_over(&c, images.clone());
    let anchor = c.get(0).unwrap();

    let lang = expand_language_driven(anchor, &images, &caption_index, &c, 1).unwrap();
    assert_eq!(lang.mode, ExpansionMode::Language);
    assert!(lang.entry("dog").is_some());
    assert!(lang.entry("cat").is_none());
    assert_eq!(as_map(&lang), enumerate_support(&c, &caption_index, images.row(0), 0, 1));

    let vision = expand_vision_driven(anchor, &image_index, &c, 1).unwrap();
    assert!(vision.entry("cat").is_some());
    assert!(vision.entry("dog").is_none());

    let none = expand_language_driven(anchor, &images, &caption_index, &c, 0).unwrap();
    assert_eq!(none.concepts().collect::<Vec<_>>(), vec!["fox"]);
}

#[test]
fn identical_caption_embeddings_tie_break_by_row() {
    let lex = lexicon(&["a", "b", "c", "d"]);
    let c = corpus(&["a", "b", "c", "d"], &lex);
    let images = matrix(EmbeddingKind::Image, &random_unit_rows(&mut rng(1), 4, 3));
    let same = vec![vec![0.0f32, 0.0, 1.0]; 4];
    let caption_index = index_over(&c, matrix(EmbeddingKind::CaptionText, &same));
    for _ in 0..3 {
        let archive = expand_language_driven(c.get(2).unwrap(), &images, &caption_index, &c, 2).unwrap();
        assert_eq!(archive.retrieved_rows, vec![0, 1]);
        assert_eq!(archive.concepts().collect::<Vec<_>>(), vec!["c", "a", "b"]);
    }
}

#[test]
fn foreign_anchor_is_rejected() {
    let (c, idx) = micro();
    let other = corpus(&["horse", "fox"], &lexicon(&["fox", "horse"]));
    let mut stranger = other.get(1).unwrap().clone();
    stranger.id = "nope".into();
    assert!(expand_vision_driven(&stranger, &idx, &c, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn archive_invariants(seed in any::<u64>(), n_pairs in 2usize..30, n in 0usize..40) {
        let words = ["red", "blue", "green", "sky", "tree", "car"];
        let lex = lexicon(&words);
        let mut r = rng(seed);
        let captions: Vec<String> = (0..n_pairs)
            .map(|i| {
                (0..words.len())
                    .filter(|j| (seed >> ((i * 7 + j) % 64)) & 1 == 1)
                    .map(|j| words[j])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
        let c = corpus(&refs, &lex);
        let idx = index_over(&c, matrix(EmbeddingKind::Image, &random_unit_rows(&mut r, n_pairs, 4)));
        let anchor_row = (seed as usize) % n_pairs;
        let anchor = c.get(anchor_row).unwrap();
        let archive = expand_vision_driven(anchor, &idx, &c, n).unwrap();
        let again = expand_vision_driven(anchor, &idx, &c, n).unwrap();
        prop_assert_eq!(&archive, &again);
        prop_assert_eq!(as_map(&archive), enumerate_support(&c, &idx, idx.matrix().row(anchor_row), anchor_row, n));
        prop_assert!(archive.len() >= anchor.concepts.len());
        let unique: BTreeSet<&str> = archive.concepts().collect();
        prop_assert_eq!(unique.len(), archive.len());
        for e in &archive.entries {
            prop_assert!(!e.support_rows.contains(&anchor_row));
            prop_assert!(e.n_support() <= archive.n_retrieved());
            prop_assert!(e.from_anchor_caption || e.n_support() >= 1);
        }
    }
}
