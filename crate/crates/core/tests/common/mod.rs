#![allow(dead_code)]

use std::sync::Arc;

use concept_curation::corpus::{read_pairs, ConceptLexicon, Corpus, EmbeddingKind, EmbeddingMatrix};
use concept_curation::index::VectorIndex;
use concept_curation::ranking::{prompt, ConceptTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn lexicon(entries: &[&str]) -> ConceptLexicon {
    ConceptLexicon::new(entries.iter().copied()).unwrap()
}

/// Corpus with ids "p0", "p1", ... from the given captions.
pub fn corpus(captions: &[&str], lex: &ConceptLexicon) -> Corpus {
    let mut text = String::new();
    for (i, c) in captions.iter().enumerate() {
        text.push_str(&serde_json::json!({"id": format!("p{i}"), "caption": c}).to_string());
        text.push('\n');
    }
    Corpus::new(read_pairs(text.as_bytes(), lex).unwrap()).unwrap()
}

pub fn matrix(kind: EmbeddingKind, rows: &[Vec<f32>]) -> EmbeddingMatrix {
    EmbeddingMatrix::from_vecs(kind, rows).unwrap()
}

pub fn index_over(corpus: &Corpus, m: EmbeddingMatrix) -> VectorIndex {
    VectorIndex::new(Arc::new(m), corpus.ids()).unwrap()
}

pub fn concept_table(entries: &[(&str, Vec<f32>)]) -> ConceptTable {
    let rows: Vec<Vec<f32>> = entries.iter().map(|(_, v)| v.clone()).collect();
    let prompts = entries.iter().map(|(c, _)| prompt(c).unwrap()).collect();
    ConceptTable::new(Arc::new(matrix(EmbeddingKind::ConceptText, &rows)), prompts).unwrap()
}

pub fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                break v.iter().map(|x| (x / norm) as f32).collect();
            }
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
