//! Concept archive construction.
//!
//! Vision-driven expansion retrieves the anchor's nearest images and pools the
//! concepts of their captions. The language-driven baseline instead retrieves
//! the captions whose text embeddings best match the anchor image. In both
//! modes the anchor's own caption concepts are kept and flagged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EmbeddingMatrix, PairRecord};
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::ranking::RelevancyScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionMode {
    /// Caption concepts only; no retrieval.
    None,
    Vision,
    Language,
}

impl fmt::Display for ExpansionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpansionMode::None => "none",
            ExpansionMode::Vision => "vision",
            ExpansionMode::Language => "language",
        })
    }
}

impl FromStr for ExpansionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ExpansionMode::None),
            "vision" => Ok(ExpansionMode::Vision),
            "language" => Ok(ExpansionMode::Language),
            other => Err(Error::InvalidArgument(format!(
                "unknown expansion mode {other:?} (expected none, vision or language)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub concept: String,
    /// Retrieved rows whose captions contain the concept, ascending.
    pub support_rows: Vec<usize>,
    pub from_anchor_caption: bool,
    pub score: Option<RelevancyScore>,
}

impl ArchiveEntry {
    /// Support set size.
    pub fn n_support(&self) -> usize {
        self.support_rows.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptArchive {
    pub anchor_id: String,
    pub anchor_row: usize,
    pub mode: ExpansionMode,
    /// Requested retrieval depth.
    pub n_requested: usize,
    /// Rows actually retrieved, best first.
    pub retrieved_rows: Vec<usize>,
    pub entries: Vec<ArchiveEntry>,
}

impl ConceptArchive {
    pub fn n_retrieved(&self) -> usize {
        self.retrieved_rows.len()
    }

    /// True when retrieval depth was cut down to the corpus size.
    pub fn was_clamped(&self) -> bool {
        self.n_requested > self.retrieved_rows.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, concept: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.concept == concept)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.concept.as_str())
    }

    pub fn is_ranked(&self) -> bool {
        self.entries.iter().all(|e| e.score.is_some())
    }
}

/// Rows retrieved for `concept`, verbatim.
pub fn support_set<'a>(archive: &'a ConceptArchive, concept: &str) -> Result<&'a [usize]> {
    archive
        .entry(concept)
        .map(|e| e.support_rows.as_slice())
        .ok_or_else(|| Error::UnknownConcept(concept.to_owned()))
}

/// Archive holding only the anchor's caption concepts.
pub fn caption_only(anchor: &PairRecord) -> ConceptArchive {
    assemble(anchor, ExpansionMode::None, 0, Vec::new(), &Corpus::default())
}

pub fn expand_vision_driven(
    anchor: &PairRecord,
    image_index: &VectorIndex,
    corpus: &Corpus,
    n: usize,
) -> Result<ConceptArchive> {
    check_alignment(anchor, image_index, corpus)?;
    let query = image_index.matrix().row(anchor.row);
    let retrieved = retrieve(image_index, query, anchor, corpus, n)?;
    Ok(assemble(anchor, ExpansionMode::Vision, n, retrieved, corpus))
}

/// Queries caption text embeddings with the anchor's image embedding.
pub fn expand_language_driven(
    anchor: &PairRecord,
    image_matrix: &EmbeddingMatrix,
    caption_index: &VectorIndex,
    corpus: &Corpus,
    n_captions: usize,
) -> Result<ConceptArchive> {
    check_alignment(anchor, caption_index, corpus)?;
    if image_matrix.len() != corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "{} image embeddings for {} pairs",
            image_matrix.len(),
            corpus.len()
        )));
    }
    let query = image_matrix.row(anchor.row);
    let retrieved = retrieve(caption_index, query, anchor, corpus, n_captions)?;
    Ok(assemble(
        anchor,
        ExpansionMode::Language,
        n_captions,
        retrieved,
        corpus,
    ))
}

fn check_alignment(anchor: &PairRecord, index: &VectorIndex, corpus: &Corpus) -> Result<()> {
    if index.len() != corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "index has {} rows but the corpus has {} pairs",
            index.len(),
            corpus.len()
        )));
    }
    match corpus.get(anchor.row) {
        Some(p) if p.id == anchor.id => Ok(()),
        _ => Err(Error::InvalidArgument(format!(
            "anchor {:?} is not part of the corpus",
            anchor.id
        ))),
    }
}

fn retrieve(
    index: &VectorIndex,
    query: &[f32],
    anchor: &PairRecord,
    corpus: &Corpus,
    n: usize,
) -> Result<Vec<usize>> {
    let n = n.min(corpus.len().saturating_sub(1));
    let hits = index.top_n(query, n, Some(&anchor.id))?;
    hits.into_iter()
        .map(|hit| {
            let pair = &corpus.pairs()[hit.row];
            if pair.id != hit.id {
                return Err(Error::IdMismatch {
                    index: hit.row,
                    left: pair.id.clone(),
                    right: hit.id,
                });
            }
            Ok(hit.row)
        })
        .collect()
}

fn assemble(
    anchor: &PairRecord,
    mode: ExpansionMode,
    n_requested: usize,
    retrieved_rows: Vec<usize>,
    corpus: &Corpus,
) -> ConceptArchive {
    let mut entries: Vec<ArchiveEntry> = anchor
        .concepts
        .iter()
        .map(|c| ArchiveEntry {
            concept: c.clone(),
            support_rows: Vec::new(),
            from_anchor_caption: true,
            score: None,
        })
        .collect();
    for &row in &retrieved_rows {
        for concept in &corpus.pairs()[row].concepts {
            match entries.iter_mut().find(|e| &e.concept == concept) {
                Some(entry) => entry.support_rows.push(row),
                None => entries.push(ArchiveEntry {
                    concept: concept.clone(),
                    support_rows: vec![row],
                    from_anchor_caption: false,
                    score: None,
                }),
            }
        }
    }
    for entry in &mut entries {
        entry.support_rows.sort_unstable();
    }
    ConceptArchive {
        anchor_id: anchor.id.clone(),
        anchor_row: anchor.row,
        mode,
        n_requested,
        retrieved_rows,
        entries,
    }
}
