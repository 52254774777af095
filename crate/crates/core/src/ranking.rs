//! Relevancy scoring of archive concepts.
//!
//! Each concept gets a saliency term (cosine between the anchor image and the
//! prompted concept text) and a debiased term that compares the anchor's
//! response to the concept against the responses of the retrieved images
//! whose captions mention it. The relevancy is their unweighted sum.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::expansion::ConceptArchive;
use crate::index::cosine;

pub const PROMPT_TEMPLATE: &str = "a photo of a {concept}";

/// Below this the debiased term's denominator is treated as zero.
const DENOMINATOR_FLOOR: f64 = 1e-9;

pub fn prompt(concept: &str) -> Result<String> {
    if concept.is_empty() {
        return Err(Error::InvalidArgument("cannot prompt an empty concept".into()));
    }
    Ok(PROMPT_TEMPLATE.replace("{concept}", concept))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevancyScore {
    pub s_a: f64,
    pub s_b: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingMode {
    /// Saliency plus debiased term.
    Full,
    /// Saliency only; the debiased term is reported as 0.
    Naive,
}

impl fmt::Display for RankingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingMode::Full => "full",
            RankingMode::Naive => "naive",
        })
    }
}

impl FromStr for RankingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(RankingMode::Full),
            "naive" => Ok(RankingMode::Naive),
            other => Err(Error::InvalidArgument(format!(
                "unknown ranking mode {other:?} (expected full or naive)"
            ))),
        }
    }
}

/// A concept with its prompt text and text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptedConcept<'a> {
    pub concept: &'a str,
    pub prompt_text: String,
    pub embedding: &'a [f32],
}

/// Concept-text embeddings keyed by prompted string.
#[derive(Debug, Clone)]
pub struct ConceptTable {
    matrix: Arc<EmbeddingMatrix>,
    rows: HashMap<String, usize>,
}

impl ConceptTable {
    /// `prompts[i]` is the prompted string embedded at row `i`.
    pub fn new(matrix: Arc<EmbeddingMatrix>, prompts: Vec<String>) -> Result<Self> {
        if prompts.len() != matrix.len() {
            return Err(Error::InvalidArgument(format!(
                "{} prompted concepts for {} embedding rows",
                prompts.len(),
                matrix.len()
            )));
        }
        let mut rows = HashMap::with_capacity(prompts.len());
        for (row, text) in prompts.into_iter().enumerate() {
            if let Some(first) = rows.insert(text.clone(), row) {
                return Err(Error::DuplicateId {
                    id: text,
                    first_line: first + 1,
                    second_line: row + 1,
                });
            }
        }
        Ok(ConceptTable { matrix, rows })
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn lookup<'a>(&'a self, concept: &'a str) -> Result<PromptedConcept<'a>> {
        Ok(PromptedConcept {
            concept,
            embedding: self.embedding(concept)?,
            prompt_text: prompt(concept)?,
        })
    }

    pub fn embedding(&self, concept: &str) -> Result<&[f32]> {
        let prompt_text = prompt(concept)?;
        match self.rows.get(&prompt_text) {
            Some(&row) => Ok(self.matrix.row(row)),
            None => Err(Error::MissingEmbedding {
                concept: concept.to_owned(),
                prompt: prompt_text,
            }),
        }
    }
}

/// Cosine between the anchor image and the prompted concept.
pub fn score_saliency(anchor_emb: &[f32], concept_emb: &[f32]) -> Result<f64> {
    cosine(anchor_emb, concept_emb)
}

/// Debiased relevancy of a concept.
///
/// Similarities are clipped at zero first. With no support images the term
/// is neutral (1). Otherwise it is `(1 + N') * a / (a + sum(support))`,
/// which equals 1 when the anchor's response matches the support mean and
/// ranges over `[0, 1 + N']`.
pub fn score_debiased(anchor_sim: f64, support_sims: &[f64]) -> f64 {
    if support_sims.is_empty() {
        return 1.0;
    }
    let anchor = anchor_sim.max(0.0);
    let denominator = anchor + support_sims.iter().map(|s| s.max(0.0)).sum::<f64>();
    if denominator < DENOMINATOR_FLOOR {
        return 0.0;
    }
    (1.0 + support_sims.len() as f64) * anchor / denominator
}

pub fn score_total(s_a: f64, s_b: f64) -> f64 {
    s_a + s_b
}

/// Ranking order: relevancy descending, then concept ascending.
pub fn by_relevancy(a_concept: &str, a_s: f64, b_concept: &str, b_s: f64) -> Ordering {
    b_s.total_cmp(&a_s).then_with(|| a_concept.cmp(b_concept))
}

/// Scores every archive entry and sorts the archive by relevancy.
pub fn rank_archive(
    mut archive: ConceptArchive,
    image_matrix: &EmbeddingMatrix,
    concepts: &ConceptTable,
    mode: RankingMode,
) -> Result<ConceptArchive> {
    if archive.anchor_row >= image_matrix.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor row {} outside image matrix of {} rows",
            archive.anchor_row,
            image_matrix.len()
        )));
    }
    let anchor = image_matrix.row(archive.anchor_row);
    for entry in &mut archive.entries {
        let text = concepts.embedding(&entry.concept)?;
        let s_a = score_saliency(anchor, text)?;
        let s_b = match mode {
            RankingMode::Naive => 0.0,
            RankingMode::Full => {
                let support = entry
                    .support_rows
                    .iter()
                    .map(|&row| {
                        if row >= image_matrix.len() {
                            return Err(Error::InvalidArgument(format!(
                                "support row {row} outside image matrix"
                            )));
                        }
                        cosine(text, image_matrix.row(row))
                    })
                    .collect::<Result<Vec<_>>>()?;
                score_debiased(s_a, &support)
            }
        };
        entry.score = Some(RelevancyScore {
            s_a,
            s_b,
            s: score_total(s_a, s_b),
        });
    }
    archive.entries.sort_by(|a, b| {
        let (sa, sb) = (a.score.unwrap().s, b.score.unwrap().s);
        by_relevancy(&a.concept, sa, &b.concept, sb)
    });
    Ok(archive)
}
