//! Synthetic corpora with known ground-truth concepts.
//!
//! Every image is the noisy, normalized mean of its concepts' embeddings and
//! its caption names a random non-empty subset of them, so the concepts a
//! caption leaves out are known exactly and recovery can be measured.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, ConceptLexicon, Corpus, EmbeddingKind, EmbeddingMatrix, PairRecord};
use crate::error::{Error, Result};
use crate::pipeline::CuratedRecord;
use crate::ranking::prompt;

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const IMAGES_FILE: &str = "images.cemb";
pub const CAPTIONS_FILE: &str = "captions.cemb";
pub const CONCEPTS_FILE: &str = "concepts.cemb";
pub const CONCEPT_LIST_FILE: &str = "concepts.txt";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_pairs: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub caption_keep_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 50,
            dim: 64,
            n_pairs: 2000,
            k_min: 2,
            k_max: 5,
            caption_keep_prob: 0.5,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.k_min < 1 || self.k_min > self.k_max || self.k_max > self.vocab_size {
            return fail(format!(
                "need vocab_size >= k_max >= k_min >= 1, got V={} k=[{}, {}]",
                self.vocab_size, self.k_min, self.k_max
            ));
        }
        if !(self.caption_keep_prob > 0.0 && self.caption_keep_prob <= 1.0) {
            return fail(format!(
                "caption_keep_prob must lie in (0, 1], got {}",
                self.caption_keep_prob
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.dim < 2 {
            return fail(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.n_pairs < 1 {
            return fail("n_pairs must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    /// Every concept present in the image.
    pub truth: Vec<String>,
    /// The subset named by the caption.
    pub caption_concepts: Vec<String>,
}

impl TruthRecord {
    /// Concepts in the image that the caption does not mention.
    pub fn missing(&self) -> BTreeSet<&str> {
        self.truth
            .iter()
            .filter(|c| !self.caption_concepts.contains(c))
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub vocabulary: Vec<String>,
    /// Concept-text embeddings, row `v` for `vocabulary[v]`.
    pub concepts: EmbeddingMatrix,
    pub images: EmbeddingMatrix,
    /// Caption text embeddings: normalized mean of the caption's concepts.
    pub captions: EmbeddingMatrix,
    pub pairs: Vec<PairRecord>,
    pub truth: Vec<TruthRecord>,
}

pub fn concept_name(v: usize) -> String {
    format!("concept{v:03}")
}

fn normalized(v: Vec<f64>) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

fn mean_of(vectors: &[Vec<f32>], members: &[usize], dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    for &m in members {
        for (s, &x) in sum.iter_mut().zip(&vectors[m]) {
            *s += f64::from(x);
        }
    }
    sum.iter_mut().for_each(|s| *s /= members.len() as f64);
    sum
}

/// Generates a corpus; identical specs give identical corpora.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;

    let concept_vecs: Vec<Vec<f32>> = (0..spec.vocab_size)
        .map(|_| {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                if v.iter().any(|x| *x != 0.0) {
                    break normalized(v);
                }
            }
        })
        .collect();
    let vocabulary: Vec<String> = (0..spec.vocab_size).map(concept_name).collect();
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut pairs = Vec::with_capacity(spec.n_pairs);
    let mut truth = Vec::with_capacity(spec.n_pairs);
    let mut image_rows = Vec::with_capacity(spec.n_pairs);
    let mut caption_rows = Vec::with_capacity(spec.n_pairs);
    for row in 0..spec.n_pairs {
        let k = rng.random_range(spec.k_min..=spec.k_max);
        let members = index::sample(&mut rng, spec.vocab_size, k).into_vec();

        let mut image = mean_of(&concept_vecs, &members, dim);
        if spec.noise_sigma > 0.0 {
            image.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
        if image.iter().all(|x| *x == 0.0) {
            return Err(Error::Invariant(format!("synthetic image {row} is the zero vector")));
        }
        image_rows.push(normalized(image));

        let kept: Vec<usize> = loop {
            let kept: Vec<usize> = members
                .iter()
                .copied()
                .filter(|_| rng.random_bool(spec.caption_keep_prob))
                .collect();
            if !kept.is_empty() {
                break kept;
            }
        };
        caption_rows.push(normalized(mean_of(&concept_vecs, &kept, dim)));

        let id = format!("pair{row:06}");
        let caption_concepts: Vec<String> = kept.iter().map(|&v| vocabulary[v].clone()).collect();
        pairs.push(PairRecord {
            id: id.clone(),
            caption: caption_concepts.join(" "),
            concepts: caption_concepts.clone(),
            row,
        });
        truth.push(TruthRecord {
            id,
            truth: members.iter().map(|&v| vocabulary[v].clone()).collect(),
            caption_concepts,
        });
    }

    Ok(SynthCorpus {
        spec: spec.clone(),
        vocabulary,
        concepts: EmbeddingMatrix::from_vecs(EmbeddingKind::ConceptText, &concept_vecs)?,
        images: EmbeddingMatrix::from_vecs(EmbeddingKind::Image, &image_rows)?,
        captions: EmbeddingMatrix::from_vecs(EmbeddingKind::CaptionText, &caption_rows)?,
        pairs,
        truth,
    })
}

impl SynthCorpus {
    pub fn lexicon(&self) -> ConceptLexicon {
        ConceptLexicon::new(self.vocabulary.iter().cloned()).expect("generated names are valid")
    }

    pub fn corpus(&self) -> Corpus {
        Corpus::new(self.pairs.clone()).expect("generated ids are unique")
    }

    /// Prompted strings aligned with the concept embedding rows.
    pub fn prompts(&self) -> Vec<String> {
        self.vocabulary
            .iter()
            .map(|c| prompt(c).expect("non-empty name"))
            .collect()
    }

    /// Writes all files into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_with(&dir.join(PAIRS_FILE), |w| corpus::write_pairs(w, &self.pairs))?;
        write_with(&dir.join(TRUTH_FILE), |w| write_json_lines(w, &self.truth))?;
        write_with(&dir.join(LEXICON_FILE), |w| write_lines(w, &self.vocabulary))?;
        write_with(&dir.join(CONCEPT_LIST_FILE), |w| write_lines(w, &self.prompts()))?;
        self.images.save(dir.join(IMAGES_FILE))?;
        self.captions.save(dir.join(CAPTIONS_FILE))?;
        self.concepts.save(dir.join(CONCEPTS_FILE))?;
        Ok(())
    }
}

fn write_with(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    body(&mut writer)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_lines(w: &mut impl Write, lines: &[String]) -> std::io::Result<()> {
    for line in lines {
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub(crate) fn write_json_lines<T: Serialize>(w: &mut impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub(crate) fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>> {
    read_json_lines(path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    /// `None` when the caption already names every concept.
    pub missing_recall: Option<f64>,
    pub archive_recall: Option<f64>,
    /// `None` when nothing was sampled.
    pub false_rate: Option<f64>,
    pub group_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub pairs: usize,
    /// Pairs whose caption misses at least one concept.
    pub pairs_with_gap: usize,
    pub missing_recall: f64,
    pub archive_recall: f64,
    pub false_rate: f64,
    pub group_coverage: f64,
    pub per_pair: Vec<PairMetrics>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores curated records against the generator's ground truth.
///
/// * missing-concept recall: share of the concepts absent from the caption
///   that were sampled (pairs with nothing missing are skipped);
/// * archive recall: the same, measured on the archive before sampling;
/// * false-concept rate: share of sampled concepts not in the image;
/// * group coverage: distinct true concepts among the sampled labels, over
///   `min(L, |truth|)` where `L` is the label budget.
pub fn recovery_report(
    curated: &[CuratedRecord],
    truth: &[TruthRecord],
    labels: usize,
) -> Result<RecoveryReport> {
    if curated.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} curated records vs {} truth records",
            curated.len(),
            truth.len()
        )));
    }
    let mut per_pair = Vec::with_capacity(curated.len());
    for (index, (record, t)) in curated.iter().zip(truth).enumerate() {
        if record.id != t.id {
            return Err(Error::IdMismatch {
                index,
                left: record.id.clone(),
                right: t.id.clone(),
            });
        }
        let missing = t.missing();
        let true_set: BTreeSet<&str> = t.truth.iter().map(String::as_str).collect();
        let sampled: BTreeSet<&str> = record.sampled.iter().map(|s| s.concept.as_str()).collect();
        let archive: BTreeSet<&str> = record.archive.iter().map(|e| e.concept.as_str()).collect();
        let budget = labels.min(true_set.len());
        per_pair.push(PairMetrics {
            id: record.id.clone(),
            missing_recall: ratio(sampled.intersection(&missing).count(), missing.len()),
            archive_recall: ratio(archive.intersection(&missing).count(), missing.len()),
            false_rate: ratio(sampled.difference(&true_set).count(), sampled.len()),
            group_coverage: ratio(sampled.intersection(&true_set).count(), budget).unwrap_or(0.0),
        });
    }
    Ok(RecoveryReport {
        pairs: per_pair.len(),
        pairs_with_gap: per_pair.iter().filter(|p| p.missing_recall.is_some()).count(),
        missing_recall: mean(per_pair.iter().filter_map(|p| p.missing_recall)),
        archive_recall: mean(per_pair.iter().filter_map(|p| p.archive_recall)),
        false_rate: mean(per_pair.iter().filter_map(|p| p.false_rate)),
        group_coverage: mean(per_pair.iter().map(|p| p.group_coverage)),
        per_pair,
    })
}
