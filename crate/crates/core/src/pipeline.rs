//! End-to-end curation: expand, rank, cluster and sample for every pair.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::corpus::{self, ConceptLexicon, Corpus, EmbeddingKind, EmbeddingMatrix, PairRecord};
use crate::error::{Error, Result};
use crate::expansion::{self, ConceptArchive, ExpansionMode};
use crate::index::VectorIndex;
use crate::ranking::{self, prompt, ConceptTable, RankingMode};
use crate::sampling::{self, derive_seed, ClusterAssignment, SamplingMode};
use crate::synth::{self, SynthCorpus, TruthRecord};

/// Everything curation reads, loaded once and shared read-only.
#[derive(Debug, Clone)]
pub struct CurationInputs {
    pub corpus: Corpus,
    pub image_index: VectorIndex,
    pub caption_index: Option<VectorIndex>,
    pub concepts: ConceptTable,
}

impl CurationInputs {
    pub fn new(
        corpus: Corpus,
        images: EmbeddingMatrix,
        captions: Option<EmbeddingMatrix>,
        concepts: ConceptTable,
    ) -> Result<Self> {
        let ids = corpus.ids();
        if images.dim() != concepts.matrix().dim() {
            return Err(Error::Dimension {
                expected: images.dim(),
                found: concepts.matrix().dim(),
            });
        }
        let image_index = VectorIndex::new(Arc::new(images), ids.clone())?;
        let caption_index = match captions {
            Some(m) => {
                if m.dim() != image_index.matrix().dim() {
                    return Err(Error::Dimension {
                        expected: image_index.matrix().dim(),
                        found: m.dim(),
                    });
                }
                Some(VectorIndex::new(Arc::new(m), ids)?)
            }
            None => None,
        };
        Ok(CurationInputs {
            corpus,
            image_index,
            caption_index,
            concepts,
        })
    }

    /// Opens every input named in the config. Caption embeddings are only
    /// read for language-driven expansion.
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let paths = &config.paths;
        let lexicon = ConceptLexicon::load(paths.lexicon()?)?;
        let pairs = corpus::load_pairs(paths.pairs()?, &lexicon)?;
        let corpus = Corpus::new(pairs)?;
        let images = corpus::load_embeddings(paths.images()?, EmbeddingKind::Image, None)?;
        if images.len() != corpus.len() {
            return Err(Error::InvalidArgument(format!(
                "{} image embeddings for {} pairs",
                images.len(),
                corpus.len()
            )));
        }
        let dim = Some(images.dim());
        let concept_matrix = corpus::load_embeddings(paths.concepts()?, EmbeddingKind::ConceptText, dim)?;
        let prompts = corpus::load_concept_list(paths.concept_list()?)?;
        let concepts = ConceptTable::new(Arc::new(concept_matrix), prompts)?;
        let captions = match config.expansion.mode {
            ExpansionMode::Language => Some(corpus::load_embeddings(
                paths.captions()?,
                EmbeddingKind::CaptionText,
                dim,
            )?),
            _ => None,
        };
        Self::new(corpus, images, captions, concepts)
    }

    pub fn from_synth(synth: &SynthCorpus) -> Result<Self> {
        let concepts = ConceptTable::new(Arc::new(synth.concepts.clone()), synth.prompts())?;
        Self::new(
            synth.corpus(),
            synth.images.clone(),
            Some(synth.captions.clone()),
            concepts,
        )
    }

    pub fn images(&self) -> &EmbeddingMatrix {
        self.image_index.matrix()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedEntry {
    pub concept: String,
    pub n_support: usize,
    pub support_rows: Vec<usize>,
    pub from_caption: bool,
    pub s_a: f64,
    pub s_b: f64,
    pub s: f64,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledLabel {
    pub concept: String,
    pub prompt: String,
    pub s: f64,
    pub cluster: Option<usize>,
}

/// One output line: the pair, its scored archive and the sampled labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedRecord {
    pub id: String,
    pub caption: String,
    pub caption_concepts: Vec<String>,
    /// Sorted by relevancy, best first.
    pub archive: Vec<CuratedEntry>,
    pub sampled: Vec<SampledLabel>,
}

fn build_archive(inputs: &CurationInputs, config: &PipelineConfig, anchor: &PairRecord) -> Result<ConceptArchive> {
    let n = config.expansion.n_retrieve;
    match config.expansion.mode {
        ExpansionMode::None => Ok(expansion::caption_only(anchor)),
        ExpansionMode::Vision => expansion::expand_vision_driven(anchor, &inputs.image_index, &inputs.corpus, n),
        ExpansionMode::Language => {
            let captions = inputs.caption_index.as_ref().ok_or_else(|| {
                Error::InvalidArgument("language-driven expansion needs caption embeddings".into())
            })?;
            expansion::expand_language_driven(anchor, inputs.images(), captions, &inputs.corpus, n)
        }
    }
}

/// Runs every stage for one anchor.
pub fn curate_anchor(inputs: &CurationInputs, config: &PipelineConfig, anchor: &PairRecord) -> Result<CuratedRecord> {
    let id = anchor.id.as_str();
    let archive = build_archive(inputs, config, anchor).map_err(|e| e.at_stage(id, "expansion"))?;
    let archive = ranking::rank_archive(archive, inputs.images(), &inputs.concepts, config.ranking.mode)
        .map_err(|e| e.at_stage(id, "ranking"))?;

    let labels = config.sampling.labels;
    let deterministic = config.sampling.deterministic;
    let sample_seed = derive_seed(config.seed, id, "sample");
    let (clusters, sampled) = if archive.is_empty() {
        (None, Vec::new())
    } else {
        match config.sampling.mode {
            SamplingMode::Cluster => {
                let clusters = sampling::cluster_archive(
                    &archive,
                    &inputs.concepts,
                    labels,
                    derive_seed(config.seed, id, "kmeans"),
                    config.kmeans.max_iter,
                )
                .map_err(|e| e.at_stage(id, "clustering"))?;
                let picks = sampling::cluster_guided_sample(&archive, &clusters, labels, sample_seed, deterministic)
                    .map_err(|e| e.at_stage(id, "sampling"))?;
                (Some(clusters), picks.picks)
            }
            SamplingMode::Naive => {
                let picks = sampling::naive_sample(&archive, labels, sample_seed, deterministic)
                    .map_err(|e| e.at_stage(id, "sampling"))?;
                (None, picks.picks)
            }
        }
    };

    let record = CuratedRecord {
        id: anchor.id.clone(),
        caption: anchor.caption.clone(),
        caption_concepts: anchor.concepts.clone(),
        archive: archive
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let score = e.score.expect("ranked archive");
                CuratedEntry {
                    concept: e.concept.clone(),
                    n_support: e.n_support(),
                    support_rows: e.support_rows.clone(),
                    from_caption: e.from_anchor_caption,
                    s_a: score.s_a,
                    s_b: score.s_b,
                    s: score.s,
                    cluster: clusters.as_ref().map(|c: &ClusterAssignment| c.assignment[i]),
                }
            })
            .collect(),
        sampled: sampled
            .into_iter()
            .map(|p| SampledLabel {
                prompt: prompt(&p.concept).expect("archive concepts are non-empty"),
                concept: p.concept,
                s: p.score,
                cluster: p.cluster,
            })
            .collect(),
    };
    check_record(&record, labels).map_err(|e| e.at_stage(id, "output"))?;
    Ok(record)
}

fn check_record(record: &CuratedRecord, labels: usize) -> Result<()> {
    let expected = labels.min(record.archive.len());
    if record.sampled.len() != expected {
        return Err(Error::Invariant(format!(
            "sampled {} labels, expected {expected}",
            record.sampled.len()
        )));
    }
    for (i, label) in record.sampled.iter().enumerate() {
        if !record.archive.iter().any(|e| e.concept == label.concept) {
            return Err(Error::Invariant(format!("sampled {:?} is not in the archive", label.concept)));
        }
        if record.sampled[..i].iter().any(|l| l.concept == label.concept) {
            return Err(Error::Invariant(format!("{:?} sampled twice", label.concept)));
        }
    }
    if record.archive.windows(2).any(|w| w[0].s < w[1].s) {
        return Err(Error::Invariant("archive not sorted by relevancy".into()));
    }
    Ok(())
}

/// Curates every pair, in input order, on a pool of `config.threads` threads.
pub fn curate_records(inputs: &CurationInputs, config: &PipelineConfig) -> Result<Vec<CuratedRecord>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    pool.install(|| {
        inputs
            .corpus
            .pairs()
            .par_iter()
            .map(|anchor| curate_anchor(inputs, config, anchor))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub records: usize,
    /// Anchors whose retrieval depth exceeded the corpus and was clamped.
    pub clamped: usize,
    pub mean_archive_size: f64,
}

pub fn write_records(path: &Path, records: &[CuratedRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    synth::write_json_lines(&mut writer, records)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<CuratedRecord>> {
    synth::read_json_lines(path.as_ref())
}

/// Loads the configured inputs, curates and writes the output file.
pub fn curate(config: &PipelineConfig) -> Result<CurationSummary> {
    config.validate()?;
    let output = config
        .paths
        .output
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("missing path: output".into()))?;
    let p = &config.paths;
    for input in [&p.pairs, &p.images, &p.concepts, &p.concept_list, &p.lexicon, &p.captions]
        .into_iter()
        .flatten()
    {
        if same_file(input, output) {
            return Err(Error::InvalidArgument(format!(
                "output {} would overwrite an input",
                output.display()
            )));
        }
    }
    let inputs = CurationInputs::load(config)?;
    let records = curate_records(&inputs, config)?;
    write_records(output, &records)?;
    let n_retrieve = config.expansion.n_retrieve;
    let clamped = match config.expansion.mode {
        ExpansionMode::None => 0,
        _ if n_retrieve + 1 > inputs.corpus.len() => inputs.corpus.len(),
        _ => 0,
    };
    Ok(CurationSummary {
        records: records.len(),
        clamped,
        mean_archive_size: mean(records.iter().map(|r| r.archive.len() as f64)),
    })
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub id: String,
    pub caption_concepts: usize,
    pub archive_size: usize,
    pub sampled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub pairs: usize,
    pub mean_caption_concepts: f64,
    pub mean_archive_size: f64,
    pub mean_sampled: f64,
    pub caption_concepts_histogram: BTreeMap<usize, usize>,
    pub archive_size_histogram: BTreeMap<usize, usize>,
    pub sampled_histogram: BTreeMap<usize, usize>,
    pub per_pair: Vec<GapRecord>,
}

/// Caption concept counts against archive and sampled sizes.
pub fn gap_report(pairs: &[PairRecord], curated: &[CuratedRecord]) -> Result<GapReport> {
    if pairs.len() != curated.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pairs vs {} curated records",
            pairs.len(),
            curated.len()
        )));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (index, (pair, record)) in pairs.iter().zip(curated).enumerate() {
        if pair.id != record.id {
            return Err(Error::IdMismatch {
                index,
                left: pair.id.clone(),
                right: record.id.clone(),
            });
        }
        per_pair.push(GapRecord {
            id: pair.id.clone(),
            caption_concepts: pair.concepts.len(),
            archive_size: record.archive.len(),
            sampled: record.sampled.len(),
        });
    }
    let histogram = |f: fn(&GapRecord) -> usize| {
        let mut h = BTreeMap::new();
        for r in &per_pair {
            *h.entry(f(r)).or_insert(0) += 1;
        }
        h
    };
    Ok(GapReport {
        pairs: per_pair.len(),
        mean_caption_concepts: mean(per_pair.iter().map(|r| r.caption_concepts as f64)),
        mean_archive_size: mean(per_pair.iter().map(|r| r.archive_size as f64)),
        mean_sampled: mean(per_pair.iter().map(|r| r.sampled as f64)),
        caption_concepts_histogram: histogram(|r| r.caption_concepts),
        archive_size_histogram: histogram(|r| r.archive_size),
        sampled_histogram: histogram(|r| r.sampled),
        per_pair,
    })
}

/// The five configurations of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Caption concepts only.
    Baseline,
    /// Language-driven expansion, naive ranking, naive sampling.
    Language,
    /// Vision-driven expansion, naive ranking, naive sampling.
    Vision,
    /// Vision-driven expansion, full ranking, naive sampling.
    VisionRanked,
    /// Vision-driven expansion, full ranking, cluster-guided sampling.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Baseline,
        AblationMode::Language,
        AblationMode::Vision,
        AblationMode::VisionRanked,
        AblationMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Language => "language",
            AblationMode::Vision => "vision",
            AblationMode::VisionRanked => "vision-ranked",
            AblationMode::Full => "full",
        }
    }

    /// The base config with this mode's expansion, ranking and sampling.
    /// Naive sampling is top-L by relevancy.
    pub fn configure(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        let (expansion, ranking, sampling) = match self {
            AblationMode::Baseline => (ExpansionMode::None, RankingMode::Naive, SamplingMode::Naive),
            AblationMode::Language => (ExpansionMode::Language, RankingMode::Naive, SamplingMode::Naive),
            AblationMode::Vision => (ExpansionMode::Vision, RankingMode::Naive, SamplingMode::Naive),
            AblationMode::VisionRanked => (ExpansionMode::Vision, RankingMode::Full, SamplingMode::Naive),
            AblationMode::Full => (ExpansionMode::Vision, RankingMode::Full, SamplingMode::Cluster),
        };
        c.expansion.mode = expansion;
        c.ranking.mode = ranking;
        c.sampling.mode = sampling;
        if sampling == SamplingMode::Naive {
            c.sampling.deterministic = true;
        }
        c
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown ablation mode {s:?} (expected baseline, language, vision, vision-ranked or full)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub missing_recall: f64,
    pub false_rate: f64,
    pub group_coverage: f64,
    pub archive_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>10} {:>10} {:>10} {:>10}",
            "mode", "recall", "false", "coverage", "archive"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                r.mode.name(),
                r.missing_recall,
                r.false_rate,
                r.group_coverage,
                r.archive_recall
            )?;
        }
        Ok(())
    }
}

/// Curates under each mode and scores the result against ground truth.
pub fn run_ablation(
    inputs: &CurationInputs,
    base: &PipelineConfig,
    modes: &[AblationMode],
    truth: &[TruthRecord],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let config = mode.configure(base);
        let records = curate_records(inputs, &config)?;
        let report = synth::recovery_report(&records, truth, config.sampling.labels)?;
        rows.push(AblationRow {
            mode,
            missing_recall: report.missing_recall,
            false_rate: report.false_rate,
            group_coverage: report.group_coverage,
            archive_recall: report.archive_recall,
        });
    }
    Ok(AblationTable { rows })
}
