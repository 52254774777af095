//! Pair ingestion, concept extraction and the CEMB embedding format.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes at the start of every CEMB file.
pub const CEMB_MAGIC: &[u8; 4] = b"CEMB";
pub const CEMB_VERSION: u32 = 1;

/// Rows whose norm is already this close to 1 are kept bit-for-bit at load.
const UNIT_NORM_SLACK: f64 = 1e-6;
const DEGENERATE_NORM: f64 = 1e-12;

/// The vocabulary that caption concepts are matched against.
#[derive(Debug, Clone, Default)]
pub struct ConceptLexicon {
    entries: HashSet<String>,
    max_n: usize,
}

impl ConceptLexicon {
    /// Builds a lexicon from already-normalized entries.
    ///
    /// Entries must be non-empty, lowercase, free of leading/trailing
    /// whitespace and unique. Multi-word entries are single-space separated.
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut lexicon = ConceptLexicon::default();
        for entry in entries {
            let entry = entry.into();
            if entry.is_empty() {
                return Err(Error::Lexicon {
                    entry,
                    reason: "empty entry",
                });
            }
            if entry.trim() != entry {
                return Err(Error::Lexicon {
                    entry,
                    reason: "leading or trailing whitespace",
                });
            }
            if entry.to_lowercase() != entry {
                return Err(Error::Lexicon {
                    entry,
                    reason: "not lowercase",
                });
            }
            let tokens: Vec<&str> = entry.split_whitespace().collect();
            if tokens.join(" ") != entry {
                return Err(Error::Lexicon {
                    entry,
                    reason: "tokens must be separated by single spaces",
                });
            }
            lexicon.max_n = lexicon.max_n.max(tokens.len());
            if !lexicon.entries.insert(entry.clone()) {
                return Err(Error::Lexicon {
                    entry,
                    reason: "duplicate entry",
                });
            }
        }
        Ok(lexicon)
    }

    /// Reads a plain-text lexicon, one concept per line. Lines are trimmed,
    /// lowercased and whitespace-collapsed; blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .map(|line| {
                line.split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
                    .to_lowercase()
            })
            .filter(|line| !line.is_empty());
        ConceptLexicon::new(entries)
    }

    pub fn contains(&self, concept: &str) -> bool {
        self.entries.contains(concept)
    }

    /// Longest entry, in tokens.
    pub fn max_n(&self) -> usize {
        self.max_n
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in lexicographic order.
    pub fn sorted_entries(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.entries.iter().map(String::as_str).collect();
        out.sort_unstable();
        out
    }
}

fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split_whitespace()
        .map(|token| token.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|token| !token.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Scans a caption left to right, greedily matching the longest lexicon
/// n-gram at each position. Matched tokens are consumed; the result keeps
/// first-occurrence order without duplicates.
pub fn extract_concepts(caption: &str, lexicon: &ConceptLexicon) -> Vec<String> {
    let tokens = tokenize(caption);
    let mut found: Vec<String> = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let longest = lexicon.max_n().min(tokens.len() - pos);
        let matched = (1..=longest).rev().find_map(|n| {
            let candidate = tokens[pos..pos + n].join(" ");
            lexicon.contains(&candidate).then_some((candidate, n))
        });
        match matched {
            Some((concept, n)) => {
                if !found.contains(&concept) {
                    found.push(concept);
                }
                pos += n;
            }
            None => pos += 1,
        }
    }
    found
}

/// One image-text pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub caption: String,
    pub concepts: Vec<String>,
    /// Row of this pair in the image (and caption) embedding matrices.
    pub row: usize,
}

#[derive(Deserialize)]
struct RawPair {
    id: String,
    caption: String,
}

/// Parses JSON Lines pairs from a reader. Row `i` is line `i`.
pub fn read_pairs<R: BufRead>(reader: R, lexicon: &ConceptLexicon) -> Result<Vec<PairRecord>> {
    let mut records = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (row, line) in reader.lines().enumerate() {
        let line_no = row + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let raw: RawPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = first_seen.get(&raw.id) {
            return Err(Error::DuplicateId {
                id: raw.id,
                first_line,
                second_line: line_no,
            });
        }
        first_seen.insert(raw.id.clone(), line_no);
        let concepts = extract_concepts(&raw.caption, lexicon);
        records.push(PairRecord {
            id: raw.id,
            caption: raw.caption,
            concepts,
            row,
        });
    }
    Ok(records)
}

pub fn load_pairs(path: impl AsRef<Path>, lexicon: &ConceptLexicon) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pairs(BufReader::new(file), lexicon)
}

/// Writes pairs back out as JSON Lines (`id` and `caption` only).
pub fn write_pairs<W: Write>(mut writer: W, pairs: &[PairRecord]) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        id: &'a str,
        caption: &'a str,
    }
    for pair in pairs {
        serde_json::to_writer(
            &mut writer,
            &Out {
                id: &pair.id,
                caption: &pair.caption,
            },
        )?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// The pairs of a corpus with an id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pairs: Vec<PairRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Pairs must carry unique ids and `row == position`.
    pub fn new(pairs: Vec<PairRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            if pair.row != i {
                return Err(Error::InvalidArgument(format!(
                    "pair {:?} has row {} but sits at position {i}",
                    pair.id, pair.row
                )));
            }
            if let Some(prev) = by_id.insert(pair.id.clone(), i) {
                return Err(Error::DuplicateId {
                    id: pair.id.clone(),
                    first_line: prev + 1,
                    second_line: i + 1,
                });
            }
        }
        Ok(Corpus { pairs, by_id })
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<&PairRecord> {
        self.pairs.get(row)
    }

    pub fn by_id(&self, id: &str) -> Option<&PairRecord> {
        self.by_id.get(id).map(|&i| &self.pairs[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.id.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Image,
    ConceptText,
    CaptionText,
}

/// Row-major table of unit-norm `f32` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    kind: EmbeddingKind,
}

impl EmbeddingMatrix {
    /// Normalizes every row to unit length. Rows already within 1e-6 of unit
    /// norm are kept unchanged so that normalized data round-trips exactly.
    pub fn from_rows(kind: EmbeddingKind, dim: usize, mut data: Vec<f32>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be at least 2, got {dim}"
            )));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument(
                "embedding matrix must have at least one row".into(),
            ));
        }
        if data.len() % dim != 0 {
            return Err(Error::Dimension {
                expected: dim,
                found: data.len() % dim,
            });
        }
        for (row, chunk) in data.chunks_exact_mut(dim).enumerate() {
            let norm = chunk
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() || norm < DEGENERATE_NORM {
                return Err(Error::DegenerateRow { row });
            }
            if (norm - 1.0).abs() > UNIT_NORM_SLACK {
                for x in chunk.iter_mut() {
                    *x = (f64::from(*x) / norm) as f32;
                }
            }
        }
        Ok(EmbeddingMatrix { dim, data, kind })
    }

    pub fn from_vecs(kind: EmbeddingKind, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_rows(kind, dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Always false; a matrix holds at least one row.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writer.write_all(CEMB_MAGIC)?;
        writer.write_all(&CEMB_VERSION.to_le_bytes())?;
        writer.write_all(&(self.len() as u32).to_le_bytes())?;
        writer.write_all(&(self.dim as u32).to_le_bytes())?;
        for x in &self.data {
            writer.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(
        mut reader: R,
        kind: EmbeddingKind,
        expected_dim: Option<usize>,
    ) -> Result<Self> {
        let mut header = [0u8; 16];
        reader
            .read_exact(&mut header)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &header[0..4] != CEMB_MAGIC {
            return Err(Error::Format("bad magic, expected \"CEMB\"".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != CEMB_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        if count == 0 {
            return Err(Error::Format("row count is zero".into()));
        }
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(Error::Dimension {
                    expected,
                    found: dim,
                });
            }
        }
        let n_bytes = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        let mut bytes = Vec::new();
        reader
            .take(n_bytes as u64 + 1)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
        if bytes.len() < n_bytes {
            return Err(Error::Format(format!(
                "truncated payload: expected {n_bytes} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes.len() > n_bytes {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::from_rows(kind, dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        self.write_to(&mut writer)
            .and_then(|_| writer.flush())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
    kind: EmbeddingKind,
    expected_dim: Option<usize>,
) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::read_from(BufReader::new(file), kind, expected_dim)
}

/// Reads a concept-list file: one prompted string per line, aligned with the
/// rows of the concept-text CEMB file.
pub fn load_concept_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_owned()).collect())
}
