//! Pipeline configuration, loadable from a TOML file.
//!
//! ```toml
//! seed = 0
//! threads = 4
//!
//! [paths]
//! pairs = "pairs.jsonl"
//! images = "images.cemb"
//! concepts = "concepts.cemb"
//! concept_list = "concepts.txt"
//! lexicon = "lexicon.txt"
//! captions = "captions.cemb"   # language-driven expansion only
//! output = "curated.jsonl"
//!
//! [expansion]
//! mode = "vision"
//! n_retrieve = 16
//!
//! [ranking]
//! mode = "full"
//!
//! [sampling]
//! mode = "cluster"
//! deterministic = false
//! L = 3
//!
//! [kmeans]
//! max_iter = 100
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ExpansionMode;
use crate::ranking::RankingMode;
use crate::sampling::{SamplingMode, DEFAULT_LABELS, DEFAULT_MAX_ITER};
use crate::synth;

pub const DEFAULT_N_RETRIEVE: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub pairs: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub concepts: Option<PathBuf>,
    pub concept_list: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Paths {
    /// File names produced by the `synth` generator, rooted at `dir`.
    pub fn synth_layout(dir: &Path) -> Self {
        Paths {
            pairs: Some(dir.join(synth::PAIRS_FILE)),
            images: Some(dir.join(synth::IMAGES_FILE)),
            concepts: Some(dir.join(synth::CONCEPTS_FILE)),
            concept_list: Some(dir.join(synth::CONCEPT_LIST_FILE)),
            lexicon: Some(dir.join(synth::LEXICON_FILE)),
            captions: Some(dir.join(synth::CAPTIONS_FILE)),
            output: None,
        }
    }

    fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        let path = field
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("missing path: {name}")))?;
        if !path.exists() {
            return Err(Error::InvalidArgument(format!(
                "{name} file {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn pairs(&self) -> Result<&Path> {
        self.require(&self.pairs, "pairs")
    }
    pub fn images(&self) -> Result<&Path> {
        self.require(&self.images, "images")
    }
    pub fn concepts(&self) -> Result<&Path> {
        self.require(&self.concepts, "concepts")
    }
    pub fn concept_list(&self) -> Result<&Path> {
        self.require(&self.concept_list, "concept_list")
    }
    pub fn lexicon(&self) -> Result<&Path> {
        self.require(&self.lexicon, "lexicon")
    }
    pub fn captions(&self) -> Result<&Path> {
        self.require(&self.captions, "captions")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub mode: ExpansionMode,
    pub n_retrieve: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            mode: ExpansionMode::Vision,
            n_retrieve: DEFAULT_N_RETRIEVE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingConfig {
    pub mode: RankingMode,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            mode: RankingMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub deterministic: bool,
    #[serde(rename = "L", alias = "labels")]
    pub labels: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            mode: SamplingMode::Cluster,
            deterministic: false,
            labels: DEFAULT_LABELS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansConfig {
    pub max_iter: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub paths: Paths,
    pub expansion: ExpansionConfig,
    pub ranking: RankingConfig,
    pub sampling: SamplingConfig,
    pub kmeans: KmeansConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threads: 1,
            paths: Paths::default(),
            expansion: ExpansionConfig::default(),
            ranking: RankingConfig::default(),
            sampling: SamplingConfig::default(),
            kmeans: KmeansConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    /// Reads a TOML config. Relative paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            let p = &mut config.paths;
            for field in [
                &mut p.pairs,
                &mut p.images,
                &mut p.concepts,
                &mut p.concept_list,
                &mut p.lexicon,
                &mut p.captions,
                &mut p.output,
            ] {
                if let Some(rel) = field.as_ref().filter(|f| f.is_relative()) {
                    *field = Some(base.join(rel));
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks value ranges (paths are checked when inputs are opened).
    pub fn validate(&self) -> Result<()> {
        if self.sampling.labels == 0 {
            return Err(Error::InvalidArgument("sampling.L must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidArgument("threads must be at least 1".into()));
        }
        Ok(())
    }
}
