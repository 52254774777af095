//! Concept selection: k-means over concept text embeddings, then one draw per
//! cluster, or plain relevancy-driven selection.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expansion::{ArchiveEntry, ConceptArchive};
use crate::ranking::{by_relevancy, ConceptTable};

pub const DEFAULT_LABELS: usize = 3;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Seed for one (anchor, stage) stream, independent of scheduling order.
pub fn derive_seed(global: u64, anchor_id: &str, stage: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(global.to_le_bytes())
        .chain_update((anchor_id.len() as u64).to_le_bytes())
        .chain_update(anchor_id.as_bytes())
        .chain_update(stage.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Effective number of clusters, `min(k, m)`.
    pub k: usize,
    /// Concept name per point; empty when clustering raw vectors.
    pub labels: Vec<String>,
    /// Cluster id per point.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each centroid update.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, concept: &str) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| l == concept)
            .map(|i| self.assignment[i])
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest cluster id.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let m = points.len();
    let mut centroids = vec![points[rng.random_range(0..m)].clone()];
    let mut dist2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&dist2) {
            Ok(weights) => weights.sample(rng),
            // Every remaining point coincides with a centre.
            Err(_) => rng.random_range(0..m),
        };
        centroids.push(points[next].clone());
        for (d, p) in dist2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn centroid_means(points: &[Vec<f64>], assignment: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    for ((centroid, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
        if count > 0 {
            *centroid = sum.into_iter().map(|s| s / count as f64).collect();
        }
    }
}

fn inertia(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from a cluster that can spare it.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &c in assignment.iter() {
        sizes[c] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut farthest: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i];
            if sizes[c] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[c]);
            if farthest.is_none_or(|(_, best)| d > best) {
                farthest = Some((i, d));
            }
        }
        let Some((i, _)) = farthest else { break };
        sizes[assignment[i]] -= 1;
        sizes[empty] += 1;
        assignment[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Iterates until the assignment stops changing or `max_iter` updates have
/// run. Empty clusters are refilled by stealing the point farthest from its
/// centroid, so every one of the `min(k, m)` clusters ends up non-empty.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterAssignment> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("k-means needs at least one point".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            found: bad.len(),
        });
    }
    let k = k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);

    let mut previous: Option<Vec<usize>> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut assignment, &mut centroids);
        if previous.as_ref() == Some(&assignment) {
            converged = true;
            break;
        }
        if iterations == max_iter {
            // Out of budget: keep the centroids consistent with this assignment.
            centroid_means(points, &assignment, &mut centroids);
            previous = Some(assignment);
            break;
        }
        centroid_means(points, &assignment, &mut centroids);
        history.push(inertia(points, &assignment, &centroids));
        iterations += 1;
        previous = Some(assignment);
    }
    let assignment = previous.expect("at least one assignment pass");
    Ok(ClusterAssignment {
        k,
        labels: Vec::new(),
        inertia: inertia(points, &assignment, &centroids),
        assignment,
        centroids,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Clusters the archive's concepts by their prompted text embeddings.
pub fn cluster_archive(
    archive: &ConceptArchive,
    concepts: &ConceptTable,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterAssignment> {
    let points = archive
        .entries
        .iter()
        .map(|e| {
            concepts
                .embedding(&e.concept)
                .map(|v| v.iter().map(|&x| f64::from(x)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut clusters = kmeans(&points, k, seed, max_iter)?;
    clusters.labels = archive.entries.iter().map(|e| e.concept.clone()).collect();
    Ok(clusters)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Cluster,
    Naive,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Cluster => "cluster",
            SamplingMode::Naive => "naive",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(SamplingMode::Cluster),
            "naive" => Ok(SamplingMode::Naive),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampling mode {other:?} (expected cluster or naive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub concept: String,
    pub cluster: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledConcepts {
    pub anchor_id: String,
    pub picks: Vec<Pick>,
    pub mode: SamplingMode,
    pub seed: u64,
}

impl SampledConcepts {
    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.picks.iter().map(|p| p.concept.as_str())
    }
}

fn relevancy(entry: &ArchiveEntry) -> f64 {
    entry.score.map_or(f64::NAN, |s| s.s)
}

fn require_scored(archive: &ConceptArchive, labels: usize) -> Result<()> {
    if labels == 0 {
        return Err(Error::InvalidArgument("number of labels must be at least 1".into()));
    }
    if !archive.is_ranked() {
        return Err(Error::Unscored(archive.anchor_id.clone()));
    }
    Ok(())
}

/// Index drawn with probability proportional to `max(s, 0)`; uniform when
/// every clipped weight is zero.
fn proportional_draw(scores: &[f64], rng: &mut impl Rng) -> usize {
    let weights: Vec<f64> = scores.iter().map(|s| s.max(0.0)).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => rng.random_range(0..scores.len()),
    }
}

/// Picks one concept from each non-empty cluster, in cluster id order.
pub fn cluster_guided_sample(
    archive: &ConceptArchive,
    clusters: &ClusterAssignment,
    labels: usize,
    seed: u64,
    deterministic: bool,
) -> Result<SampledConcepts> {
    require_scored(archive, labels)?;
    let mut members: Vec<Vec<&ArchiveEntry>> = vec![Vec::new(); clusters.k];
    for entry in &archive.entries {
        let cluster = clusters.cluster_of(&entry.concept).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "concept {:?} has no cluster assignment",
                entry.concept
            ))
        })?;
        members[cluster].push(entry);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for (cluster, group) in members.iter().enumerate() {
        if picks.len() == labels {
            break;
        }
        if group.is_empty() {
            continue;
        }
        let chosen = if deterministic {
            group
                .iter()
                .min_by(|a, b| by_relevancy(&a.concept, relevancy(a), &b.concept, relevancy(b)))
                .unwrap()
        } else {
            let scores: Vec<f64> = group.iter().map(|e| relevancy(e)).collect();
            &group[proportional_draw(&scores, &mut rng)]
        };
        picks.push(Pick {
            concept: chosen.concept.clone(),
            cluster: Some(cluster),
            score: relevancy(chosen),
        });
    }
    Ok(SampledConcepts {
        anchor_id: archive.anchor_id.clone(),
        picks,
        mode: SamplingMode::Cluster,
        seed,
    })
}

/// Relevancy-only selection: top-`labels` when deterministic, otherwise
/// sequential proportional draws without replacement.
pub fn naive_sample(
    archive: &ConceptArchive,
    labels: usize,
    seed: u64,
    deterministic: bool,
) -> Result<SampledConcepts> {
    require_scored(archive, labels)?;
    let mut pool: Vec<&ArchiveEntry> = archive.entries.iter().collect();
    pool.sort_by(|a, b| by_relevancy(&a.concept, relevancy(a), &b.concept, relevancy(b)));
    let take = labels.min(pool.len());
    let chosen: Vec<&ArchiveEntry> = if deterministic {
        pool.truncate(take);
        pool
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(take);
        for _ in 0..take {
            let scores: Vec<f64> = pool.iter().map(|e| relevancy(e)).collect();
            out.push(pool.remove(proportional_draw(&scores, &mut rng)));
        }
        out
    };
    Ok(SampledConcepts {
        anchor_id: archive.anchor_id.clone(),
        picks: chosen
            .into_iter()
            .map(|e| Pick {
                concept: e.concept.clone(),
                cluster: None,
                score: relevancy(e),
            })
            .collect(),
        mode: SamplingMode::Naive,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::ExpansionMode;
    use crate::ranking::RelevancyScore;

    fn scored(concepts: &[(&str, f64)]) -> ConceptArchive {
        ConceptArchive {
            anchor_id: "a".into(),
            anchor_row: 0,
            mode: ExpansionMode::Vision,
            n_requested: 0,
            retrieved_rows: vec![],
            entries: concepts
                .iter()
                .map(|&(c, s)| ArchiveEntry {
                    concept: c.into(),
                    support_rows: vec![],
                    from_anchor_caption: false,
                    score: Some(RelevancyScore { s_a: s, s_b: 0.0, s }),
                })
                .collect(),
        }
    }

    fn manual_clusters(labels: &[&str], assignment: &[usize], k: usize) -> ClusterAssignment {
        ClusterAssignment {
            k,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            assignment: assignment.to_vec(),
            centroids: vec![],
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let c = kmeans(&pts, 1, 7, 100).unwrap();
        assert_eq!(c.assignment, vec![0, 0, 0]);
        assert!((c.centroids[0][0] - 0.0).abs() < 1e-15);
        assert!((c.centroids[0][1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kmeans_k_equals_m_has_zero_inertia() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        for seed in 0..20 {
            let c = kmeans(&pts, 4, seed, 100).unwrap();
            assert_eq!(c.inertia, 0.0);
            let mut sorted = c.assignment.clone();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn kmeans_clamps_k_and_handles_duplicates() {
        let pts = vec![vec![1.0, 0.0]; 3];
        let c = kmeans(&pts, 5, 1, 100).unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.cluster_sizes(), vec![1, 1, 1]);
        assert!(kmeans(&[], 2, 0, 10).is_err());
        assert!(kmeans(&pts, 0, 0, 10).is_err());
    }

    #[test]
    fn deterministic_cluster_pick_is_argmax() {
        let archive = scored(&[("grass", 1.8), ("lawn", 1.2)]);
        let clusters = manual_clusters(&["grass", "lawn"], &[0, 0], 1);
        let s = cluster_guided_sample(&archive, &clusters, 3, 0, true).unwrap();
        assert_eq!(s.concepts().collect::<Vec<_>>(), vec!["grass"]);
    }

    #[test]
    fn distinct_clusters_all_returned() {
        let archive = scored(&[("a", 1.0), ("b", 0.5), ("c", 0.1)]);
        let clusters = manual_clusters(&["a", "b", "c"], &[2, 0, 1], 3);
        let s = cluster_guided_sample(&archive, &clusters, 3, 9, false).unwrap();
        assert_eq!(s.concepts().collect::<Vec<_>>(), vec!["b", "c", "a"]);
    }

    #[test]
    fn naive_deterministic_top_l() {
        let archive = scored(&[("z", 0.5), ("x", 2.0), ("y", 1.0)]);
        let s = naive_sample(&archive, 2, 0, true).unwrap();
        assert_eq!(s.concepts().collect::<Vec<_>>(), vec!["x", "y"]);
        let small = scored(&[("p", 1.0), ("q", 0.2)]);
        assert_eq!(naive_sample(&small, 3, 0, false).unwrap().picks.len(), 2);
    }

    #[test]
    fn unscored_archive_is_rejected() {
        let mut archive = scored(&[("a", 1.0)]);
        archive.entries[0].score = None;
        assert!(matches!(naive_sample(&archive, 1, 0, true), Err(Error::Unscored(_))));
        let clusters = manual_clusters(&["a"], &[0], 1);
        assert!(cluster_guided_sample(&archive, &clusters, 1, 0, true).is_err());
    }

    #[test]
    fn zero_scores_fall_back_to_uniform() {
        let archive = scored(&[("a", 0.0), ("b", -1.0)]);
        let s = naive_sample(&archive, 2, 3, false).unwrap();
        assert_eq!(s.picks.len(), 2);
    }

    #[test]
    fn derived_seeds_differ_by_anchor_and_stage() {
        assert_eq!(derive_seed(1, "a", "x"), derive_seed(1, "a", "x"));
        assert_ne!(derive_seed(1, "a", "x"), derive_seed(1, "b", "x"));
        assert_ne!(derive_seed(1, "a", "x"), derive_seed(1, "a", "y"));
        assert_ne!(derive_seed(1, "a", "x"), derive_seed(2, "a", "x"));
    }
}
