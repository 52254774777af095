//! Contrastive pre-training objectives evaluated on fixed embeddings.
//!
//! Four directional terms: image→caption and caption→image InfoNCE, plus the
//! multi-label pair where each image's prompted concept labels act as extra
//! positives. All four are built from one primitive, a softmax cross-entropy
//! over a candidate set with one or more positives, which also supplies the
//! analytic gradients. Embeddings are used as given (no renormalization), so
//! gradients are with respect to the raw coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial temperature commonly used for CLIP-style training.
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_GRAD_EPS: f64 = 1e-5;
const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    /// B image embeddings.
    pub img: Vec<Vec<f64>>,
    /// B caption embeddings.
    pub txt: Vec<Vec<f64>>,
    /// Per sample, its prompted-concept label embeddings (possibly none).
    pub labels: Vec<Vec<Vec<f64>>>,
    pub tau: f64,
}

impl ContrastiveBatch {
    /// Validates shapes, temperature and unit norms.
    pub fn new(
        img: Vec<Vec<f64>>,
        txt: Vec<Vec<f64>>,
        labels: Vec<Vec<Vec<f64>>>,
        tau: f64,
    ) -> Result<Self> {
        let batch = ContrastiveBatch { img, txt, labels, tau };
        batch.check_shapes()?;
        let rows = batch
            .img
            .iter()
            .chain(&batch.txt)
            .chain(batch.labels.iter().flatten());
        for (i, row) in rows.enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "embedding #{i} has norm {norm}, expected unit length"
                )));
            }
        }
        Ok(batch)
    }

    /// Like [`ContrastiveBatch::new`] but rescales every row to unit length.
    pub fn normalized(
        mut img: Vec<Vec<f64>>,
        mut txt: Vec<Vec<f64>>,
        mut labels: Vec<Vec<Vec<f64>>>,
        tau: f64,
    ) -> Result<Self> {
        let rows = img
            .iter_mut()
            .chain(txt.iter_mut())
            .chain(labels.iter_mut().flatten());
        for row in rows {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                return Err(Error::InvalidArgument("zero-norm embedding in batch".into()));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Self::new(img, txt, labels, tau)
    }

    pub fn batch_size(&self) -> usize {
        self.img.len()
    }

    pub fn dim(&self) -> usize {
        self.img.first().map_or(0, Vec::len)
    }

    pub fn label_count(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }

    fn check_shapes(&self) -> Result<()> {
        check_tau(self.tau)?;
        let b = self.img.len();
        if b == 0 {
            return Err(Error::InvalidArgument("batch is empty".into()));
        }
        if self.txt.len() != b || self.labels.len() != b {
            return Err(Error::InvalidArgument(format!(
                "batch has {b} images, {} captions and {} label lists",
                self.txt.len(),
                self.labels.len()
            )));
        }
        let d = self.dim();
        let rows = self.img.iter().chain(&self.txt).chain(self.labels.iter().flatten());
        for row in rows {
            if row.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: row.len(),
                });
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and positive, got {tau}"
        )));
    }
    Ok(())
}

/// Gradients of the total objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub img: Vec<Vec<f64>>,
    pub txt: Vec<Vec<f64>>,
    pub labels: Vec<Vec<Vec<f64>>>,
    pub tau: f64,
}

impl Gradients {
    fn zeros_like(batch: &ContrastiveBatch) -> Self {
        let zeros = |rows: &[Vec<f64>]| rows.iter().map(|r| vec![0.0; r.len()]).collect();
        Gradients {
            img: zeros(&batch.img),
            txt: zeros(&batch.txt),
            labels: batch.labels.iter().map(|l| zeros(l)).collect(),
            tau: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_i2l: f64,
    pub l_l2i: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grads: Option<Gradients>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over rows of the softmax cross-entropy with the diagonal as target.
pub fn directional_loss(logits: &[Vec<f64>]) -> f64 {
    let b = logits.len() as f64;
    logits
        .iter()
        .enumerate()
        .map(|(i, row)| log_sum_exp(row.iter().copied()) - row[i])
        .sum::<f64>()
        / b
}

#[derive(Clone, Copy)]
enum Slot {
    Img(usize),
    Txt(usize),
    Label(usize, usize),
}

struct Evaluator<'a> {
    img: &'a [Vec<f64>],
    txt: &'a [Vec<f64>],
    labels: &'a [Vec<Vec<f64>>],
    tau: f64,
    grads: Option<Gradients>,
}

impl<'a> Evaluator<'a> {
    fn vector(&self, slot: Slot) -> &'a [f64] {
        match slot {
            Slot::Img(i) => &self.img[i],
            Slot::Txt(i) => &self.txt[i],
            Slot::Label(i, l) => &self.labels[i][l],
        }
    }

    fn grad_mut(grads: &mut Gradients, slot: Slot) -> &mut [f64] {
        match slot {
            Slot::Img(i) => &mut grads.img[i],
            Slot::Txt(i) => &mut grads.txt[i],
            Slot::Label(i, l) => &mut grads.labels[i][l],
        }
    }

    /// `weight * (lse(all logits) - lse(positive logits))` where logit `c` is
    /// `anchor · candidate_c / tau`.
    fn cross_entropy(&mut self, anchor: Slot, candidates: &[Slot], positive: &[bool], weight: f64) -> f64 {
        let a = self.vector(anchor);
        let logits: Vec<f64> = candidates
            .iter()
            .map(|&c| dot(a, self.vector(c)) / self.tau)
            .collect();
        let lse_all = log_sum_exp(logits.iter().copied());
        let lse_pos = log_sum_exp(
            logits
                .iter()
                .zip(positive)
                .filter(|(_, &p)| p)
                .map(|(&v, _)| v),
        );
        let Some(grads) = self.grads.as_mut() else {
            return weight * (lse_all - lse_pos);
        };
        let tau = self.tau;
        for ((&cand, &logit), &pos) in candidates.iter().zip(&logits).zip(positive) {
            let mut coeff = (logit - lse_all).exp();
            if pos {
                coeff -= (logit - lse_pos).exp();
            }
            let coeff = weight * coeff;
            if coeff == 0.0 {
                continue;
            }
            let cv = match cand {
                Slot::Img(i) => &self.img[i],
                Slot::Txt(i) => &self.txt[i],
                Slot::Label(i, l) => &self.labels[i][l],
            };
            for (g, x) in Self::grad_mut(grads, anchor).iter_mut().zip(cv) {
                *g += coeff * x / tau;
            }
            for (g, x) in Self::grad_mut(grads, cand).iter_mut().zip(a) {
                *g += coeff * x / tau;
            }
            grads.tau -= coeff * logit / tau;
        }
        weight * (lse_all - lse_pos)
    }

    fn info_nce(&mut self) -> (f64, f64) {
        let b = self.img.len();
        let w = 1.0 / b as f64;
        let txt: Vec<Slot> = (0..b).map(Slot::Txt).collect();
        let img: Vec<Slot> = (0..b).map(Slot::Img).collect();
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for i in 0..b {
            let positive: Vec<bool> = (0..b).map(|j| j == i).collect();
            i2t += self.cross_entropy(Slot::Img(i), &txt, &positive, w);
            t2i += self.cross_entropy(Slot::Txt(i), &img, &positive, w);
        }
        (i2t, t2i)
    }

    fn multi_label(&mut self) -> Result<(f64, f64)> {
        let b = self.img.len();
        let labelled: Vec<usize> = (0..b).filter(|&i| !self.labels[i].is_empty()).collect();
        if labelled.is_empty() {
            return Err(Error::UndefinedLoss);
        }
        let all_labels: Vec<Slot> = labelled
            .iter()
            .flat_map(|&j| (0..self.labels[j].len()).map(move |l| Slot::Label(j, l)))
            .collect();
        let img: Vec<Slot> = (0..b).map(Slot::Img).collect();
        let w_i2l = 1.0 / labelled.len() as f64;
        let w_l2i = 1.0 / all_labels.len() as f64;
        let mut i2l = 0.0;
        let mut l2i = 0.0;
        for &i in &labelled {
            let own: Vec<bool> = all_labels
                .iter()
                .map(|s| matches!(s, Slot::Label(j, _) if *j == i))
                .collect();
            i2l += self.cross_entropy(Slot::Img(i), &all_labels, &own, w_i2l);
            let positive: Vec<bool> = (0..b).map(|j| j == i).collect();
            for l in 0..self.labels[i].len() {
                l2i += self.cross_entropy(Slot::Label(i, l), &img, &positive, w_l2i);
            }
        }
        Ok((i2l, l2i))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_rows(name: &str, rows: &[Vec<f64>], dim: usize) -> Result<()> {
    for row in rows {
        if row.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: row.len(),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} is empty")));
    }
    Ok(())
}

/// Image→caption and caption→image InfoNCE.
pub fn info_nce(img: &[Vec<f64>], txt: &[Vec<f64>], tau: f64) -> Result<(f64, f64)> {
    check_tau(tau)?;
    let dim = img.first().map_or(0, Vec::len);
    check_rows("image batch", img, dim)?;
    check_rows("caption batch", txt, dim)?;
    if img.len() != txt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images vs {} captions",
            img.len(),
            txt.len()
        )));
    }
    let mut eval = Evaluator {
        img,
        txt,
        labels: &[],
        tau,
        grads: None,
    };
    Ok(eval.info_nce())
}

/// Image→labels and labels→image terms. Samples without labels are left out
/// of the averages; label→image is averaged over the realized label count.
pub fn multi_label_loss(img: &[Vec<f64>], labels: &[Vec<Vec<f64>>], tau: f64) -> Result<(f64, f64)> {
    check_tau(tau)?;
    let dim = img.first().map_or(0, Vec::len);
    check_rows("image batch", img, dim)?;
    if labels.len() != img.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images vs {} label lists",
            img.len(),
            labels.len()
        )));
    }
    for per_sample in labels {
        for row in per_sample {
            if row.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: row.len(),
                });
            }
        }
    }
    let mut eval = Evaluator {
        img,
        txt: &[],
        labels,
        tau,
        grads: None,
    };
    eval.multi_label()
}

fn evaluate(batch: &ContrastiveBatch, with_grads: bool) -> Result<LossReport> {
    batch.check_shapes()?;
    let mut eval = Evaluator {
        img: &batch.img,
        txt: &batch.txt,
        labels: &batch.labels,
        tau: batch.tau,
        grads: with_grads.then(|| Gradients::zeros_like(batch)),
    };
    let (l_i2t, l_t2i) = eval.info_nce();
    let (l_i2l, l_l2i) = eval.multi_label()?;
    Ok(LossReport {
        l_i2t,
        l_t2i,
        l_i2l,
        l_l2i,
        total: l_i2t + l_t2i + l_i2l + l_l2i,
        grads: eval.grads,
    })
}

/// All four directional terms and their sum.
pub fn total_loss(batch: &ContrastiveBatch) -> Result<LossReport> {
    evaluate(batch, false)
}

/// [`total_loss`] plus analytic gradients with respect to every embedding
/// coordinate and the temperature.
pub fn loss_with_grads(batch: &ContrastiveBatch) -> Result<LossReport> {
    evaluate(batch, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `img[1][3]` or `tau`.
    pub worst: String,
    pub coordinates: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// Error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check(batch: &ContrastiveBatch, eps: f64) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {eps}")));
    }
    let report = loss_with_grads(batch)?;
    let grads = report.grads.expect("gradients requested");
    let mut probe = batch.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        coordinates: 0,
    };
    let mut record = |name: String, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        result.coordinates += 1;
        if err > result.max_rel_error || result.worst.is_empty() {
            result.max_rel_error = err;
            result.worst = name;
        }
    };

    let central = |probe: &mut ContrastiveBatch, set: &dyn Fn(&mut ContrastiveBatch, f64)| -> Result<f64> {
        set(probe, eps);
        let plus = total_loss(probe)?.total;
        set(probe, -2.0 * eps);
        let minus = total_loss(probe)?.total;
        set(probe, eps);
        Ok((plus - minus) / (2.0 * eps))
    };

    for i in 0..batch.img.len() {
        for k in 0..batch.dim() {
            let n = central(&mut probe, &|b, h| b.img[i][k] += h)?;
            record(format!("img[{i}][{k}]"), grads.img[i][k], n);
            let n = central(&mut probe, &|b, h| b.txt[i][k] += h)?;
            record(format!("txt[{i}][{k}]"), grads.txt[i][k], n);
        }
        for l in 0..batch.labels[i].len() {
            for k in 0..batch.dim() {
                let n = central(&mut probe, &|b, h| b.labels[i][l][k] += h)?;
                record(format!("labels[{i}][{l}][{k}]"), grads.labels[i][l][k], n);
            }
        }
    }
    let n = central(&mut probe, &|b, h| b.tau += h)?;
    record("tau".into(), grads.tau, n);
    Ok(result)
}
