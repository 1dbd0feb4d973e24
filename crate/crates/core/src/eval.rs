//! Late fusion, classification metrics and loss-landscape slices.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::linalg::Matrix;
use crate::nn::{self, Batch, GradientSet, ModalityModel};

/// Per-modality class probabilities for the same `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub per_modality: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(per_modality: Vec<Matrix>, labels: Vec<usize>) -> Result<Self> {
        let first = per_modality
            .first()
            .ok_or_else(|| MieError::validation("prediction set needs at least one modality"))?;
        let shape = first.shape();
        if shape.0 != labels.len() {
            return Err(MieError::validation("prediction rows and labels differ"));
        }
        if per_modality.iter().any(|p| p.shape() != shape) {
            return Err(MieError::validation("per-modality predictions differ in shape"));
        }
        for p in &per_modality {
            for r in 0..p.rows() {
                let s: f64 = p.row(r).iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(MieError::validation(format!(
                        "prediction row {r} sums to {s}, not 1"
                    )));
                }
            }
        }
        Ok(PredictionSet {
            per_modality,
            labels,
        })
    }

    pub fn modalities(&self) -> usize {
        self.per_modality.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Average,
    /// Entropy-confidence weighting; a stand-in for an external weighting
    /// rule whose exact form is not published alongside this method.
    Weighted,
}

impl Fusion {
    pub fn apply(self, preds: &PredictionSet) -> Matrix {
        match self {
            Fusion::Average => fuse_average(preds),
            Fusion::Weighted => fuse_weighted(preds),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Average => "average",
            Fusion::Weighted => "weighted",
        })
    }
}

impl FromStr for Fusion {
    type Err = MieError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "average" => Ok(Fusion::Average),
            "weighted" => Ok(Fusion::Weighted),
            other => Err(MieError::validation(format!(
                "fusion must be average or weighted, got {other:?}"
            ))),
        }
    }
}

/// Row-wise mean of the per-modality predictions.
pub fn fuse_average(preds: &PredictionSet) -> Matrix {
    let m = preds.modalities() as f64;
    let mut out = preds.per_modality[0].clone();
    for p in &preds.per_modality[1..] {
        out.axpy(1.0, p).expect("shapes checked");
    }
    out.scale(1.0 / m);
    out
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Per-sample weights `softmax_j(−H(p_j))` with `H` the Shannon entropy in nats.
pub fn fusion_weights(rows: &[&[f64]]) -> Vec<f64> {
    let neg_h: Vec<f64> = rows.iter().map(|r| -entropy(r)).collect();
    let max = neg_h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = neg_h.iter().map(|h| (h - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Confidence-weighted fusion: sharper predictions get larger weight.
pub fn fuse_weighted(preds: &PredictionSet) -> Matrix {
    let (n, c) = preds.per_modality[0].shape();
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let rows: Vec<&[f64]> = preds.per_modality.iter().map(|p| p.row(i)).collect();
        let w = fusion_weights(&rows);
        let dst = out.row_mut(i);
        for (row, wj) in rows.iter().zip(&w) {
            for (d, x) in dst.iter_mut().zip(row.iter()) {
                *d += wj * x;
            }
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_inputs(pred: &Matrix, labels: &[usize]) -> Result<()> {
    if pred.rows() == 0 {
        return Err(MieError::validation("metrics need at least one sample"));
    }
    if pred.rows() != labels.len() {
        return Err(MieError::validation("prediction rows and labels differ"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= pred.cols()) {
        return Err(MieError::validation(format!("label {bad} out of range")));
    }
    Ok(())
}

pub fn accuracy(pred: &Matrix, labels: &[usize]) -> Result<f64> {
    check_inputs(pred, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(pred.row(i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over classes of average precision of the per-class score ranking.
///
/// Classes without positives are skipped with a warning.
pub fn mean_average_precision(pred: &Matrix, labels: &[usize]) -> Result<f64> {
    check_inputs(pred, labels)?;
    let n = labels.len();
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..pred.cols() {
        let positives = labels.iter().filter(|&&y| y == k).count();
        if positives == 0 {
            log::warn!("class {k} has no positive samples; excluded from MAP");
            continue;
        }
        order.sort_by(|&a, &b| pred.get(b, k).total_cmp(&pred.get(a, k)).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (r, &i) in order.iter().enumerate() {
            if labels[i] == k {
                hits += 1;
                ap += hits as f64 / (r + 1) as f64;
            }
        }
        total += ap / positives as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(MieError::validation("MAP undefined: no class has positives"));
    }
    Ok(total / counted as f64)
}

/// Unweighted mean of per-class F1 over argmax decisions.
pub fn macro_f1(pred: &Matrix, labels: &[usize]) -> Result<f64> {
    check_inputs(pred, labels)?;
    let c = pred.cols();
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        let p = argmax(pred.row(i));
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let sum: f64 = (0..c)
        .map(|k| {
            let precision = if tp[k] + fp[k] == 0 {
                0.0
            } else {
                tp[k] as f64 / (tp[k] + fp[k]) as f64
            };
            let recall = if tp[k] + fn_[k] == 0 {
                0.0
            } else {
                tp[k] as f64 / (tp[k] + fn_[k]) as f64
            };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok(sum / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub map: f64,
    pub macro_f1: f64,
}

impl Metrics {
    pub fn compute(pred: &Matrix, labels: &[usize]) -> Result<Self> {
        Ok(Metrics {
            accuracy: accuracy(pred, labels)?,
            map: mean_average_precision(pred, labels)?,
            macro_f1: macro_f1(pred, labels)?,
        })
    }
}

/// Fused and per-modality metrics for one fusion rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fusion: Fusion,
    pub fused: Metrics,
    pub per_modality: Vec<Metrics>,
}

impl MetricsReport {
    pub fn compute(preds: &PredictionSet, fusion: Fusion) -> Result<Self> {
        let fused = Metrics::compute(&fusion.apply(preds), &preds.labels)?;
        let per_modality = preds
            .per_modality
            .iter()
            .map(|p| Metrics::compute(p, &preds.labels))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport {
            fusion,
            fused,
            per_modality,
        })
    }
}

/// Softmax outputs of each modality model on its own features.
pub fn predict(models: &[ModalityModel], inputs: &[Matrix], labels: Vec<usize>) -> Result<PredictionSet> {
    if models.len() != inputs.len() {
        return Err(MieError::validation("one input block per model required"));
    }
    let per_modality = models
        .iter()
        .zip(inputs)
        .map(|(m, x)| nn::forward(m, x).map(|t| t.probs))
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(per_modality, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub alpha: f64,
    pub beta: f64,
    pub loss: f64,
}

/// Grid coordinates `−r … r` with an exact zero in the middle.
pub fn grid_axis(radius: f64, points: usize) -> Result<Vec<f64>> {
    if points == 0 || points % 2 == 0 {
        return Err(MieError::validation(format!(
            "landscape grid needs an odd number of points, got {points}"
        )));
    }
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(MieError::validation("landscape radius must be finite and >= 0"));
    }
    let half = (points / 2) as f64;
    Ok((0..points)
        .map(|i| {
            if half == 0.0 {
                0.0
            } else {
                radius * (i as f64 - half) / half
            }
        })
        .collect())
}

/// `L(θ + αd₁ + βd₂)` over the grid for a loss on flat parameters.
///
/// Rows enumerate `α` in the outer loop and `β` in the inner loop.
pub fn landscape_flat<F>(
    theta: &[f64],
    d1: &[f64],
    d2: &[f64],
    radius: f64,
    points: usize,
    loss: F,
) -> Result<Vec<LandscapePoint>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if d1.len() != theta.len() || d2.len() != theta.len() {
        return Err(MieError::validation("direction lengths differ from parameters"));
    }
    let axis = grid_axis(radius, points)?;
    let cells: Vec<(f64, f64)> = axis
        .iter()
        .flat_map(|&a| axis.iter().map(move |&b| (a, b)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(alpha, beta)| {
            let shifted: Vec<f64> = theta
                .iter()
                .zip(d1.iter().zip(d2))
                .map(|(t, (x, y))| t + alpha * x + beta * y)
                .collect();
            LandscapePoint {
                alpha,
                beta,
                loss: loss(&shifted),
            }
        })
        .collect())
}

/// Two seeded random directions over the weight matrices, the second
/// orthogonalised against the first, each rescaled layer by layer to the
/// norm of that layer's weights. Bias entries stay zero.
pub fn filter_normalized_directions(model: &ModalityModel, seed: u64) -> (GradientSet, GradientSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let mut d = GradientSet::zeros_like(model);
        for g in &mut d.layers {
            g.weights
                .as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = StandardNormal.sample(&mut rng));
        }
        d
    };
    let d1 = draw();
    let mut d2 = draw();
    let n1 = d1.dot(&d1);
    if n1 > 0.0 {
        let proj = d2.dot(&d1) / n1;
        d2.axpy(-proj, &d1).expect("same shape");
    }
    let normalize = |mut d: GradientSet| {
        for (g, l) in d.layers.iter_mut().zip(model.layers()) {
            let dn = g.weights.frobenius_norm();
            if dn > 0.0 {
                g.weights.scale(l.weights.frobenius_norm() / dn);
            }
        }
        d
    };
    (normalize(d1), normalize(d2))
}

/// Loss surface of a model around its parameters on one batch.
///
/// Non-finite losses are kept as they are rather than aborting.
pub fn landscape_slice(
    model: &ModalityModel,
    batch: &Batch,
    radius: f64,
    points: usize,
    seed: u64,
) -> Result<Vec<LandscapePoint>> {
    nn::batch_loss(model, batch)?;
    let (d1, d2) = filter_normalized_directions(model, seed);
    let theta = model.flatten();
    let template = model.clone();
    landscape_flat(&theta, &d1.flatten(), &d2.flatten(), radius, points, |p| {
        let mut m = template.clone();
        m.set_flat(p).expect("same length");
        nn::batch_loss(&m, batch).unwrap_or(f64::NAN)
    })
}

pub fn write_landscape_csv<W: Write>(points: &[LandscapePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "alpha,beta,loss")?;
    for p in points {
        writeln!(out, "{},{},{}", p.alpha, p.beta, p.loss)?;
    }
    Ok(())
}
