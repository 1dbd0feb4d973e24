//! Alternating per-modality training.
//!
//! Each outer iteration visits the modalities in order. Modality `j` trains
//! for a phase of minibatch steps using SAM gradients whose weight gradients
//! are left-multiplied by the modification matrices of its cyclic
//! predecessor `k`. After the phase a covariance pass over `j`'s training
//! batches rebuilds `j`'s own matrices for its successor to use.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, MultimodalDataset, Split};
use crate::error::{MieError, Result};
use crate::eval::{self, Fusion, MetricsReport, PredictionSet};
use crate::gradmod::{self, GmConfig, GradModState, SingularReport};
use crate::nn::{self, Architecture, GradientSet, ModalityModel};
use crate::sam::{self, SamConfig};
use crate::seed::derive_seed;

/// Cyclic predecessor `k = ((j + m − 2) mod m) + 1`, both 1-based.
pub fn modality_index(j: usize, m: usize) -> Result<usize> {
    if m == 0 || j == 0 || j > m {
        return Err(MieError::validation(format!(
            "modality index j = {j} out of range 1..={m}"
        )));
    }
    Ok((j + m - 2) % m + 1)
}

/// Which ordered pairs `(source k, target j)` may modify gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GmMask {
    /// Every modality modifies its successor.
    Full,
    /// Only the listed 0-based `(source, target)` pairs.
    Pairs(Vec<(usize, usize)>),
}

impl GmMask {
    pub fn allows(&self, source: usize, target: usize) -> bool {
        match self {
            GmMask::Full => true,
            GmMask::Pairs(p) => p.contains(&(source, target)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub sam_on: bool,
    pub gm_on: bool,
    pub gm_mask: GmMask,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            sam_on: true,
            gm_on: true,
            gm_mask: GmMask::Full,
        }
    }
}

impl Ablation {
    pub fn baseline() -> Self {
        Ablation {
            sam_on: false,
            gm_on: false,
            gm_mask: GmMask::Full,
        }
    }

    /// Short run label: `baseline`, `sam_only`, `gm_only` or `mie`.
    pub fn label(&self) -> &'static str {
        match (self.sam_on, self.gm_on) {
            (false, false) => "baseline",
            (true, false) => "sam_only",
            (false, true) => "gm_only",
            (true, true) => "mie",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub out_iters: usize,
    /// Steps per phase; `None` covers the training split once.
    pub inner_iters: Option<usize>,
    pub batch_size: usize,
    /// Learning rate per modality; a single entry applies to all.
    pub lr: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Phases without a 1e-4 loss improvement before the rate is divided
    /// by 10; `0` disables decay.
    pub patience: usize,
    /// SAM radius per modality; a single entry applies to all.
    pub rho: Vec<f64>,
    pub zero_grad_threshold: f64,
    pub gm: GmConfig,
    pub ablation: Ablation,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            out_iters: 5,
            inner_iters: None,
            batch_size: 12,
            lr: vec![1e-2],
            momentum: 0.9,
            weight_decay: 1e-4,
            patience: 2,
            rho: vec![SamConfig::default().rho],
            zero_grad_threshold: SamConfig::default().zero_grad_threshold,
            gm: GmConfig::default(),
            ablation: Ablation::default(),
            hidden_dim: 128,
            feature_dim: 64,
            seed: 0,
        }
    }
}

/// Improvement a phase loss must make to reset the plateau counter.
pub const PLATEAU_MIN_DELTA: f64 = 1e-4;

fn per_modality(values: &[f64], j: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[j]
    }
}

impl TrainConfig {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        if self.out_iters == 0 {
            return Err(MieError::validation("train.out_iters must be >= 1"));
        }
        if self.inner_iters == Some(0) {
            return Err(MieError::validation("train.inner_iters must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(MieError::validation("train.batch_size must be >= 1"));
        }
        for (name, v) in [("train.lr", &self.lr), ("sam.rho", &self.rho)] {
            if v.len() != 1 && v.len() != modalities {
                return Err(MieError::validation(format!(
                    "{name} needs 1 or {modalities} entries, got {}",
                    v.len()
                )));
            }
        }
        if self.lr.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(MieError::validation("train.lr entries must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MieError::validation("train.momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(MieError::validation("train.weight_decay must be >= 0"));
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(MieError::validation("model dimensions must be >= 1"));
        }
        for j in 0..modalities {
            self.sam_config(j).validate()?;
        }
        if let GmMask::Pairs(pairs) = &self.ablation.gm_mask {
            if let Some(p) = pairs.iter().find(|(k, j)| *k >= modalities || *j >= modalities) {
                return Err(MieError::validation(format!(
                    "gm.mask pair {:?} refers to a missing modality",
                    (p.0 + 1, p.1 + 1)
                )));
            }
        }
        self.gm.validate()
    }

    pub fn sam_config(&self, j: usize) -> SamConfig {
        SamConfig {
            rho: per_modality(&self.rho, j),
            zero_grad_threshold: self.zero_grad_threshold,
        }
    }

    pub fn learning_rate(&self, j: usize) -> f64 {
        per_modality(&self.lr, j)
    }
}

/// SGD step `v ← μv + (g + λθ)`, `θ ← θ − ηv`.
pub fn sgd_step(
    model: &mut ModalityModel,
    grad: &GradientSet,
    velocity: &mut GradientSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    grad.check_congruent(model)?;
    velocity.check_congruent(model)?;
    for ((layer, g), v) in model
        .layers_mut()
        .iter_mut()
        .zip(&grad.layers)
        .zip(&mut velocity.layers)
    {
        let params = layer
            .weights
            .as_mut_slice()
            .iter_mut()
            .chain(layer.biases.iter_mut());
        let grads = g.weights.as_slice().iter().chain(g.biases.iter());
        let vels = v.weights.as_mut_slice().iter_mut().chain(v.biases.iter_mut());
        for ((p, &gi), vi) in params.zip(grads).zip(vels) {
            let step = gi + weight_decay * *p;
            *vi = momentum * *vi + step;
            *p -= lr * *vi;
        }
    }
    if !model.is_finite() {
        return Err(MieError::numeric(format!(
            "non-finite parameters after SGD step (lr {lr}, gradient norm {:e})",
            grad.norm()
        )));
    }
    Ok(())
}

/// One row of the phase trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub outer_iter: usize,
    /// 1-based.
    pub modality_index: usize,
    pub phase_end_multi_accuracy: f64,
    pub phase_end_per_modality_accuracy: Vec<f64>,
    pub mean_train_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
struct Plateau {
    best: f64,
    stale: usize,
}

/// Mutable training state for one run.
pub struct Trainer<'a> {
    dataset: &'a MultimodalDataset,
    config: TrainConfig,
    models: Vec<ModalityModel>,
    velocity: Vec<GradientSet>,
    gm_states: Vec<GradModState>,
    lr: Vec<f64>,
    plateau: Vec<Plateau>,
    trace: Vec<PhaseRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a MultimodalDataset, config: TrainConfig) -> Result<Self> {
        let m = dataset.modalities();
        config.validate(m)?;
        for split in [Split::Train, Split::Test] {
            if dataset.split_indices(split).is_empty() {
                return Err(MieError::validation(format!("dataset has an empty {split:?} split")));
            }
        }
        let models: Vec<ModalityModel> = (0..m)
            .map(|j| {
                let arch = Architecture {
                    input_dim: dataset.dims()[j],
                    hidden_dim: config.hidden_dim,
                    feature_dim: config.feature_dim,
                    classes: dataset.classes(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[10, j as u64]));
                ModalityModel::new(arch, &mut rng)
            })
            .collect();
        Self::with_models(dataset, config, models)
    }

    /// Starts from the given parameters instead of a fresh initialisation.
    pub fn with_models(
        dataset: &'a MultimodalDataset,
        config: TrainConfig,
        models: Vec<ModalityModel>,
    ) -> Result<Self> {
        let m = dataset.modalities();
        config.validate(m)?;
        if models.len() != m {
            return Err(MieError::validation("one model per modality required"));
        }
        for (j, model) in models.iter().enumerate() {
            if model.input_dim() != dataset.dims()[j] || model.classes() != dataset.classes() {
                return Err(MieError::validation(format!(
                    "model {j} does not match the dataset dimensions"
                )));
            }
        }
        let velocity = models.iter().map(GradientSet::zeros_like).collect();
        let gm_states = models
            .iter()
            .map(|model| GradModState::for_model(model, &config.gm.scope))
            .collect();
        let lr = (0..m).map(|j| config.learning_rate(j)).collect();
        Ok(Trainer {
            dataset,
            models,
            velocity,
            gm_states,
            lr,
            plateau: vec![
                Plateau {
                    best: f64::INFINITY,
                    stale: 0
                };
                m
            ],
            trace: Vec::new(),
            config,
        })
    }

    pub fn models(&self) -> &[ModalityModel] {
        &self.models
    }

    pub fn gm_states(&self) -> &[GradModState] {
        &self.gm_states
    }

    pub fn trace(&self) -> &[PhaseRecord] {
        &self.trace
    }

    /// The SAM (or plain) gradient for modality `j` on a batch, after
    /// modification by the predecessor's matrices. Returns the loss at θ too.
    pub fn modified_gradient(&self, j: usize, idx: &[usize]) -> Result<(f64, GradientSet)> {
        let batch = self.dataset.batch(j, idx)?;
        let model = &self.models[j];
        let (loss, mut grad) = if self.config.ablation.sam_on {
            sam::sam_loss_and_gradient(model, &batch, &self.config.sam_config(j))?
        } else {
            nn::loss_and_gradient(model, &batch)?
        };
        let m = self.models.len();
        let k = modality_index(j + 1, m)? - 1;
        let ab = &self.config.ablation;
        if ab.gm_on && (k == j || ab.gm_mask.allows(k, j)) {
            for lm in self.gm_states[k].layers() {
                let Some(t) = lm.t_matrix() else { continue };
                let Some(g) = grad.layers.get_mut(lm.layer) else { continue };
                // only layers whose input width matches across modalities
                if g.weights.rows() != t.rows() {
                    continue;
                }
                g.weights = gradmod::modify(t, &g.weights)?;
            }
        }
        Ok((loss, grad))
    }

    /// One optimisation step of modality `j`; returns the batch loss at θ.
    pub fn step(&mut self, j: usize, idx: &[usize]) -> Result<f64> {
        let (loss, grad) = self.modified_gradient(j, idx)?;
        sgd_step(
            &mut self.models[j],
            &grad,
            &mut self.velocity[j],
            self.lr[j],
            self.config.momentum,
            self.config.weight_decay,
        )?;
        Ok(loss)
    }

    /// Inner loop, covariance pass and matrix rebuild for modality `j`.
    pub fn phase(&mut self, outer: usize, j: usize) -> Result<PhaseRecord> {
        let cfg = &self.config;
        let order = data::batches(
            self.dataset,
            Split::Train,
            cfg.batch_size,
            derive_seed(cfg.seed, &[20, outer as u64, j as u64]),
        )?;
        let steps = cfg.inner_iters.unwrap_or(order.len());
        let mut loss_sum = 0.0;
        for t in 0..steps {
            loss_sum += self.step(j, &order[t % order.len()])?;
        }
        let mean_loss = loss_sum / steps as f64;
        let lr_used = self.lr[j];
        self.update_plateau(j, mean_loss);

        if !self.gm_states[j].layers().is_empty() {
            for idx in data::fixed_batches(self.dataset, Split::Train, self.config.batch_size)? {
                let batch = self.dataset.batch(j, &idx)?;
                let trace = nn::forward(&self.models[j], &batch.inputs)?;
                self.gm_states[j].accumulate_trace(&trace)?;
            }
            self.gm_states[j].build(&self.config.gm)?;
        }

        let preds = self.predictions(Split::Test)?;
        let fused = eval::fuse_average(&preds);
        let record = PhaseRecord {
            outer_iter: outer + 1,
            modality_index: j + 1,
            phase_end_multi_accuracy: eval::accuracy(&fused, &preds.labels)?,
            phase_end_per_modality_accuracy: preds
                .per_modality
                .iter()
                .map(|p| eval::accuracy(p, &preds.labels))
                .collect::<Result<_>>()?,
            mean_train_loss: mean_loss,
            learning_rate: lr_used,
        };
        self.trace.push(record.clone());
        Ok(record)
    }

    fn update_plateau(&mut self, j: usize, loss: f64) {
        if self.config.patience == 0 {
            return;
        }
        let p = &mut self.plateau[j];
        if p.best - loss >= PLATEAU_MIN_DELTA {
            p.best = loss;
            p.stale = 0;
        } else {
            p.stale += 1;
            if p.stale >= self.config.patience {
                self.lr[j] /= 10.0;
                p.stale = 0;
                log::debug!("modality {}: loss plateau, lr -> {}", j + 1, self.lr[j]);
            }
        }
    }

    pub fn predictions(&self, split: Split) -> Result<PredictionSet> {
        let idx = self.dataset.split_indices(split);
        let inputs: Vec<_> = (0..self.models.len())
            .map(|j| self.dataset.features(j).select_rows(&idx))
            .collect();
        eval::predict(&self.models, &inputs, self.dataset.labels_of(&idx))
    }

    /// Runs every phase and evaluates on the test split.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let m = self.models.len();
        for outer in 0..self.config.out_iters {
            for j in 0..m {
                let rec = self.phase(outer, j)?;
                log::info!(
                    "outer {} modality {}: loss {:.4}, fused acc {:.4}",
                    rec.outer_iter,
                    rec.modality_index,
                    rec.mean_train_loss,
                    rec.phase_end_multi_accuracy
                );
            }
        }
        let preds = self.predictions(Split::Test)?;
        let metrics = [Fusion::Average, Fusion::Weighted]
            .iter()
            .map(|&f| MetricsReport::compute(&preds, f))
            .collect::<Result<Vec<_>>>()?;
        let singular = if self.gm_states.iter().all(|s| !s.layers().is_empty()) {
            gradmod::singular_report(&self.gm_states)?
        } else {
            Vec::new()
        };
        Ok(TrainOutcome {
            models: self.models,
            trace: self.trace,
            metrics,
            singular,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Vec<ModalityModel>,
    pub trace: Vec<PhaseRecord>,
    /// Test-split metrics for average and weighted fusion, in that order.
    pub metrics: Vec<MetricsReport>,
    /// Spectrum of the last covariance of every monitored layer.
    pub singular: Vec<SingularReport>,
}

impl TrainOutcome {
    pub fn metrics_for(&self, fusion: Fusion) -> &MetricsReport {
        self.metrics
            .iter()
            .find(|r| r.fusion == fusion)
            .expect("both fusions computed")
    }
}

pub fn train(dataset: &MultimodalDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(dataset, config.clone())?.run()
}

/// One ablation cell: a label and the configuration it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub config: TrainConfig,
}

/// Outcome of one (variant, seed) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub metrics: Vec<MetricsReport>,
    pub singular: Vec<SingularReport>,
    pub phases: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n−1) standard deviation; `std = 0` for one value.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub accuracy: MeanStd,
    pub map: MeanStd,
    pub macro_f1: MeanStd,
}

impl MetricStats {
    fn of(ms: &[crate::eval::Metrics]) -> Self {
        let pick = |f: fn(&crate::eval::Metrics) -> f64| MeanStd::of(&ms.iter().map(f).collect::<Vec<_>>());
        MetricStats {
            accuracy: pick(|m| m.accuracy),
            map: pick(|m| m.map),
            macro_f1: pick(|m| m.macro_f1),
        }
    }
}

/// Aggregate over seeds of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub runs: usize,
    pub fused_average: MetricStats,
    pub fused_weighted: MetricStats,
    pub per_modality: Vec<MetricStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<AblationRow>,
}

/// Runs every variant for every seed (the seed replaces `config.seed`) on
/// a worker pool of at most `threads` threads.
pub fn ablate(
    dataset: &MultimodalDataset,
    variants: &[Variant],
    seeds: &[u64],
    threads: Option<usize>,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Ok(AblationTable {
            runs: Vec::new(),
            rows: Vec::new(),
        });
    }
    if seeds.is_empty() {
        return Err(MieError::validation("ablation needs at least one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_one = |&(v, seed): &(usize, u64)| -> Result<RunRecord> {
        let mut config = variants[v].config.clone();
        config.seed = seed;
        let out = train(dataset, &config)?;
        Ok(RunRecord {
            label: variants[v].label.clone(),
            seed,
            metrics: out.metrics,
            singular: out.singular,
            phases: out.trace.len(),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| MieError::numeric(format!("worker pool: {e}")))?;
    let runs: Vec<RunRecord> = pool.install(|| jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>())?;

    let mut grouped: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for (job, run) in jobs.iter().zip(&runs) {
        grouped.entry(job.0).or_default().push(run);
    }
    let rows = grouped
        .into_iter()
        .map(|(v, rs)| {
            let fused = |f: Fusion| {
                let ms: Vec<_> = rs
                    .iter()
                    .map(|r| r.metrics.iter().find(|m| m.fusion == f).expect("computed").fused)
                    .collect();
                MetricStats::of(&ms)
            };
            let m = rs[0].metrics[0].per_modality.len();
            let per_modality = (0..m)
                .map(|j| {
                    let ms: Vec<_> = rs.iter().map(|r| r.metrics[0].per_modality[j]).collect();
                    MetricStats::of(&ms)
                })
                .collect();
            AblationRow {
                label: variants[v].label.clone(),
                runs: rs.len(),
                fused_average: fused(Fusion::Average),
                fused_weighted: fused(Fusion::Weighted),
                per_modality,
            }
        })
        .collect();
    Ok(AblationTable { runs, rows })
}
