//! Flat-direction gradient modification.
//!
//! For every monitored layer a modality keeps the running sum `Ȳ` of outer
//! products of batch-mean layer inputs. After a training phase `Ȳ` is
//! eigendecomposed, `T = V·exp(−τ(Λ − λ_min)/(λ_max − λ_min))·Vᵀ` is formed,
//! and `Ȳ` is cleared. Another modality then left-multiplies the weight
//! gradient of the matching layer by `T`, damping the directions along which
//! this modality's layer input varies most.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MieError, Result};
use crate::linalg::{matmul, mean_rows, norm2, outer, sym_eigen, Matrix};
use crate::nn::{ForwardTrace, ModalityModel};

/// Which layers receive gradient modification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GmScope {
    /// The classification-head layers.
    HeadOnly,
    /// Deepest layers first until at least this fraction of all parameters
    /// is covered; `0` selects nothing and `1` everything.
    DeepFraction(f64),
}

impl GmScope {
    pub fn layers(&self, model: &ModalityModel) -> Vec<usize> {
        match *self {
            GmScope::HeadOnly => model.head_range().collect(),
            GmScope::DeepFraction(f) => {
                let total = model.param_count() as f64;
                let mut chosen = Vec::new();
                let mut covered = 0usize;
                for (i, layer) in model.layers().iter().enumerate().rev() {
                    if covered as f64 >= f * total {
                        break;
                    }
                    covered += layer.param_count();
                    chosen.push(i);
                }
                chosen.reverse();
                chosen
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let GmScope::DeepFraction(f) = *self {
            if !(0.0..=1.0).contains(&f) {
                return Err(MieError::validation(format!(
                    "gm.scope fraction must lie in [0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for GmScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GmScope::HeadOnly => write!(f, "head_only"),
            GmScope::DeepFraction(x) => write!(f, "{x}"),
        }
    }
}

impl FromStr for GmScope {
    type Err = MieError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "head_only" || s == "head" {
            return Ok(GmScope::HeadOnly);
        }
        let f: f64 = s.parse().map_err(|_| {
            MieError::validation(format!("gm.scope: expected head_only or a fraction, got {s:?}"))
        })?;
        let scope = GmScope::DeepFraction(f);
        scope.validate()?;
        Ok(scope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmConfig {
    pub tau: f64,
    pub scope: GmScope,
    pub degenerate_tolerance: f64,
}

impl Default for GmConfig {
    fn default() -> Self {
        GmConfig {
            tau: 0.4,
            scope: GmScope::HeadOnly,
            degenerate_tolerance: 1e-12,
        }
    }
}

impl GmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(MieError::validation(format!(
                "gm.tau must be finite and >= 0, got {}",
                self.tau
            )));
        }
        if !(self.degenerate_tolerance >= 0.0) {
            return Err(MieError::validation("gm.degenerate_tolerance must be >= 0"));
        }
        self.scope.validate()
    }
}

/// Covariance accumulator and modification matrix for one layer.
#[derive(Debug, Clone)]
pub struct LayerGradMod {
    pub layer: usize,
    cumulative_cov: Matrix,
    /// `None` means identity.
    t_matrix: Option<Matrix>,
    batches_seen: usize,
    last_eigenvalues: Option<Vec<f64>>,
}

impl LayerGradMod {
    pub fn new(layer: usize, dim: usize) -> Self {
        LayerGradMod {
            layer,
            cumulative_cov: Matrix::zeros(dim, dim),
            t_matrix: None,
            batches_seen: 0,
            last_eigenvalues: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.cumulative_cov.rows()
    }

    pub fn cumulative_cov(&self) -> &Matrix {
        &self.cumulative_cov
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    /// Current modification matrix, `None` while it is the identity.
    pub fn t_matrix(&self) -> Option<&Matrix> {
        self.t_matrix.as_ref()
    }

    /// Materialised `T`, identity included.
    pub fn t_dense(&self) -> Matrix {
        self.t_matrix
            .clone()
            .unwrap_or_else(|| Matrix::identity(self.dim()))
    }

    /// `Ȳ += z̄ z̄ᵀ` where `z̄` is the column mean of the batch inputs.
    pub fn accumulate(&mut self, layer_inputs: &Matrix) -> Result<()> {
        if layer_inputs.cols() != self.dim() {
            return Err(MieError::validation(format!(
                "layer {}: covariance is {}-dimensional, batch has {} columns",
                self.layer,
                self.dim(),
                layer_inputs.cols()
            )));
        }
        let mean = mean_rows(layer_inputs)?;
        self.cumulative_cov.axpy(1.0, &outer(&mean, &mean))?;
        self.batches_seen += 1;
        Ok(())
    }

    /// Rebuilds `T` from `Ȳ`, then clears `Ȳ`.
    pub fn build(&mut self, config: &GmConfig) -> Result<()> {
        if self.batches_seen == 0 {
            return Err(MieError::validation(format!(
                "layer {}: cannot build T before any batch was accumulated",
                self.layer
            )));
        }
        let (t, eigenvalues) = modification_matrix(&self.cumulative_cov, config)?;
        self.t_matrix = t;
        self.last_eigenvalues = Some(eigenvalues);
        let d = self.dim();
        self.cumulative_cov = Matrix::zeros(d, d);
        self.batches_seen = 0;
        Ok(())
    }

    /// Eigenvalues of the pending `Ȳ`, or of the last one consumed by a build.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        if self.batches_seen > 0 {
            return Ok(sym_eigen(&self.cumulative_cov)?.eigenvalues);
        }
        self.last_eigenvalues.clone().ok_or_else(|| {
            MieError::validation(format!("layer {}: no covariance data yet", self.layer))
        })
    }
}

/// `T` for a covariance matrix together with its eigenvalues.
///
/// Returns `None` for the identity: when `τ = 0` or the spectrum is flat
/// (`λ_max − λ_min < tol·max(1, λ_max)`).
pub fn modification_matrix(cov: &Matrix, config: &GmConfig) -> Result<(Option<Matrix>, Vec<f64>)> {
    config.validate()?;
    let eig = sym_eigen(cov)?;
    let lmax = eig.eigenvalues[0];
    let lmin = *eig.eigenvalues.last().expect("d >= 1");
    let spread = lmax - lmin;
    if config.tau == 0.0 || spread < config.degenerate_tolerance * lmax.abs().max(1.0) {
        return Ok((None, eig.eigenvalues));
    }
    let tau = config.tau;
    let t = eig.reconstruct_with(|l| (-tau * (l - lmin) / spread).exp());
    Ok((Some(t), eig.eigenvalues))
}

/// `T·∇W`; bias gradients never pass through here.
pub fn modify(t_matrix: &Matrix, weight_grad: &Matrix) -> Result<Matrix> {
    if t_matrix.cols() != weight_grad.rows() || t_matrix.rows() != t_matrix.cols() {
        return Err(MieError::validation(format!(
            "modify: T is {}x{}, weight gradient is {}x{}",
            t_matrix.rows(),
            t_matrix.cols(),
            weight_grad.rows(),
            weight_grad.cols()
        )));
    }
    matmul(t_matrix, weight_grad)
}

/// `‖Ȳ·γv‖₂` for a unit vector `v`; equals `γλ` along an eigenvector.
pub fn flatness_response(cov: &Matrix, v: &[f64], gamma: f64) -> Result<f64> {
    let n = norm2(v);
    if (n - 1.0).abs() > 1e-9 {
        return Err(MieError::validation(format!(
            "flatness_response: direction has norm {n}, expected 1"
        )));
    }
    let scaled: Vec<f64> = v.iter().map(|x| gamma * x).collect();
    Ok(norm2(&cov.mul_vec(&scaled)?))
}

/// Per-modality collection of monitored layers.
#[derive(Debug, Clone)]
pub struct GradModState {
    layers: Vec<LayerGradMod>,
}

impl GradModState {
    /// One accumulator per layer selected by `scope`, sized to the layer input.
    pub fn for_model(model: &ModalityModel, scope: &GmScope) -> Self {
        let layers = scope
            .layers(model)
            .into_iter()
            .map(|l| LayerGradMod::new(l, model.layers()[l].input_dim()))
            .collect();
        GradModState { layers }
    }

    pub fn layers(&self) -> &[LayerGradMod] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&LayerGradMod> {
        self.layers.iter().find(|l| l.layer == index)
    }

    /// Adds one batch's worth of layer inputs from a forward trace.
    pub fn accumulate_trace(&mut self, trace: &ForwardTrace) -> Result<()> {
        for l in &mut self.layers {
            let inputs = trace.inputs.get(l.layer).ok_or_else(|| {
                MieError::validation(format!("trace has no input for layer {}", l.layer))
            })?;
            l.accumulate(inputs)?;
        }
        Ok(())
    }

    pub fn build(&mut self, config: &GmConfig) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.build(config))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularStats {
    pub layer: usize,
    pub max: f64,
    pub mean: f64,
}

/// Max and mean singular value of `Ȳ` per monitored layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularReport {
    /// 1-based.
    pub modality: usize,
    pub layers: Vec<SingularStats>,
}

pub fn singular_stats(layer: usize, eigenvalues: &[f64]) -> SingularStats {
    let max = eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let mean = if eigenvalues.is_empty() {
        0.0
    } else {
        eigenvalues.iter().map(|l| l.max(0.0)).sum::<f64>() / eigenvalues.len() as f64
    };
    SingularStats { layer, max, mean }
}

/// One report per modality state, in order.
pub fn singular_report(states: &[GradModState]) -> Result<Vec<SingularReport>> {
    states
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let layers = s
                .layers
                .iter()
                .map(|l| Ok(singular_stats(l.layer, &l.spectrum()?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SingularReport {
                modality: m + 1,
                layers,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.shape() == b.shape()
            && a.as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn accumulate_single_batch() {
        let mut l = LayerGradMod::new(0, 2);
        let z = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        l.accumulate(&z).unwrap();
        assert_eq!(l.cumulative_cov().as_slice(), &[1.0, 2.0, 2.0, 4.0]);
        l.accumulate(&z).unwrap();
        assert_eq!(l.cumulative_cov().as_slice(), &[2.0, 4.0, 4.0, 8.0]);
        assert_eq!(l.batches_seen(), 2);
        assert!(l.accumulate(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn build_on_diagonal() {
        let cfg = GmConfig::default();
        let (t, eig) = modification_matrix(&Matrix::from_diag(&[4.0, 1.0]), &cfg).unwrap();
        let t = t.unwrap();
        assert_eq!(eig, vec![4.0, 1.0]);
        assert!((t.get(0, 0) - (-0.4f64).exp()).abs() < 1e-15);
        assert!((t.get(1, 1) - 1.0).abs() < 1e-15);
        assert!(t.get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn tau_zero_and_flat_spectrum_give_identity() {
        let cfg = GmConfig {
            tau: 0.0,
            ..GmConfig::default()
        };
        let (t, _) = modification_matrix(&Matrix::from_diag(&[4.0, 1.0]), &cfg).unwrap();
        assert!(t.is_none());
        let (t, _) = modification_matrix(&Matrix::identity(3).scaled(7.5), &GmConfig::default()).unwrap();
        assert!(t.is_none());
    }

    #[test]
    fn build_requires_data_and_resets() {
        let mut l = LayerGradMod::new(0, 2);
        assert!(l.build(&GmConfig::default()).is_err());
        l.accumulate(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        l.build(&GmConfig::default()).unwrap();
        assert_eq!(l.batches_seen(), 0);
        assert!(l.cumulative_cov().as_slice().iter().all(|&x| x == 0.0));
        assert!(l.t_matrix().is_some());
        // rank-one Ȳ = [[1,2],[2,4]]: eigenvalues 5, 0
        let s = l.spectrum().unwrap();
        assert!((s[0] - 5.0).abs() < 1e-12 && s[1].abs() < 1e-12);
    }

    #[test]
    fn modify_examples() {
        let g = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(modify(&Matrix::identity(2), &g).unwrap(), g);
        let t = Matrix::from_diag(&[(-0.4f64).exp(), 1.0]);
        let out = modify(&t, &g).unwrap();
        assert!((out.get(0, 0) - 0.6703200460356393).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.6703200460356393).abs() < 1e-15);
        assert_eq!(out.row(1), &[1.0, 1.0]);
        assert!(modify(&Matrix::identity(3), &g).is_err());
    }

    #[test]
    fn scale_invariance() {
        let cov = Matrix::from_rows(&[vec![3.0, 1.0, 0.5], vec![1.0, 2.0, 0.2], vec![0.5, 0.2, 1.0]]).unwrap();
        let cfg = GmConfig::default();
        let base = modification_matrix(&cov, &cfg).unwrap().0.unwrap();
        let g = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.1], vec![3.0, 1.0]]).unwrap();
        let gb = modify(&base, &g).unwrap();
        for c in [1e-3, 1e3] {
            let t = modification_matrix(&cov.scaled(c), &cfg).unwrap().0.unwrap();
            assert!(approx(&t, &base, 1e-8));
            assert!(approx(&modify(&t, &g).unwrap(), &gb, 1e-8));
        }
    }

    #[test]
    fn flatness_examples() {
        let cov = Matrix::from_diag(&[4.0, 1.0]);
        assert_eq!(flatness_response(&cov, &[1.0, 0.0], 1.0).unwrap(), 4.0);
        assert_eq!(flatness_response(&cov, &[0.0, 1.0], 0.0).unwrap(), 0.0);
        assert!(flatness_response(&cov, &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn singular_stats_examples() {
        let s = singular_stats(2, &[4.0, 1.0]);
        assert_eq!((s.max, s.mean), (4.0, 2.5));
        let z = singular_stats(0, &[0.0, 0.0]);
        assert_eq!((z.max, z.mean), (0.0, 0.0));
    }

    #[test]
    fn scope_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ModalityModel::new(Architecture::new(32, 10), &mut rng);
        assert_eq!(GmScope::HeadOnly.layers(&m), vec![2, 3, 4]);
        assert_eq!(GmScope::DeepFraction(0.0).layers(&m), Vec::<usize>::new());
        assert_eq!(GmScope::DeepFraction(1.0).layers(&m), vec![0, 1, 2, 3, 4]);
        assert_eq!(GmScope::DeepFraction(0.01).layers(&m), vec![4]);
        assert_eq!(GmScope::DeepFraction(0.3).layers(&m), vec![3, 4]);
        assert!("1.5".parse::<GmScope>().is_err());
        assert_eq!("head_only".parse::<GmScope>().unwrap(), GmScope::HeadOnly);
    }

    #[test]
    fn report_needs_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ModalityModel::new(Architecture::new(4, 3), &mut rng);
        let state = GradModState::for_model(&m, &GmScope::HeadOnly);
        assert!(singular_report(&[state]).is_err());
    }
}
