// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head linear probes: fitting, cross-validated scoring, ranking,
//! top-K ensembles, a small ReLU MLP baseline and frozen-probe transfer.
//!
//! A head's score is the 2-fold cross-validated Spearman correlation: fit on
//! one fold, predict the other, and average the two Spearman values. The
//! bank's ranking orders heads by that score, descending, with ties broken
//! by `(layer, head)` ascending; heads whose score is undefined rank last.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{make_folds, transform_labels, FoldAssignment, LabelTransform, ProbeDataset};
use crate::error::{Error, Result};
use crate::numkit::{dot, mean, norm, population_std, r_squared, ridge_fit, spearman, Matrix};
use crate::toymodel::HeadId;

/// Regularization strength used unless told otherwise.
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Ensemble size used unless told otherwise.
pub const DEFAULT_K: usize = 32;
/// The regularization grid swept by [`lambda_sweep`].
pub const LAMBDA_GRID: [f64; 7] = [0.0, 0.001, 0.01, 0.1, 1.0, 100.0, 1000.0];
/// Candidate ensemble sizes for [`ensemble_curve`] (clipped to the model).
pub const K_GRID: [usize; 8] = [1, 8, 32, 64, 96, 128, 256, 512];
/// How `sigma_hat` is defined; stored in bank files.
pub const SIGMA_CONVENTION: &str = "population-std-of-unit-direction-projection";

/// A fitted probe for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub head: HeadId,
    pub theta: Vec<f64>,
    pub lambda: f64,
    /// Cross-validated Spearman; `None` when undefined on some fold.
    pub cv_spearman: Option<f64>,
    pub cv_r2: Option<f64>,
    /// Population std of `θᵀx / ‖θ‖` over the training samples.
    pub sigma_hat: f64,
}

impl LinearProbe {
    /// `θᵀx`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.theta.len() {
            return Err(Error::validation(format!(
                "activation has length {}, probe {} expects {}",
                x.len(),
                self.head,
                self.theta.len()
            )));
        }
        Ok(dot(&self.theta, x))
    }

    pub(crate) fn predict_f32(&self, x: &[f32]) -> f64 {
        self.theta
            .iter()
            .zip(x)
            .map(|(t, &v)| t * f64::from(v))
            .sum()
    }
}

/// The full grid of probes for one model, with a ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBank {
    layers: usize,
    heads: usize,
    dim: usize,
    lambda: f64,
    probes: Vec<LinearProbe>,
    ranking: Vec<HeadId>,
    pub fold_seed: u64,
    pub dataset_fingerprint: String,
    pub sigma_convention: String,
    pub warnings: Vec<String>,
}

/// Orders heads by score descending, undefined last, ties by head id.
pub fn rank_heads(probes: &[LinearProbe]) -> Vec<HeadId> {
    let mut order: Vec<&LinearProbe> = probes.iter().collect();
    order.sort_by(|a, b| match (a.cv_spearman, b.cv_spearman) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.head.cmp(&b.head)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.head.cmp(&b.head),
    });
    order.into_iter().map(|p| p.head).collect()
}

impl ProbeBank {
    /// Assembles a bank. Probes must be given layer-major; when `ranking` is
    /// `None` it is computed from the scores.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layers: usize,
        heads: usize,
        dim: usize,
        lambda: f64,
        probes: Vec<LinearProbe>,
        ranking: Option<Vec<HeadId>>,
        fold_seed: u64,
        dataset_fingerprint: String,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 || dim == 0 {
            return Err(Error::validation("bank dims must be > 0"));
        }
        if probes.len() != layers * heads {
            return Err(Error::validation(format!(
                "bank needs {} probes, got {}",
                layers * heads,
                probes.len()
            )));
        }
        for (i, p) in probes.iter().enumerate() {
            let expect = HeadId::new(i / heads, i % heads);
            if p.head != expect {
                return Err(Error::validation(format!(
                    "probe {i} is for head {}, expected {expect}",
                    p.head
                )));
            }
            if p.theta.len() != dim || p.theta.iter().any(|t| !t.is_finite()) {
                return Err(Error::validation(format!(
                    "probe {} has a bad coefficient vector",
                    p.head
                )));
            }
            if p.cv_spearman.is_some_and(|r| !(-1.0..=1.0).contains(&r)) {
                return Err(Error::validation(format!(
                    "probe {} score outside [-1, 1]",
                    p.head
                )));
            }
            if !(p.sigma_hat >= 0.0) || !p.sigma_hat.is_finite() {
                return Err(Error::validation(format!(
                    "probe {} sigma_hat invalid",
                    p.head
                )));
            }
        }
        let ranking = match ranking {
            Some(r) => {
                let mut seen = vec![false; layers * heads];
                for h in &r {
                    if h.layer >= layers || h.head >= heads {
                        return Err(Error::validation(format!("ranking names unknown head {h}")));
                    }
                    let idx = h.layer * heads + h.head;
                    if std::mem::replace(&mut seen[idx], true) {
                        return Err(Error::validation(format!("ranking repeats head {h}")));
                    }
                }
                if r.len() != layers * heads {
                    return Err(Error::validation(
                        "ranking is not a permutation of all heads",
                    ));
                }
                r
            }
            None => rank_heads(&probes),
        };
        Ok(Self {
            layers,
            heads,
            dim,
            lambda,
            probes,
            ranking,
            fold_seed,
            dataset_fingerprint,
            sigma_convention: SIGMA_CONVENTION.to_string(),
            warnings: Vec::new(),
        })
    }

    /// `(layers, heads, dim)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.layers, self.heads, self.dim)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_heads(&self) -> usize {
        self.probes.len()
    }

    pub fn probes(&self) -> &[LinearProbe] {
        &self.probes
    }

    pub fn probe(&self, head: HeadId) -> &LinearProbe {
        &self.probes[head.layer * self.heads + head.head]
    }

    pub fn ranking(&self) -> &[HeadId] {
        &self.ranking
    }

    pub fn best(&self) -> &LinearProbe {
        self.probe(self.ranking[0])
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.probes.len() {
            return Err(Error::validation(format!(
                "K = {k} outside [1, {}]",
                self.probes.len()
            )));
        }
        Ok(())
    }

    /// The K best heads, `T_K`.
    pub fn top_k(&self, k: usize) -> Result<&[HeadId]> {
        self.check_k(k)?;
        Ok(&self.ranking[..k])
    }

    /// Mean of the top-K probes' predictions. `activations` holds one vector
    /// per head in layer-major order (as returned by
    /// [`crate::toymodel::ForwardOutput::taps_at`]).
    pub fn ensemble_predict(&self, k: usize, activations: &[Vec<f64>]) -> Result<f64> {
        self.check_k(k)?;
        if activations.len() != self.probes.len() {
            return Err(Error::validation(format!(
                "expected activations for {} heads, got {}",
                self.probes.len(),
                activations.len()
            )));
        }
        let mut sum = 0.0;
        for h in &self.ranking[..k] {
            sum += self
                .probe(*h)
                .predict(&activations[h.layer * self.heads + h.head])?;
        }
        Ok(sum / k as f64)
    }

    /// Ensemble predictions for every sample of a dataset, frozen probes.
    pub fn ensemble_predictions(&self, ds: &ProbeDataset, k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        self.check_shape(ds)?;
        let top = &self.ranking[..k];
        let acts = ds.activations();
        Ok((0..ds.len())
            .map(|i| {
                top.iter()
                    .map(|h| self.probe(*h).predict_f32(acts.head_vector(i, *h)))
                    .sum::<f64>()
                    / k as f64
            })
            .collect())
    }

    pub fn check_shape(&self, ds: &ProbeDataset) -> Result<()> {
        if ds.shape() != self.shape() {
            return Err(Error::validation(format!(
                "dataset shape {:?} does not match bank shape {:?}",
                ds.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    /// Per-head score grid, `grid[layer][head]`.
    pub fn spearman_grid(&self) -> Vec<Vec<Option<f64>>> {
        self.grid(|p| p.cv_spearman)
    }

    pub fn r2_grid(&self) -> Vec<Vec<Option<f64>>> {
        self.grid(|p| p.cv_r2)
    }

    fn grid(&self, f: impl Fn(&LinearProbe) -> Option<f64>) -> Vec<Vec<Option<f64>>> {
        self.probes
            .chunks(self.heads)
            .map(|row| row.iter().map(&f).collect())
            .collect()
    }
}

/// Options for [`fit_bank`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lambda: f64,
    pub fold_seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            fold_seed: 0,
        }
    }
}

/// Held-out predictions from both folds plus the averaged scores.
struct CvScores {
    spearman: Option<f64>,
    r2: Option<f64>,
    failure: Option<String>,
}

fn cv_linear(ds: &ProbeDataset, head: HeadId, folds: &FoldAssignment, lambda: f64) -> CvScores {
    let mut rhos = Vec::with_capacity(folds.k);
    let mut r2s = Vec::with_capacity(folds.k);
    let y = ds.labels();
    for f in 0..folds.k {
        let (train, test) = folds.split(f);
        let x_train = ds.activations().head_matrix(head, &train);
        let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let theta = match ridge_fit(&x_train, &y_train, lambda) {
            Ok(t) => t,
            Err(e) => {
                return CvScores {
                    spearman: None,
                    r2: None,
                    failure: Some(format!("fold {f}: {e}")),
                }
            }
        };
        let x_test = ds.activations().head_matrix(head, &test);
        let pred = x_test.mul_vec(&theta);
        let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        match spearman(&pred, &y_test) {
            Ok(r) => rhos.push(r),
            Err(e) => {
                return CvScores {
                    spearman: None,
                    r2: None,
                    failure: Some(format!("fold {f}: {e}")),
                }
            }
        }
        r2s.push(r_squared(&pred, &y_test).ok());
    }
    let r2 = r2s
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|v| mean(&v));
    CvScores {
        spearman: Some(mean(&rhos)),
        r2,
        failure: None,
    }
}

/// Population std of `θᵀx/‖θ‖`; zero when θ = 0.
pub fn sigma_hat(x: &Matrix, theta: &[f64]) -> f64 {
    let n = norm(theta);
    if n == 0.0 {
        return 0.0;
    }
    let unit: Vec<f64> = theta.iter().map(|t| t / n).collect();
    population_std(&x.mul_vec(&unit))
}

fn fit_head(
    ds: &ProbeDataset,
    head: HeadId,
    folds: &FoldAssignment,
    lambda: f64,
) -> (LinearProbe, Vec<String>) {
    let mut warnings = Vec::new();
    let all: Vec<usize> = (0..ds.len()).collect();
    let x = ds.activations().head_matrix(head, &all);
    let (_, _, d) = ds.shape();
    let theta = match ridge_fit(&x, ds.labels(), lambda) {
        Ok(t) => t,
        Err(e) => {
            warnings.push(format!(
                "head {head}: full-data fit failed ({e}); coefficients zeroed"
            ));
            vec![0.0; d]
        }
    };
    let cv = cv_linear(ds, head, folds, lambda);
    if let Some(msg) = cv.failure {
        warnings.push(format!(
            "head {head}: cross-validation undefined ({msg}); ranked last"
        ));
    }
    let sigma = sigma_hat(&x, &theta);
    (
        LinearProbe {
            head,
            theta,
            lambda,
            cv_spearman: cv.spearman,
            cv_r2: cv.r2,
            sigma_hat: sigma,
        },
        warnings,
    )
}

/// Fits one ridge probe per head, scores it by 2-fold CV and ranks the bank.
pub fn fit_bank(ds: &ProbeDataset, opts: &FitOptions) -> Result<ProbeBank> {
    if ds.len() < 4 {
        return Err(Error::validation(format!(
            "fit_bank needs N >= 4, got {}",
            ds.len()
        )));
    }
    if !(opts.lambda >= 0.0) || !opts.lambda.is_finite() {
        return Err(Error::validation("lambda must be finite and >= 0"));
    }
    let folds = make_folds(ds.len(), 2, opts.fold_seed)?;
    let heads: Vec<HeadId> = ds.activations().heads_iter().collect();
    let fitted: Vec<(LinearProbe, Vec<String>)> = heads
        .par_iter()
        .map(|&h| fit_head(ds, h, &folds, opts.lambda))
        .collect();
    let (l, h, d) = ds.shape();
    let mut warnings = Vec::new();
    let mut probes = Vec::with_capacity(fitted.len());
    for (p, w) in fitted {
        probes.push(p);
        warnings.extend(w);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut bank = ProbeBank::from_parts(
        l,
        h,
        d,
        opts.lambda,
        probes,
        None,
        opts.fold_seed,
        ds.fingerprint(),
    )?;
    bank.warnings = warnings;
    Ok(bank)
}

/// One row of a regularization sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub best_head: HeadId,
    pub best_cv_spearman: Option<f64>,
}

/// Best-head score for each λ in `grid`.
pub fn lambda_sweep(ds: &ProbeDataset, grid: &[f64], fold_seed: u64) -> Result<Vec<LambdaRow>> {
    if grid.is_empty() {
        return Err(Error::validation("lambda grid is empty"));
    }
    grid.iter()
        .map(|&lambda| {
            let bank = fit_bank(ds, &FitOptions { lambda, fold_seed })?;
            let best = bank.best();
            Ok(LambdaRow {
                lambda,
                best_head: best.head,
                best_cv_spearman: best.cv_spearman,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

/// How heads are selected when cross-validating an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeakageMode {
    /// Heads ranked on full-data scores (the bank's ranking), then a fresh
    /// 2-fold split evaluates the ensemble.
    Paper,
    /// Heads re-ranked inside each training fold by an inner 2-fold CV.
    Nested,
}

impl std::str::FromStr for LeakageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(LeakageMode::Paper),
            "nested" => Ok(LeakageMode::Nested),
            other => Err(Error::validation(format!("unknown leakage mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePoint {
    pub k: usize,
    pub cv_spearman: Option<f64>,
}

/// The default K grid clipped to `[1, total_heads]`.
pub fn default_k_grid(total_heads: usize) -> Vec<usize> {
    K_GRID
        .iter()
        .copied()
        .filter(|&k| k <= total_heads)
        .collect()
}

/// Ranks heads by 2-fold CV restricted to `samples`.
fn rank_within(
    ds: &ProbeDataset,
    samples: &[usize],
    lambda: f64,
    seed: u64,
) -> Result<Vec<HeadId>> {
    let inner = make_folds(samples.len(), 2, seed)?;
    let y = ds.labels();
    let heads: Vec<HeadId> = ds.activations().heads_iter().collect();
    let scored: Vec<LinearProbe> = heads
        .par_iter()
        .map(|&head| {
            let mut rhos = Vec::with_capacity(2);
            for f in 0..2 {
                let (tr, te) = inner.split(f);
                let tr: Vec<usize> = tr.iter().map(|&i| samples[i]).collect();
                let te: Vec<usize> = te.iter().map(|&i| samples[i]).collect();
                let x = ds.activations().head_matrix(head, &tr);
                let yt: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
                let Ok(theta) = ridge_fit(&x, &yt, lambda) else {
                    break;
                };
                let pred = ds.activations().head_matrix(head, &te).mul_vec(&theta);
                let ye: Vec<f64> = te.iter().map(|&i| y[i]).collect();
                match spearman(&pred, &ye) {
                    Ok(r) => rhos.push(r),
                    Err(_) => break,
                }
            }
            LinearProbe {
                head,
                theta: Vec::new(),
                lambda,
                cv_spearman: (rhos.len() == 2).then(|| mean(&rhos)),
                cv_r2: None,
                sigma_hat: 0.0,
            }
        })
        .collect();
    Ok(rank_heads(&scored))
}

/// Cross-validated Spearman of the top-K ensemble for each K in `ks`.
pub fn ensemble_curve(
    ds: &ProbeDataset,
    bank: &ProbeBank,
    ks: &[usize],
    mode: LeakageMode,
    seed: u64,
) -> Result<Vec<EnsemblePoint>> {
    bank.check_shape(ds)?;
    if ks.is_empty() {
        return Err(Error::validation("K grid is empty"));
    }
    for &k in ks {
        bank.check_k(k)?;
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let folds = make_folds(ds.len(), 2, seed)?;
    let y = ds.labels();
    let lambda = bank.lambda();
    let mut per_k: Vec<Vec<Option<f64>>> = vec![Vec::new(); ks.len()];
    for f in 0..2 {
        let (train, test) = folds.split(f);
        let order: Vec<HeadId> = match mode {
            LeakageMode::Paper => bank.ranking()[..k_max].to_vec(),
            LeakageMode::Nested => {
                let inner_seed = seed.wrapping_mul(31).wrapping_add(f as u64 + 1);
                rank_within(ds, &train, lambda, inner_seed)?[..k_max].to_vec()
            }
        };
        let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        let preds: Vec<Vec<f64>> = order
            .par_iter()
            .map(|&head| {
                let x = ds.activations().head_matrix(head, &train);
                let theta = ridge_fit(&x, &y_train, lambda)?;
                Ok(ds.activations().head_matrix(head, &test).mul_vec(&theta))
            })
            .collect::<Result<_>>()?;
        for (slot, &k) in ks.iter().enumerate() {
            let ens: Vec<f64> = (0..test.len())
                .map(|i| preds[..k].iter().map(|p| p[i]).sum::<f64>() / k as f64)
                .collect();
            per_k[slot].push(spearman(&ens, &y_test).ok());
        }
    }
    Ok(ks
        .iter()
        .zip(per_k)
        .map(|(&k, scores)| EnsemblePoint {
            k,
            cv_spearman: scores
                .into_iter()
                .collect::<Option<Vec<f64>>>()
                .map(|v| mean(&v)),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Transfer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub k: usize,
    pub spearman: f64,
    /// Per group tag; `None` if the group has < 2 samples or no variance.
    pub per_group: BTreeMap<String, Option<f64>>,
    pub predictions: Vec<f64>,
}

/// Applies frozen probes to a second dataset and correlates the top-K
/// ensemble with its labels. No refitting.
pub fn transfer_eval(bank: &ProbeBank, ds: &ProbeDataset, k: usize) -> Result<TransferReport> {
    let predictions = bank.ensemble_predictions(ds, k)?;
    let rho = spearman(&predictions, ds.labels())?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in ds.groups().iter().enumerate() {
        if !g.is_empty() {
            groups.entry(g.as_str()).or_default().push(i);
        }
    }
    let per_group = groups
        .into_iter()
        .map(|(g, idx)| {
            let p: Vec<f64> = idx.iter().map(|&i| predictions[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| ds.labels()[i]).collect();
            (g.to_string(), spearman(&p, &y).ok())
        })
        .collect();
    Ok(TransferReport {
        k,
        spearman: rho,
        per_group,
        predictions,
    })
}

/// Spearman of full-data ensemble predictions on the bank's own data.
pub fn in_sample_ensemble_spearman(bank: &ProbeBank, ds: &ProbeDataset, k: usize) -> Result<f64> {
    spearman(&bank.ensemble_predictions(ds, k)?, ds.labels())
}

// ---------------------------------------------------------------------------
// Robustness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub transform: String,
    pub best_cv_spearman: Option<f64>,
    pub best_cv_r2: Option<f64>,
}

/// Best-head CV Spearman and R² under the original, permuted, sin(10y)
/// and cubic labels.
pub fn robustness_suite(
    ds: &ProbeDataset,
    opts: &FitOptions,
    permute_seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let variants = [
        ("original", None),
        (
            "permuted",
            Some(LabelTransform::Permute { seed: permute_seed }),
        ),
        ("sin10", Some(LabelTransform::Sin10)),
        ("cubic", Some(LabelTransform::Cubic)),
    ];
    variants
        .into_iter()
        .map(|(name, t)| {
            let d = match t {
                Some(t) => transform_labels(ds, &t)?,
                None => ds.clone(),
            };
            let bank = fit_bank(&d, opts)?;
            let best_r2 = bank
                .probes()
                .iter()
                .filter_map(|p| p.cv_r2)
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
            Ok(RobustnessRow {
                transform: name.to_string(),
                best_cv_spearman: bank.best().cv_spearman,
                best_cv_r2: best_r2,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// MLP probe
// ---------------------------------------------------------------------------

/// `ŷ = A·ReLU(Bx + b) + a` with scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpProbe {
    pub head: HeadId,
    /// hidden × d
    pub b_weight: Matrix,
    pub b_bias: Vec<f64>,
    /// length hidden (the single row of A)
    pub a_weight: Vec<f64>,
    pub a_bias: f64,
    pub config: MlpConfig,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    /// Hidden width; `None` means the head dimension.
    pub hidden: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            steps: 1000,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

impl MlpProbe {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.b_weight.cols() {
            return Err(Error::validation(format!(
                "activation has length {}, MLP expects {}",
                x.len(),
                self.b_weight.cols()
            )));
        }
        let h = self.b_weight.mul_vec(x);
        Ok(h.iter()
            .zip(&self.b_bias)
            .zip(&self.a_weight)
            .map(|((z, b), a)| a * (z + b).max(0.0))
            .sum::<f64>()
            + self.a_bias)
    }
}

/// Full-batch gradient descent on mean squared error.
pub fn train_mlp(x: &Matrix, y: &[f64], head: HeadId, cfg: &MlpConfig) -> Result<MlpProbe> {
    let (n, d) = (x.rows(), x.cols());
    let m = cfg.hidden.unwrap_or(d);
    if m == 0 || cfg.steps == 0 {
        return Err(Error::validation("MLP needs hidden >= 1 and steps >= 1"));
    }
    if n == 0 || y.len() != n {
        return Err(Error::validation(
            "MLP training data is empty or mismatched",
        ));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::validation("learning rate must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sb = 1.0 / (d as f64).sqrt();
    let sa = 1.0 / (m as f64).sqrt();
    let bw: Vec<f64> = (0..m * d).map(|_| rng.random_range(-sb..=sb)).collect();
    let mut b_weight = Matrix::new(m, d, bw)?;
    let mut b_bias = vec![0.0; m];
    let mut a_weight: Vec<f64> = (0..m).map(|_| rng.random_range(-sa..=sa)).collect();
    let mut a_bias = 0.0;

    let mut hidden = vec![0.0; n * m];
    let mut loss = f64::NAN;
    for _ in 0..cfg.steps {
        // forward
        let mut err = vec![0.0; n];
        let mut sse = 0.0;
        for i in 0..n {
            let xi = x.row(i);
            let hi = &mut hidden[i * m..(i + 1) * m];
            let mut out = a_bias;
            for j in 0..m {
                let z = dot(b_weight.row(j), xi) + b_bias[j];
                hi[j] = z;
                if z > 0.0 {
                    out += a_weight[j] * z;
                }
            }
            err[i] = out - y[i];
            sse += err[i] * err[i];
        }
        loss = sse / n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "MLP training for head {head} diverged (non-finite loss)"
            )));
        }
        // backward
        let scale = 2.0 / n as f64;
        let mut g_a = vec![0.0; m];
        let mut g_bias_b = vec![0.0; m];
        let mut g_b = vec![0.0; m * d];
        let mut g_a_bias = 0.0;
        for i in 0..n {
            let g = scale * err[i];
            g_a_bias += g;
            let hi = &hidden[i * m..(i + 1) * m];
            let xi = x.row(i);
            for j in 0..m {
                if hi[j] > 0.0 {
                    g_a[j] += g * hi[j];
                    let gz = g * a_weight[j];
                    g_bias_b[j] += gz;
                    for (gb, &xv) in g_b[j * d..(j + 1) * d].iter_mut().zip(xi) {
                        *gb += gz * xv;
                    }
                }
            }
        }
        let lr = cfg.learning_rate;
        for (w, g) in b_weight.as_mut_slice().iter_mut().zip(&g_b) {
            *w -= lr * g;
        }
        for j in 0..m {
            b_bias[j] -= lr * g_bias_b[j];
            a_weight[j] -= lr * g_a[j];
        }
        a_bias -= lr * g_a_bias;
    }
    let params_finite = b_weight
        .as_slice()
        .iter()
        .chain(&b_bias)
        .chain(&a_weight)
        .all(|v| v.is_finite())
        && a_bias.is_finite();
    if !params_finite {
        return Err(Error::Numeric(format!(
            "MLP training for head {head} diverged"
        )));
    }
    Ok(MlpProbe {
        head,
        b_weight,
        b_bias,
        a_weight,
        a_bias,
        config: *cfg,
        final_loss: loss,
    })
}

/// Trains an MLP probe on all samples of one head.
pub fn fit_mlp(ds: &ProbeDataset, head: HeadId, cfg: &MlpConfig) -> Result<MlpProbe> {
    let (l, h, _) = ds.shape();
    if head.layer >= l || head.head >= h {
        return Err(Error::validation(format!("head {head} outside dataset")));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    train_mlp(
        &ds.activations().head_matrix(head, &all),
        ds.labels(),
        head,
        cfg,
    )
}

/// `(cv_spearman, cv_r2)` for an MLP probe, scored exactly like the linear path.
pub fn mlp_cv(
    ds: &ProbeDataset,
    head: HeadId,
    cfg: &MlpConfig,
    fold_seed: u64,
) -> Result<(f64, f64)> {
    let folds = make_folds(ds.len(), 2, fold_seed)?;
    let y = ds.labels();
    let mut rhos = Vec::new();
    let mut r2s = Vec::new();
    for f in 0..2 {
        let (train, test) = folds.split(f);
        let x = ds.activations().head_matrix(head, &train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let probe = train_mlp(&x, &yt, head, cfg)?;
        let xt = ds.activations().head_matrix(head, &test);
        let pred: Vec<f64> = (0..test.len())
            .map(|i| probe.predict(xt.row(i)))
            .collect::<Result<_>>()?;
        let ye: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        rhos.push(spearman(&pred, &ye)?);
        r2s.push(r_squared(&pred, &ye)?);
    }
    Ok((mean(&rhos), mean(&r2s)))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Score grids, a top-N table and (optionally) an ensemble curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub spearman_grid: Vec<Vec<Option<f64>>>,
    pub r2_grid: Vec<Vec<Option<f64>>>,
    pub top: Vec<(HeadId, Option<f64>)>,
    pub ensemble: Vec<EnsemblePoint>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn from_bank(bank: &ProbeBank, top_n: usize) -> Self {
        let top = bank
            .ranking()
            .iter()
            .take(top_n)
            .map(|h| (*h, bank.probe(*h).cv_spearman))
            .collect();
        Self {
            spearman_grid: bank.spearman_grid(),
            r2_grid: bank.r2_grid(),
            top,
            ensemble: Vec::new(),
        }
    }

    /// CSV heatmap: one row per layer, one column per head, 1-based headers.
    pub fn heatmap_csv(grid: &[Vec<Option<f64>>]) -> String {
        let heads = grid.first().map_or(0, Vec::len);
        let mut out = String::from("layer");
        for h in 1..=heads {
            out.push_str(&format!(",head{h}"));
        }
        out.push('\n');
        for (l, row) in grid.iter().enumerate() {
            out.push_str(&(l + 1).to_string());
            for v in row {
                out.push(',');
                out.push_str(&fmt_opt(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Top heads as a plain-text table with 1-based `(Layer, Head)` entries.
    pub fn top_table(&self) -> String {
        let mut out = String::from("rank  (Layer, Head)  cv_spearman\n");
        for (i, (h, s)) in self.top.iter().enumerate() {
            out.push_str(&format!(
                "{:>4}  {:<14} {}\n",
                i + 1,
                h.to_string(),
                fmt_opt(*s)
            ));
        }
        out
    }

    pub fn ensemble_csv(&self) -> String {
        let mut out = String::from("k,cv_spearman\n");
        for p in &self.ensemble {
            out.push_str(&format!("{},{}\n", p.k, fmt_opt(p.cv_spearman)));
        }
        out
    }
}
