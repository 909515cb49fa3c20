// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference-time steering along probe directions, and the α × K sweep.
//!
//! A plan adds `α · σ̂ · θ̂` to each selected head's activation at every
//! position of every forward pass during generation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::monitor::{check_bank_matches_model, trace_with_hook, PromptLine, Trace, Tracked};
use crate::numkit::{mean, norm, spearman};
use crate::probes::ProbeBank;
use crate::toymodel::{HeadId, InterventionHook, Sampler, TokenId, ToyTransformer};

/// Default α grid.
pub const ALPHA_GRID: [f64; 7] = [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0];
/// Default K grid.
pub const STEER_K_GRID: [usize; 6] = [16, 32, 48, 64, 80, 96];
/// Outputs whose distinct-trigram ratio falls below this are incoherent.
pub const COHERENCE_THRESHOLD: f64 = 0.2;

/// Which layers may carry an intervention (0-based, inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerFilter {
    #[default]
    All,
    Range {
        lo: usize,
        hi: usize,
    },
}

impl LayerFilter {
    pub fn contains(&self, layer: usize) -> bool {
        match *self {
            LayerFilter::All => true,
            LayerFilter::Range { lo, hi } => (lo..=hi).contains(&layer),
        }
    }

    fn validate(&self, layers: usize) -> Result<()> {
        if let LayerFilter::Range { lo, hi } = *self {
            if lo > hi || hi >= layers {
                return Err(Error::validation(format!(
                    "layer range [{lo}, {hi}] invalid for a {layers}-layer model"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for LayerFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerFilter::All => f.write_str("all"),
            LayerFilter::Range { lo, hi } => write!(f, "{lo}-{hi}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub alpha: f64,
    pub k: usize,
    pub layers: LayerFilter,
    /// Use `θ̂/‖θ̂‖` instead of `θ̂`.
    pub normalize: bool,
    /// Take the top K among heads inside the layer filter, instead of
    /// filtering the global top K.
    pub reselect: bool,
}

impl PlanOptions {
    pub fn new(alpha: f64, k: usize) -> Self {
        Self {
            alpha,
            k,
            layers: LayerFilter::All,
            normalize: false,
            reselect: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringTarget {
    pub head: HeadId,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub options: PlanOptions,
    pub targets: Vec<SteeringTarget>,
    pub warnings: Vec<String>,
}

impl SteeringPlan {
    pub fn hook(&self) -> InterventionHook {
        let mut hook = InterventionHook::new();
        for t in &self.targets {
            hook.add(t.head, t.delta.clone())
                .expect("plan deltas are finite and unique");
        }
        hook
    }
}

/// Selects target heads from the bank ranking and computes their deltas.
pub fn build_plan(bank: &ProbeBank, opts: &PlanOptions) -> Result<SteeringPlan> {
    if !opts.alpha.is_finite() {
        return Err(Error::validation("alpha must be finite"));
    }
    let (layers, _, _) = bank.shape();
    opts.layers.validate(layers)?;
    let top = bank.top_k(opts.k)?;
    let heads: Vec<HeadId> = if opts.reselect {
        bank.ranking()
            .iter()
            .copied()
            .filter(|h| opts.layers.contains(h.layer))
            .take(opts.k)
            .collect()
    } else {
        top.iter()
            .copied()
            .filter(|h| opts.layers.contains(h.layer))
            .collect()
    };
    let mut warnings = Vec::new();
    if heads.is_empty() {
        warnings.push(format!(
            "no target heads: the top {} heads all lie outside layers {}; the plan is a no-op",
            opts.k, opts.layers
        ));
    }
    let targets = heads
        .into_iter()
        .map(|head| {
            let p = bank.probe(head);
            let scale = if opts.normalize {
                let n = norm(&p.theta);
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            } else {
                1.0
            };
            let delta: Vec<f64> = p
                .theta
                .iter()
                .map(|t| opts.alpha * p.sigma_hat * t * scale)
                .collect();
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "delta for head {head} is not finite"
                )));
            }
            Ok(SteeringTarget { head, delta })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SteeringPlan {
        options: *opts,
        targets,
        warnings,
    })
}

/// Generates under the plan's intervention, tracing the plan's top-K heads.
/// Scores are taken on effective (post-intervention) activations.
#[allow(clippy::too_many_arguments)]
pub fn steer_generate(
    model: &ToyTransformer,
    bank: &ProbeBank,
    plan: &SteeringPlan,
    issue: &str,
    prompt: &[TokenId],
    steps: usize,
    sampler: Sampler,
) -> Result<Trace> {
    check_bank_matches_model(bank, model)?;
    let hook = plan.hook();
    trace_with_hook(
        model,
        bank,
        &Tracked::TopK(plan.options.k),
        issue,
        prompt,
        steps,
        sampler,
        Some(&hook),
    )
}

/// Distinct trigrams over total trigrams; 1.0 for fewer than three tokens.
pub fn distinct_trigram_ratio(tokens: &[TokenId]) -> f64 {
    if tokens.len() < 3 {
        return 1.0;
    }
    let grams: Vec<&[TokenId]> = tokens.windows(3).collect();
    let distinct: HashSet<&[TokenId]> = grams.iter().copied().collect();
    distinct.len() as f64 / grams.len() as f64
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub layers: LayerFilter,
    pub normalize: bool,
    pub reselect: bool,
    /// Greedy decoding when `None`; seeded sampling otherwise.
    pub temperature: Option<f64>,
}

impl SweepConfig {
    /// Default grids, with K values above `total_heads` dropped (the largest
    /// in-range value is replaced by `total_heads` if nothing survives).
    pub fn defaults_for(total_heads: usize) -> Self {
        let mut ks: Vec<usize> = STEER_K_GRID
            .iter()
            .copied()
            .filter(|&k| k <= total_heads)
            .collect();
        if ks.is_empty() {
            ks.push(total_heads);
        }
        Self {
            alphas: ALPHA_GRID.to_vec(),
            ks,
            seeds: vec![0],
            steps: 16,
            layers: LayerFilter::All,
            normalize: false,
            reselect: false,
            temperature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub k: usize,
    pub issue: String,
    pub prompt: usize,
    pub seed: u64,
    pub length: usize,
    pub slant_proxy: f64,
    pub coherence: f64,
    pub coherent: bool,
}

/// Spearman correlations of α with slant proxy and with output length.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlations {
    pub alpha_slant: Option<f64>,
    pub alpha_length: Option<f64>,
    pub n: usize,
}

fn correlations(rows: &[&SweepRow]) -> Correlations {
    let a: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.slant_proxy).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    Correlations {
        alpha_slant: spearman(&a, &s).ok(),
        alpha_length: spearman(&a, &l).ok(),
        n: rows.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    /// All rows pooled.
    pub pooled: Correlations,
    /// Per-α means of slant and length, correlated with α.
    pub mean_curve: Correlations,
    pub per_issue: BTreeMap<String, Correlations>,
    /// Per `(issue, prompt, K, seed)` series across the α grid.
    pub per_series: Vec<(String, usize, usize, u64, Correlations)>,
    /// Share of rows flagged coherent.
    pub coherent_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

fn summarize_rows(rows: &[SweepRow]) -> SweepSummary {
    let all: Vec<&SweepRow> = rows.iter().collect();
    let mut by_issue: BTreeMap<String, Vec<&SweepRow>> = BTreeMap::new();
    let mut by_series: BTreeMap<(String, usize, usize, u64), Vec<&SweepRow>> = BTreeMap::new();
    let mut by_alpha: BTreeMap<u64, (f64, Vec<&SweepRow>)> = BTreeMap::new();
    for r in rows {
        by_issue.entry(r.issue.clone()).or_default().push(r);
        by_series
            .entry((r.issue.clone(), r.prompt, r.k, r.seed))
            .or_default()
            .push(r);
        by_alpha
            .entry(r.alpha.to_bits())
            .or_insert_with(|| (r.alpha, Vec::new()))
            .1
            .push(r);
    }
    let curve: Vec<SweepRow> = by_alpha
        .values()
        .map(|(alpha, rs)| SweepRow {
            alpha: *alpha,
            k: 0,
            issue: String::new(),
            prompt: 0,
            seed: 0,
            length: 0,
            slant_proxy: mean(&rs.iter().map(|r| r.slant_proxy).collect::<Vec<_>>()),
            coherence: 0.0,
            coherent: true,
        })
        .collect();
    let curve_refs: Vec<&SweepRow> = curve.iter().collect();
    let mut mean_curve = correlations(&curve_refs);
    let mean_len: Vec<f64> = by_alpha
        .values()
        .map(|(_, rs)| mean(&rs.iter().map(|r| r.length as f64).collect::<Vec<_>>()))
        .collect();
    let alphas: Vec<f64> = by_alpha.values().map(|(a, _)| *a).collect();
    mean_curve.alpha_length = spearman(&alphas, &mean_len).ok();
    let coherent = rows.iter().filter(|r| r.coherent).count();
    SweepSummary {
        pooled: correlations(&all),
        mean_curve,
        per_issue: by_issue
            .into_iter()
            .map(|(k, v)| (k, correlations(&v)))
            .collect(),
        per_series: by_series
            .into_iter()
            .map(|((i, p, k, s), v)| (i, p, k, s, correlations(&v)))
            .collect(),
        coherent_fraction: if rows.is_empty() {
            0.0
        } else {
            coherent as f64 / rows.len() as f64
        },
    }
}

/// Runs every (α, K, prompt, seed) cell and summarizes.
pub fn alpha_k_sweep(
    model: &ToyTransformer,
    bank: &ProbeBank,
    prompts: &[PromptLine],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if cfg.alphas.is_empty() || cfg.ks.is_empty() || cfg.seeds.is_empty() || prompts.is_empty() {
        return Err(Error::validation(
            "sweep grids and prompt list must be non-empty",
        ));
    }
    check_bank_matches_model(bank, model)?;
    let mut cells = Vec::new();
    for &alpha in &cfg.alphas {
        for &k in &cfg.ks {
            for (pi, p) in prompts.iter().enumerate() {
                for &seed in &cfg.seeds {
                    cells.push((alpha, k, pi, p, seed));
                }
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(alpha, k, pi, p, seed)| {
            let plan = build_plan(
                bank,
                &PlanOptions {
                    alpha,
                    k,
                    layers: cfg.layers,
                    normalize: cfg.normalize,
                    reselect: cfg.reselect,
                },
            )?;
            let sampler = match cfg.temperature {
                Some(temperature) => Sampler::Temperature { temperature, seed },
                None => Sampler::Greedy,
            };
            let trace =
                steer_generate(model, bank, &plan, &p.issue, &p.tokens, cfg.steps, sampler)?;
            let generated = &trace.tokens[trace.prompt_len..];
            let coherence = distinct_trigram_ratio(generated);
            Ok(SweepRow {
                alpha,
                k,
                issue: p.issue.clone(),
                prompt: pi,
                seed,
                length: generated.len(),
                slant_proxy: mean(&trace.ensemble_scores()),
                coherence,
                coherent: coherence >= COHERENCE_THRESHOLD,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize_rows(&rows);
    Ok(SweepResult { rows, summary })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

impl SweepResult {
    /// One row per cell; `judge_score` is left empty for external raters.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "alpha,k,issue,prompt,seed,length,slant_proxy,coherence,coherent,judge_score\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},",
                r.alpha,
                r.k,
                r.issue,
                r.prompt,
                r.seed,
                r.length,
                r.slant_proxy,
                r.coherence,
                r.coherent
            );
        }
        out
    }

    /// `scope,key,n,alpha_slant_spearman,alpha_length_spearman`; undefined
    /// correlations print as `NA`.
    pub fn summary_csv(&self) -> String {
        let s = &self.summary;
        let mut out = String::from("scope,key,n,alpha_slant_spearman,alpha_length_spearman\n");
        let mut line = |scope: &str, key: &str, c: &Correlations| {
            let _ = writeln!(
                out,
                "{scope},{key},{},{},{}",
                c.n,
                fmt_opt(c.alpha_slant),
                fmt_opt(c.alpha_length)
            );
        };
        line("mean_curve", "", &s.mean_curve);
        line("pooled", "", &s.pooled);
        for (k, c) in &s.per_issue {
            line("issue", k, c);
        }
        for (i, p, k, seed, c) in &s.per_series {
            line("series", &format!("{i}/prompt{p}/k{k}/seed{seed}"), c);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::LinearProbe;

    fn bank_2x2() -> ProbeBank {
        let p = |l, h, theta: Vec<f64>, s, sig| LinearProbe {
            head: HeadId::new(l, h),
            theta,
            lambda: 1.0,
            cv_spearman: Some(s),
            cv_r2: None,
            sigma_hat: sig,
        };
        ProbeBank::from_parts(
            2,
            2,
            2,
            1.0,
            vec![
                p(0, 0, vec![0.0, 2.0], 0.9, 0.5),
                p(0, 1, vec![1.0, 0.0], 0.1, 1.0),
                p(1, 0, vec![3.0, 4.0], 0.5, 2.0),
                p(1, 1, vec![1.0, 1.0], 0.2, 1.0),
            ],
            None,
            0,
            String::new(),
        )
        .unwrap()
    }

    #[test]
    fn delta_arithmetic() {
        let plan = build_plan(&bank_2x2(), &PlanOptions::new(10.0, 1)).unwrap();
        assert_eq!(plan.targets.len(), 1);
        assert_eq!(plan.targets[0].head, HeadId::new(0, 0));
        assert_eq!(plan.targets[0].delta, vec![0.0, 10.0]);
        let zero = build_plan(&bank_2x2(), &PlanOptions::new(0.0, 4)).unwrap();
        assert!(zero
            .targets
            .iter()
            .all(|t| t.delta.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn normalize_uses_unit_direction() {
        let mut o = PlanOptions::new(1.0, 2);
        o.normalize = true;
        let plan = build_plan(&bank_2x2(), &o).unwrap();
        let t = plan
            .targets
            .iter()
            .find(|t| t.head == HeadId::new(1, 0))
            .unwrap();
        assert!((t.delta[0] - 1.2).abs() < 1e-15 && (t.delta[1] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn filter_versus_reselect() {
        let mut o = PlanOptions::new(1.0, 1);
        o.layers = LayerFilter::Range { lo: 1, hi: 1 };
        let filtered = build_plan(&bank_2x2(), &o).unwrap();
        assert!(filtered.targets.is_empty());
        assert_eq!(filtered.warnings.len(), 1);
        o.reselect = true;
        let re = build_plan(&bank_2x2(), &o).unwrap();
        assert_eq!(re.targets[0].head, HeadId::new(1, 0));
        o.layers = LayerFilter::Range { lo: 1, hi: 2 };
        assert!(build_plan(&bank_2x2(), &o).is_err());
        assert!(build_plan(&bank_2x2(), &PlanOptions::new(1.0, 5)).is_err());
    }

    #[test]
    fn trigram_ratio() {
        assert_eq!(distinct_trigram_ratio(&[1, 2, 3, 4]), 1.0);
        let loop_: Vec<TokenId> = vec![7; 50];
        let r = distinct_trigram_ratio(&loop_);
        assert!(r < COHERENCE_THRESHOLD && r > 0.0);
        assert_eq!(distinct_trigram_ratio(&[1, 2]), 1.0);
    }

    #[test]
    fn constant_alpha_correlation_undefined() {
        let row = |slant| SweepRow {
            alpha: 0.0,
            k: 1,
            issue: "a".into(),
            prompt: 0,
            seed: 0,
            length: 4,
            slant_proxy: slant,
            coherence: 1.0,
            coherent: true,
        };
        let s = summarize_rows(&[row(0.1), row(0.5)]);
        assert!(s.pooled.alpha_slant.is_none());
        assert!(s.mean_curve.alpha_slant.is_none());
    }
}
