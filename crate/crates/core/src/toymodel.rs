// SPDX-License-Identifier: MIT OR Apache-2.0

//! A miniature decoder-only transformer with read taps on every attention
//! head and additive write hooks.
//!
//! The residual stream follows the plain update
//!
//! ```text
//! u      = r_{l-1} + Σ_h Q_{l,h} x_{l,h}
//! r_l    = u + MLP_l(u)
//! x_{l,h} = ATTN_{l,h}(P_{l,h} r_{l-1})
//! logits = U r_L
//! ```
//!
//! with no layer normalization. A head's attention score between query
//! position `t` and key position `s <= t` is `q_t·k_s / sqrt(d) − recency·(t − s)`,
//! a per-head linear recency bias on top of dot-product attention.
//!
//! Taps record `x_{l,h}` before any hook delta is added; the delta is added
//! before projection by `Q_{l,h}`. Hooks apply at every position of the
//! sequence being run.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, norm, Matrix};

/// Token id in the toy vocabulary.
pub type TokenId = u32;

/// Half-width of the uniform distribution used for all non-planted weights.
pub const INIT_SCALE: f64 = 0.02;

/// A `(layer, head)` coordinate, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl std::fmt::Display for HeadId {
    /// 1-based, as printed in tables.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer + 1, self.head + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub vocab: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl ToyConfig {
    /// Config with `mlp_hidden = model_dim`.
    pub fn new(
        layers: usize,
        heads: usize,
        head_dim: usize,
        model_dim: usize,
        vocab: usize,
        seed: u64,
    ) -> Self {
        Self {
            layers,
            heads,
            head_dim,
            model_dim,
            vocab,
            mlp_hidden: model_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::validation(
                "layers, heads, head_dim and mlp_hidden must be >= 1",
            ));
        }
        if self.model_dim < self.head_dim {
            return Err(Error::validation(format!(
                "model_dim {} must be >= head_dim {}",
                self.model_dim, self.head_dim
            )));
        }
        if self.vocab < 2 {
            return Err(Error::validation("vocab must be >= 2"));
        }
        Ok(())
    }

    pub fn num_heads_total(&self) -> usize {
        self.layers * self.heads
    }

    pub(crate) fn head_index(&self, id: HeadId) -> usize {
        id.layer * self.heads + id.head
    }

    pub fn contains(&self, id: HeadId) -> bool {
        id.layer < self.layers && id.head < self.heads
    }
}

/// Parameters of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `P`, d × D: residual to head space (values).
    pub proj_in: Matrix,
    /// d × D query map.
    pub query: Matrix,
    /// d × D key map.
    pub key: Matrix,
    /// Linear penalty per position of distance, subtracted from scores.
    pub recency: f64,
    /// `Q`, D × d: head space back to the residual stream.
    pub proj_out: Matrix,
}

/// Per-layer two-matrix ReLU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// hidden × D
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    /// D × hidden
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ToyConfig,
    embed: Matrix,
    heads: Vec<HeadParams>,
    mlps: Vec<MlpParams>,
    unembed: Matrix,
}

/// One head activation at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTapRecord {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub activation: Vec<f64>,
}

/// Additive deltas per head, applied to the head activation before `Q`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionHook {
    deltas: BTreeMap<HeadId, Vec<f64>>,
}

impl InterventionHook {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a delta; each head may appear once.
    pub fn add(&mut self, head: HeadId, delta: Vec<f64>) -> Result<()> {
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite delta for head {head}"
            )));
        }
        if self.deltas.contains_key(&head) {
            return Err(Error::validation(format!(
                "head {head} already has an intervention"
            )));
        }
        self.deltas.insert(head, delta);
        Ok(())
    }

    /// Sums two hooks; heads present in both get the sum of their deltas.
    pub fn merge(&self, other: &InterventionHook) -> Result<InterventionHook> {
        let mut out = self.clone();
        for (head, delta) in &other.deltas {
            match out.deltas.get_mut(head) {
                Some(existing) => {
                    if existing.len() != delta.len() {
                        return Err(Error::validation(format!(
                            "cannot merge deltas of different length at {head}"
                        )));
                    }
                    existing.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
                }
                None => {
                    out.deltas.insert(*head, delta.clone());
                }
            }
        }
        Ok(out)
    }

    pub fn get(&self, head: HeadId) -> Option<&[f64]> {
        self.deltas.get(&head).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, &[f64])> {
        self.deltas.iter().map(|(h, d)| (*h, d.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    fn validate_for(&self, cfg: &ToyConfig) -> Result<()> {
        for (h, d) in &self.deltas {
            if !cfg.contains(*h) {
                return Err(Error::validation(format!(
                    "hook targets nonexistent head {h} (model has {} layers x {} heads)",
                    cfg.layers, cfg.heads
                )));
            }
            if d.len() != cfg.head_dim {
                return Err(Error::validation(format!(
                    "hook delta for {h} has length {}, head dim is {}",
                    d.len(),
                    cfg.head_dim
                )));
            }
        }
        Ok(())
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// seq_len × vocab
    pub logits: Matrix,
    /// Layer-major, then head, then position.
    pub taps: Vec<HeadTapRecord>,
    /// `r_0 .. r_L`, each seq_len × D.
    pub residuals: Vec<Matrix>,
    heads: usize,
    seq_len: usize,
}

impl ForwardOutput {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Activation of `head` at `position`, pre-hook.
    pub fn tap(&self, head: HeadId, position: usize) -> &[f64] {
        let idx = (head.layer * self.heads + head.head) * self.seq_len + position;
        &self.taps[idx].activation
    }

    /// All head activations at one position, layer-major order.
    pub fn taps_at(&self, position: usize) -> Vec<Vec<f64>> {
        let total = self.taps.len() / self.seq_len;
        (0..total)
            .map(|h| self.taps[h * self.seq_len + position].activation.clone())
            .collect()
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.seq_len - 1)
    }
}

/// How the next token is picked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    /// Argmax; ties go to the lowest token id.
    Greedy,
    /// Softmax sampling at `temperature` from a seeded stream.
    Temperature { temperature: f64, seed: u64 },
}

/// One generation step: activations at the final context position, and the
/// logits that produced the token.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub token: TokenId,
    /// Layer-major, one vector per head, pre-hook.
    pub taps: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// Prompt followed by generated tokens.
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub steps: Vec<StepRecord>,
}

impl Generation {
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Matrix::new(rows, cols, data).expect("finite by construction")
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

impl ToyTransformer {
    /// Every weight seeded uniform in `[-INIT_SCALE, INIT_SCALE]`, recency 0.
    pub fn random(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dm, v, m) = (
            config.head_dim,
            config.model_dim,
            config.vocab,
            config.mlp_hidden,
        );
        let embed = uniform_matrix(&mut rng, v, dm, INIT_SCALE);
        let heads = (0..config.num_heads_total())
            .map(|_| HeadParams {
                proj_in: uniform_matrix(&mut rng, d, dm, INIT_SCALE),
                query: uniform_matrix(&mut rng, d, dm, INIT_SCALE),
                key: uniform_matrix(&mut rng, d, dm, INIT_SCALE),
                recency: 0.0,
                proj_out: uniform_matrix(&mut rng, dm, d, INIT_SCALE),
            })
            .collect();
        let mlps = (0..config.layers)
            .map(|_| MlpParams {
                w_in: uniform_matrix(&mut rng, m, dm, INIT_SCALE),
                b_in: uniform_vec(&mut rng, m, INIT_SCALE),
                w_out: uniform_matrix(&mut rng, dm, m, INIT_SCALE),
                b_out: uniform_vec(&mut rng, dm, INIT_SCALE),
            })
            .collect();
        let unembed = uniform_matrix(&mut rng, v, dm, INIT_SCALE);
        Self::from_parts(config, embed, heads, mlps, unembed)
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        config: ToyConfig,
        embed: Matrix,
        heads: Vec<HeadParams>,
        mlps: Vec<MlpParams>,
        unembed: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let (d, dm, v, m) = (
            config.head_dim,
            config.model_dim,
            config.vocab,
            config.mlp_hidden,
        );
        let shape = |what: &str, mat: &Matrix, r: usize, c: usize| -> Result<()> {
            if mat.rows() != r || mat.cols() != c {
                return Err(Error::validation(format!(
                    "{what} is {}x{}, expected {r}x{c}",
                    mat.rows(),
                    mat.cols()
                )));
            }
            if mat.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("{what} has non-finite entries")));
            }
            Ok(())
        };
        shape("embedding", &embed, v, dm)?;
        shape("unembedding", &unembed, v, dm)?;
        if heads.len() != config.num_heads_total() {
            return Err(Error::validation(format!(
                "expected {} heads, got {}",
                config.num_heads_total(),
                heads.len()
            )));
        }
        for (i, h) in heads.iter().enumerate() {
            shape(&format!("head {i} proj_in"), &h.proj_in, d, dm)?;
            shape(&format!("head {i} query"), &h.query, d, dm)?;
            shape(&format!("head {i} key"), &h.key, d, dm)?;
            shape(&format!("head {i} proj_out"), &h.proj_out, dm, d)?;
            if !h.recency.is_finite() {
                return Err(Error::validation(format!("head {i} recency not finite")));
            }
        }
        if mlps.len() != config.layers {
            return Err(Error::validation(format!(
                "expected {} MLPs, got {}",
                config.layers,
                mlps.len()
            )));
        }
        for (i, mlp) in mlps.iter().enumerate() {
            shape(&format!("mlp {i} w_in"), &mlp.w_in, m, dm)?;
            shape(&format!("mlp {i} w_out"), &mlp.w_out, dm, m)?;
            if mlp.b_in.len() != m || mlp.b_out.len() != dm {
                return Err(Error::validation(format!("mlp {i} bias shape mismatch")));
            }
            if mlp.b_in.iter().chain(&mlp.b_out).any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("mlp {i} bias not finite")));
            }
        }
        Ok(Self {
            config,
            embed,
            heads,
            mlps,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn embed(&self) -> &Matrix {
        &self.embed
    }

    pub fn unembed(&self) -> &Matrix {
        &self.unembed
    }

    pub fn head(&self, id: HeadId) -> &HeadParams {
        &self.heads[self.config.head_index(id)]
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    pub fn mlps(&self) -> &[MlpParams] {
        &self.mlps
    }

    /// Decomposes into `(config, embed, heads, mlps, unembed)`.
    pub fn into_parts(self) -> (ToyConfig, Matrix, Vec<HeadParams>, Vec<MlpParams>, Matrix) {
        (self.config, self.embed, self.heads, self.mlps, self.unembed)
    }

    /// Runs the full sequence, recording every head activation.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        hook: Option<&InterventionHook>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::validation("token sequence is empty"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::validation(format!(
                "token id {bad} out of vocabulary (size {})",
                cfg.vocab
            )));
        }
        if let Some(h) = hook {
            h.validate_for(cfg)?;
        }
        let t_len = tokens.len();
        let (d, dm) = (cfg.head_dim, cfg.model_dim);
        let scale = 1.0 / (d as f64).sqrt();

        let mut r = Matrix::zeros(t_len, dm);
        for (pos, &tok) in tokens.iter().enumerate() {
            r.row_mut(pos).copy_from_slice(self.embed.row(tok as usize));
        }
        let mut residuals = Vec::with_capacity(cfg.layers + 1);
        residuals.push(r.clone());
        let mut taps = Vec::with_capacity(cfg.num_heads_total() * t_len);

        let mut values = vec![vec![0.0; d]; t_len];
        let mut keys = vec![vec![0.0; d]; t_len];
        let mut weights = vec![0.0; t_len];

        for layer in 0..cfg.layers {
            let mut u = r.clone();
            for head in 0..cfg.heads {
                let id = HeadId::new(layer, head);
                let hp = &self.heads[cfg.head_index(id)];
                let delta = hook.and_then(|h| h.get(id));
                for s in 0..t_len {
                    values[s] = hp.proj_in.mul_vec(r.row(s));
                    keys[s] = hp.key.mul_vec(r.row(s));
                }
                for t in 0..t_len {
                    let q = hp.query.mul_vec(r.row(t));
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let score = dot(&q, &keys[s]) * scale - hp.recency * (t - s) as f64;
                        weights[s] = score;
                        max = max.max(score);
                    }
                    let mut z = 0.0;
                    for w in &mut weights[..=t] {
                        *w = (*w - max).exp();
                        z += *w;
                    }
                    let mut x = vec![0.0; d];
                    for s in 0..=t {
                        let a = weights[s] / z;
                        if a == 0.0 {
                            continue;
                        }
                        for (xi, vi) in x.iter_mut().zip(&values[s]) {
                            *xi += a * vi;
                        }
                    }
                    let mut x_eff = x.clone();
                    if let Some(delta) = delta {
                        for (xi, di) in x_eff.iter_mut().zip(delta) {
                            *xi += di;
                        }
                    }
                    hp.proj_out.mul_vec_add(&x_eff, u.row_mut(t));
                    taps.push(HeadTapRecord {
                        layer,
                        head,
                        position: t,
                        activation: x,
                    });
                }
            }
            let mlp = &self.mlps[layer];
            let mut next = u.clone();
            for t in 0..t_len {
                let mut hidden = mlp.w_in.mul_vec(u.row(t));
                for (h, b) in hidden.iter_mut().zip(&mlp.b_in) {
                    *h = (*h + b).max(0.0);
                }
                let row = next.row_mut(t);
                mlp.w_out.mul_vec_add(&hidden, row);
                for (o, b) in row.iter_mut().zip(&mlp.b_out) {
                    *o += b;
                }
            }
            r = next;
            residuals.push(r.clone());
        }

        let mut logits = Matrix::zeros(t_len, cfg.vocab);
        for t in 0..t_len {
            let out = self.unembed.mul_vec(r.row(t));
            logits.row_mut(t).copy_from_slice(&out);
        }
        if logits.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "forward pass produced non-finite logits".into(),
            ));
        }
        Ok(ForwardOutput {
            logits,
            taps,
            residuals,
            heads: cfg.heads,
            seq_len: t_len,
        })
    }

    /// Autoregressive generation; `hook` is applied on every forward pass.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        steps: usize,
        hook: Option<&InterventionHook>,
        sampler: Sampler,
        stop_token: Option<TokenId>,
    ) -> Result<Generation> {
        if steps == 0 {
            return Err(Error::validation("steps must be >= 1"));
        }
        if let Sampler::Temperature { temperature, .. } = sampler {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::validation("temperature must be finite and > 0"));
            }
        }
        let mut rng = match sampler {
            Sampler::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Sampler::Greedy => None,
        };
        let mut tokens = prompt.to_vec();
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            let out = self.forward(&tokens, hook)?;
            let last = out.seq_len() - 1;
            let logits = out.last_logits().to_vec();
            let token = match (sampler, rng.as_mut()) {
                (Sampler::Temperature { temperature, .. }, Some(rng)) => {
                    sample_softmax(&logits, temperature, rng)
                }
                _ => argmax(&logits),
            };
            records.push(StepRecord {
                token,
                taps: out.taps_at(last),
                logits,
            });
            tokens.push(token);
            if stop_token == Some(token) {
                break;
            }
        }
        Ok(Generation {
            tokens,
            prompt_len: prompt.len(),
            steps: records,
        })
    }
}

fn argmax(v: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample_softmax(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i as TokenId;
        }
        u -= wi;
    }
    (w.len() - 1) as TokenId
}

// ---------------------------------------------------------------------------
// Planted-concept construction
// ---------------------------------------------------------------------------

/// Residual coordinate carrying each token's concept value.
pub const CONCEPT_COORD: usize = 0;
/// Residual coordinate the planted head writes and the HI/LO readout reads.
pub const READOUT_COORD: usize = 1;
/// Residual coordinate that is 1 for every token.
pub const BIAS_COORD: usize = 2;
/// First coordinate of the noise subspace.
pub const NOISE_START: usize = 3;
/// Token whose concept value is −1.
pub const TOKEN_LO: TokenId = 0;
/// Token whose concept value is +1.
pub const TOKEN_HI: TokenId = 1;
/// Recency bias of the planted head; large enough that attention falls
/// entirely on the current position.
pub const PLANTED_RECENCY: f64 = 1.0e3;

/// Concept value a token carries in a planted model: LO = −1, HI = +1,
/// remaining tokens evenly spaced over `[-1, 1]`.
pub fn planted_concept_value(vocab: usize, token: TokenId) -> f64 {
    match token {
        TOKEN_LO => -1.0,
        TOKEN_HI => 1.0,
        t => {
            let others = vocab.saturating_sub(2);
            if others <= 1 {
                0.0
            } else {
                -1.0 + 2.0 * (t as f64 - 2.0) / (others as f64 - 1.0)
            }
        }
    }
}

/// Where and how strongly a concept is planted.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub head: HeadId,
    pub direction: Vec<f64>,
    /// Gain from the planted concept value to `logit(HI) − logit(LO)`.
    pub readout_gain: f64,
}

/// Builds a model whose planted head emits `c·v` (plus noise orthogonal to
/// `v`) for a current token with concept value `c`, and whose HI−LO logit
/// difference reads that component with gain `γ`.
///
/// Residual layout: coordinate 0 holds the token's concept value, 1 the
/// readout channel, 2 a constant 1, and the rest is a noise subspace. Only
/// the planted head reads coordinate 0 or writes coordinate 1. Every other
/// head reads the noise subspace but has a zero output projection, so its
/// activation is observable while interventions on it leave every logit
/// untouched. MLPs read and write the noise subspace only.
pub fn plant_concept_model(config: ToyConfig, spec: &PlantSpec) -> Result<ToyTransformer> {
    config.validate()?;
    let (d, dm, v, m) = (
        config.head_dim,
        config.model_dim,
        config.vocab,
        config.mlp_hidden,
    );
    if dm <= NOISE_START {
        return Err(Error::validation(format!(
            "planting needs model_dim >= {}, got {dm}",
            NOISE_START + 1
        )));
    }
    if !config.contains(spec.head) {
        return Err(Error::validation(format!(
            "planted head {} outside a {}x{} model",
            spec.head, config.layers, config.heads
        )));
    }
    if spec.direction.len() != d {
        return Err(Error::validation(format!(
            "direction has length {}, head dim is {d}",
            spec.direction.len()
        )));
    }
    let vnorm = norm(&spec.direction);
    if !(vnorm > 0.0) || !vnorm.is_finite() {
        return Err(Error::validation("planted direction is degenerate"));
    }
    if !spec.readout_gain.is_finite() {
        return Err(Error::validation("readout gain must be finite"));
    }
    let dir = &spec.direction;
    let unit: Vec<f64> = dir.iter().map(|x| x / vnorm).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Zero outside the noise subspace; rows or columns depending on role.
    let noise_cols = |rng: &mut ChaCha8Rng, rows: usize| {
        let mut mat = Matrix::zeros(rows, dm);
        for r in 0..rows {
            for c in NOISE_START..dm {
                mat.set(r, c, rng.random_range(-INIT_SCALE..=INIT_SCALE));
            }
        }
        mat
    };
    let noise_rows = |rng: &mut ChaCha8Rng, cols: usize| {
        let mut mat = Matrix::zeros(dm, cols);
        for r in NOISE_START..dm {
            for c in 0..cols {
                mat.set(r, c, rng.random_range(-INIT_SCALE..=INIT_SCALE));
            }
        }
        mat
    };

    let mut embed = noise_cols(&mut rng, v);
    for tok in 0..v {
        embed.set(tok, CONCEPT_COORD, planted_concept_value(v, tok as TokenId));
        embed.set(tok, BIAS_COORD, 1.0);
    }

    let mut heads = Vec::with_capacity(config.num_heads_total());
    for layer in 0..config.layers {
        for head in 0..config.heads {
            let id = HeadId::new(layer, head);
            let mut hp = HeadParams {
                proj_in: noise_cols(&mut rng, d),
                query: noise_cols(&mut rng, d),
                key: noise_cols(&mut rng, d),
                recency: 0.0,
                proj_out: noise_rows(&mut rng, d),
            };
            if id == spec.head {
                // Project the noise read-in off the planted direction.
                for c in NOISE_START..dm {
                    let col: Vec<f64> = (0..d).map(|r| hp.proj_in.get(r, c)).collect();
                    let along = dot(&col, &unit);
                    for r in 0..d {
                        hp.proj_in.set(r, c, col[r] - along * unit[r]);
                    }
                }
                for r in 0..d {
                    hp.proj_in.set(r, CONCEPT_COORD, dir[r]);
                    hp.proj_out.set(READOUT_COORD, r, dir[r] / (vnorm * vnorm));
                }
                hp.query = Matrix::zeros(d, dm);
                hp.key = Matrix::zeros(d, dm);
                hp.recency = PLANTED_RECENCY;
            } else {
                hp.proj_out = Matrix::zeros(dm, d);
            }
            heads.push(hp);
        }
    }

    let mlps = (0..config.layers)
        .map(|_| {
            let w_in = noise_cols(&mut rng, m);
            let b_in = uniform_vec(&mut rng, m, INIT_SCALE);
            let w_out = noise_rows(&mut rng, m);
            let mut b_out = vec![0.0; dm];
            for b in &mut b_out[NOISE_START..] {
                *b = rng.random_range(-INIT_SCALE..=INIT_SCALE);
            }
            MlpParams {
                w_in,
                b_in,
                w_out,
                b_out,
            }
        })
        .collect();

    let mut unembed = Matrix::zeros(v, dm);
    for tok in 0..v {
        unembed.set(tok, BIAS_COORD, rng.random_range(-INIT_SCALE..=INIT_SCALE));
        for c in NOISE_START..dm {
            unembed.set(tok, c, rng.random_range(-INIT_SCALE..=INIT_SCALE));
        }
    }
    // HI and LO share everything except the readout channel.
    let shared = unembed.row(TOKEN_LO as usize).to_vec();
    unembed.row_mut(TOKEN_HI as usize).copy_from_slice(&shared);
    unembed.set(TOKEN_HI as usize, READOUT_COORD, spec.readout_gain / 2.0);
    unembed.set(TOKEN_LO as usize, READOUT_COORD, -spec.readout_gain / 2.0);

    ToyTransformer::from_parts(config, embed, heads, mlps, unembed)
}

/// `logit(HI) − logit(LO)` at the last position.
pub fn hi_lo_difference(out: &ForwardOutput) -> f64 {
    let l = out.last_logits();
    l[TOKEN_HI as usize] - l[TOKEN_LO as usize]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ToyConfig {
        ToyConfig::new(2, 3, 4, 8, 10, 7)
    }

    fn planted() -> (ToyTransformer, PlantSpec) {
        let spec = PlantSpec {
            head: HeadId::new(1, 2),
            direction: vec![1.0, -2.0, 0.5, 3.0],
            readout_gain: 2.0,
        };
        (plant_concept_model(small_cfg(), &spec).unwrap(), spec)
    }

    #[test]
    fn zeroed_outputs_pass_embedding_through() {
        let (cfg, embed, mut heads, mut mlps, unembed) =
            ToyTransformer::random(small_cfg()).unwrap().into_parts();
        for h in &mut heads {
            h.proj_out = Matrix::zeros(cfg.model_dim, cfg.head_dim);
        }
        for m in &mut mlps {
            m.w_in = Matrix::zeros(cfg.mlp_hidden, cfg.model_dim);
            m.w_out = Matrix::zeros(cfg.model_dim, cfg.mlp_hidden);
            m.b_in.iter_mut().for_each(|b| *b = 0.0);
            m.b_out.iter_mut().for_each(|b| *b = 0.0);
        }
        let model = ToyTransformer::from_parts(cfg, embed, heads, mlps, unembed).unwrap();
        let toks = [3, 1, 4];
        let out = model.forward(&toks, None).unwrap();
        for (t, &tok) in toks.iter().enumerate() {
            let expect = model.unembed().mul_vec(model.embed().row(tok as usize));
            assert_eq!(out.logits.row(t), expect.as_slice());
        }
    }

    #[test]
    fn zero_hook_is_identity() {
        let model = ToyTransformer::random(small_cfg()).unwrap();
        let mut hook = InterventionHook::new();
        for l in 0..2 {
            for h in 0..3 {
                hook.add(HeadId::new(l, h), vec![0.0; 4]).unwrap();
            }
        }
        let a = model.forward(&[1, 2, 3], None).unwrap();
        let b = model.forward(&[1, 2, 3], Some(&hook)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn tap_shape() {
        let model = ToyTransformer::random(small_cfg()).unwrap();
        let out = model.forward(&[0, 5, 9, 2], None).unwrap();
        assert_eq!(out.taps.len(), 2 * 3 * 4);
        assert!(out.taps.iter().all(|t| t.activation.len() == 4));
        for pos in 0..4 {
            assert_eq!(out.taps_at(pos).len(), 6);
        }
    }

    #[test]
    fn validation_errors() {
        let model = ToyTransformer::random(small_cfg()).unwrap();
        assert!(matches!(
            model.forward(&[10], None),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            model.forward(&[], None),
            Err(Error::Validation(_))
        ));
        let mut hook = InterventionHook::new();
        hook.add(HeadId::new(2, 0), vec![0.0; 4]).unwrap();
        assert!(matches!(
            model.forward(&[1], Some(&hook)),
            Err(Error::Validation(_))
        ));
        let mut hook = InterventionHook::new();
        hook.add(HeadId::new(0, 0), vec![0.0; 3]).unwrap();
        assert!(model.forward(&[1], Some(&hook)).is_err());
        let mut hook = InterventionHook::new();
        hook.add(HeadId::new(0, 0), vec![0.0; 4]).unwrap();
        assert!(hook.add(HeadId::new(0, 0), vec![1.0; 4]).is_err());
        assert!(hook.add(HeadId::new(0, 1), vec![f64::NAN; 4]).is_err());
        assert!(model
            .generate(&[1], 0, None, Sampler::Greedy, None)
            .is_err());
    }

    #[test]
    fn hook_additivity() {
        let model = ToyTransformer::random(small_cfg()).unwrap();
        let head = HeadId::new(0, 1);
        let d1 = vec![0.3, -1.0, 2.0, 0.25];
        let d2 = vec![-0.5, 0.5, 1.0, 4.0];
        let both: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a + b).collect();
        let mut single = InterventionHook::new();
        single.add(head, both).unwrap();
        let (mut h1, mut h2) = (InterventionHook::new(), InterventionHook::new());
        h1.add(head, d1).unwrap();
        h2.add(head, d2).unwrap();
        let combined = h1.merge(&h2).unwrap();
        let a = model.forward(&[2, 7, 1], Some(&combined)).unwrap();
        let b = model.forward(&[2, 7, 1], Some(&single)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn residual_accounting_single_layer() {
        let cfg = ToyConfig::new(1, 3, 4, 8, 10, 11);
        let (cfg, embed, heads, mut mlps, unembed) =
            ToyTransformer::random(cfg).unwrap().into_parts();
        for m in &mut mlps {
            m.w_out = Matrix::zeros(cfg.model_dim, cfg.mlp_hidden);
            m.b_out.iter_mut().for_each(|b| *b = 0.0);
        }
        let model = ToyTransformer::from_parts(cfg, embed, heads, mlps, unembed).unwrap();
        let mut hook = InterventionHook::new();
        let delta = vec![0.5, -0.25, 1.0, 2.0];
        hook.add(HeadId::new(0, 1), delta.clone()).unwrap();
        let toks = [4, 0, 6];
        let out = model.forward(&toks, Some(&hook)).unwrap();
        for t in 0..toks.len() {
            let mut expect = vec![0.0; cfg.model_dim];
            for h in 0..cfg.heads {
                let id = HeadId::new(0, h);
                let mut x = out.tap(id, t).to_vec();
                if let Some(d) = hook.get(id) {
                    x.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                model.head(id).proj_out.mul_vec_add(&x, &mut expect);
            }
            for c in 0..cfg.model_dim {
                let diff = out.residuals[1].get(t, c) - out.residuals[0].get(t, c);
                assert!((diff - expect[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn planted_head_emits_concept_times_direction() {
        let (model, spec) = planted();
        let tok = 5;
        let c = planted_concept_value(10, tok);
        let out = model.forward(&[3, 8, tok], None).unwrap();
        let x = out.tap(spec.head, 2);
        let vnorm2 = dot(&spec.direction, &spec.direction);
        let along = dot(x, &spec.direction) / vnorm2;
        assert!((along - c).abs() < 1e-12);
    }

    #[test]
    fn planted_readout_gain() {
        let (model, _) = planted();
        let vocab = 10;
        // token with concept 0 does not exist for vocab 10; compare two tokens.
        let lo = model.forward(&[TOKEN_LO], None).unwrap();
        let hi = model.forward(&[TOKEN_HI], None).unwrap();
        assert!((hi_lo_difference(&lo) + 2.0).abs() < 1e-12);
        assert!((hi_lo_difference(&hi) - 2.0).abs() < 1e-12);
        let tok = 4;
        let c = planted_concept_value(vocab, tok);
        let mid = model.forward(&[tok], None).unwrap();
        assert!((hi_lo_difference(&mid) - 2.0 * c).abs() < 1e-12);
    }

    #[test]
    fn planted_delta_shifts_readout() {
        let (model, spec) = planted();
        let base = hi_lo_difference(&model.forward(&[6, 2], None).unwrap());
        let alpha = 1.7;
        let mut hook = InterventionHook::new();
        hook.add(
            spec.head,
            spec.direction.iter().map(|v| alpha * v).collect(),
        )
        .unwrap();
        let steered = hi_lo_difference(&model.forward(&[6, 2], Some(&hook)).unwrap());
        assert!((steered - base - spec.readout_gain * alpha).abs() < 1e-10);
    }

    #[test]
    fn other_heads_do_not_move_readout() {
        let (model, spec) = planted();
        let base = hi_lo_difference(&model.forward(&[6, 2, 9], None).unwrap());
        for l in 0..2 {
            for h in 0..3 {
                let id = HeadId::new(l, h);
                if id == spec.head {
                    continue;
                }
                let mut hook = InterventionHook::new();
                hook.add(id, vec![50.0, -30.0, 20.0, 10.0]).unwrap();
                let out = model.forward(&[6, 2, 9], Some(&hook)).unwrap();
                let moved = hi_lo_difference(&out);
                assert!((moved - base).abs() < 1e-10, "{id}: {}", moved - base);
                let plain = model.forward(&[6, 2, 9], None).unwrap();
                assert_eq!(out.logits, plain.logits, "{id}");
            }
        }
    }

    #[test]
    fn plant_validation() {
        let bad = PlantSpec {
            head: HeadId::new(0, 0),
            direction: vec![0.0; 4],
            readout_gain: 1.0,
        };
        assert!(plant_concept_model(small_cfg(), &bad).is_err());
        let outside = PlantSpec {
            head: HeadId::new(5, 0),
            direction: vec![1.0; 4],
            readout_gain: 1.0,
        };
        assert!(plant_concept_model(small_cfg(), &outside).is_err());
    }

    #[test]
    fn greedy_and_seeded_generation_deterministic() {
        let model = ToyTransformer::random(small_cfg()).unwrap();
        let a = model
            .generate(&[1, 2], 6, None, Sampler::Greedy, None)
            .unwrap();
        let b = model
            .generate(&[1, 2], 6, None, Sampler::Greedy, None)
            .unwrap();
        assert_eq!(a.tokens, b.tokens);
        let s = Sampler::Temperature {
            temperature: 1.0,
            seed: 99,
        };
        let a = model.generate(&[1, 2], 8, None, s, None).unwrap();
        let b = model.generate(&[1, 2], 8, None, s, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.generated().len(), 8);
    }

    #[test]
    fn steered_planted_model_emits_hi() {
        let (model, spec) = planted();
        let mut hook = InterventionHook::new();
        hook.add(spec.head, spec.direction.iter().map(|v| 25.0 * v).collect())
            .unwrap();
        let g = model
            .generate(&[TOKEN_LO, 4], 5, Some(&hook), Sampler::Greedy, None)
            .unwrap();
        assert!(g.generated().iter().all(|&t| t == TOKEN_HI));
    }

    #[test]
    fn stop_token_ends_generation() {
        let (model, spec) = planted();
        let mut hook = InterventionHook::new();
        hook.add(spec.head, spec.direction.iter().map(|v| 25.0 * v).collect())
            .unwrap();
        let g = model
            .generate(&[4], 5, Some(&hook), Sampler::Greedy, Some(TOKEN_HI))
            .unwrap();
        assert_eq!(g.generated(), &[TOKEN_HI]);
    }
}
