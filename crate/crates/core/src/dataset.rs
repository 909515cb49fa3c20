// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled probing datasets: per-sample head activations plus a scalar label.
//!
//! Datasets come from three places: synthetic planted-concept generation,
//! forward passes of a [`ToyTransformer`], and activation dumps written by
//! external tooling (see [`crate::traceio`]).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::toymodel::{HeadId, TokenId, ToyTransformer};

/// Activations for `n` samples, stored `[sample][layer][head][dim]` as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    n: usize,
    layers: usize,
    heads: usize,
    dim: usize,
    values: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(
        n: usize,
        layers: usize,
        heads: usize,
        dim: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if n == 0 || layers == 0 || heads == 0 || dim == 0 {
            return Err(Error::validation("activation tensor dims must be > 0"));
        }
        if values.len() != n * layers * heads * dim {
            return Err(Error::validation(format!(
                "activation payload has {} values, dims imply {}",
                values.len(),
                n * layers * heads * dim
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite activation at flat index {i}"
            )));
        }
        Ok(Self {
            n,
            layers,
            heads,
            dim,
            values,
        })
    }

    pub fn zeros(n: usize, layers: usize, heads: usize, dim: usize) -> Result<Self> {
        Self::new(n, layers, heads, dim, vec![0.0; n * layers * heads * dim])
    }

    /// `(n, layers, heads, dim)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.layers, self.heads, self.dim)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    fn offset(&self, sample: usize, head: HeadId) -> usize {
        ((sample * self.layers + head.layer) * self.heads + head.head) * self.dim
    }

    pub fn head_vector(&self, sample: usize, head: HeadId) -> &[f32] {
        let o = self.offset(sample, head);
        &self.values[o..o + self.dim]
    }

    /// Overwrites one head vector; values must be finite.
    pub fn set_head_vector(&mut self, sample: usize, head: HeadId, v: &[f32]) -> Result<()> {
        if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(
                "head vector has wrong length or non-finite values",
            ));
        }
        let o = self.offset(sample, head);
        self.values[o..o + self.dim].copy_from_slice(v);
        Ok(())
    }

    /// Stacks one head's activations (as `f64`) for the given samples.
    pub fn head_matrix(&self, head: HeadId, samples: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(samples.len() * self.dim);
        for &s in samples {
            data.extend(self.head_vector(s, head).iter().map(|&v| f64::from(v)));
        }
        Matrix::new(samples.len(), self.dim, data).expect("finite by invariant")
    }

    /// Multiplies one head's activations, across all samples, by `c`.
    pub fn scale_head(&mut self, head: HeadId, c: f32) {
        for s in 0..self.n {
            let o = self.offset(s, head);
            self.values[o..o + self.dim]
                .iter_mut()
                .for_each(|v| *v *= c);
        }
    }

    pub fn heads_iter(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.layers).flat_map(move |l| (0..self.heads).map(move |h| HeadId::new(l, h)))
    }
}

/// Labeled activations, the unit every probing operation consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    ids: Vec<String>,
    names: Vec<String>,
    /// Optional per-sample group tag (empty string = none).
    groups: Vec<String>,
    labels: Vec<f64>,
    activations: ActivationTensor,
    pub metadata: BTreeMap<String, String>,
}

impl ProbeDataset {
    pub fn new(
        ids: Vec<String>,
        names: Vec<String>,
        groups: Vec<String>,
        labels: Vec<f64>,
        activations: ActivationTensor,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let n = activations.n;
        if n < 2 {
            return Err(Error::validation(format!("dataset needs N >= 2, got {n}")));
        }
        for (what, len) in [
            ("ids", ids.len()),
            ("names", names.len()),
            ("groups", groups.len()),
            ("labels", labels.len()),
        ] {
            if len != n {
                return Err(Error::validation(format!(
                    "{what} has {len} entries for {n} samples"
                )));
            }
        }
        if let Some(i) = labels.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("label {i} is not finite")));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::validation(format!("duplicate sample id {dup:?}")));
        }
        Ok(Self {
            ids,
            names,
            groups,
            labels,
            activations,
            metadata,
        })
    }

    /// Convenience constructor with generated ids (`s0000`, …) and no groups.
    pub fn from_parts(labels: Vec<f64>, activations: ActivationTensor) -> Result<Self> {
        let n = activations.n;
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:04}")).collect();
        Self::new(
            ids.clone(),
            ids,
            vec![String::new(); n],
            labels,
            activations,
            BTreeMap::new(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn activations(&self) -> &ActivationTensor {
        &self.activations
    }

    pub fn activations_mut(&mut self) -> &mut ActivationTensor {
        &mut self.activations
    }

    /// `(layers, heads, dim)`
    pub fn shape(&self) -> (usize, usize, usize) {
        let (_, l, h, d) = self.activations.dims();
        (l, h, d)
    }

    /// Same activations, new labels.
    pub fn with_labels(&self, labels: Vec<f64>) -> Result<Self> {
        Self::new(
            self.ids.clone(),
            self.names.clone(),
            self.groups.clone(),
            labels,
            self.activations.clone(),
            self.metadata.clone(),
        )
    }

    pub fn with_groups(mut self, groups: Vec<String>) -> Result<Self> {
        if groups.len() != self.len() {
            return Err(Error::validation("group list length differs from N"));
        }
        self.groups = groups;
        Ok(self)
    }

    /// Replaces labels by matching sample ids against a label table.
    pub fn attach_labels(&self, rows: &[LabelRow]) -> Result<Self> {
        let by_id: BTreeMap<&str, &LabelRow> = rows.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut labels = Vec::with_capacity(self.len());
        let mut names = Vec::with_capacity(self.len());
        for id in &self.ids {
            let row = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::validation(format!("no label for sample id {id:?}")))?;
            labels.push(row.label);
            names.push(row.name.clone());
        }
        let mut ds = self.with_labels(labels)?;
        ds.names = names;
        Ok(ds)
    }

    /// Short content hash over dims, labels and activations.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let (n, l, hh, d) = self.activations.dims();
        for v in [n, l, hh, d] {
            h.update((v as u64).to_le_bytes());
        }
        for y in &self.labels {
            h.update(y.to_le_bytes());
        }
        for v in &self.activations.values {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn folds(&self, k: usize, seed: u64) -> Result<FoldAssignment> {
        make_folds(self.len(), k, seed)
    }
}

/// One row of a label table (`id,name,label`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub name: String,
    pub label: f64,
}

/// Reads a delimiter-separated label table with header `id,name,label`.
/// The delimiter is a tab if the header contains one, otherwise a comma.
pub fn read_label_table(path: &Path) -> Result<Vec<LabelRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_table(&text)
}

pub fn parse_label_table(text: &str) -> Result<Vec<LabelRow>> {
    let delim = if text.lines().next().is_some_and(|l| l.contains('\t')) {
        b'\t'
    } else {
        b','
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<LabelRow>().enumerate() {
        let row = rec.map_err(|e| Error::Format(format!("label table row {}: {e}", i + 1)))?;
        if !row.label.is_finite() {
            return Err(Error::Format(format!(
                "label table row {}: non-finite label",
                i + 1
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Synthetic planted datasets
// ---------------------------------------------------------------------------

/// A head carrying `gain · y · direction + noise · ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedHead {
    pub head: HeadId,
    pub direction: Vec<f64>,
    pub gain: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub planted: Vec<PlantedHead>,
    /// Standard deviation of the pure-noise heads.
    pub background_noise: f64,
    pub seed: u64,
}

/// Direction with i.i.d. standard-normal entries.
pub fn random_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Labels uniform on `[-1, 1]` (rounded to `f32` so they survive a dump),
/// planted heads `gain·y·direction + noise·ε`, all other heads
/// `background_noise·ε`, with ε standard normal.
pub fn synth_planted(cfg: &SynthConfig) -> Result<ProbeDataset> {
    if cfg.n < 4 {
        return Err(Error::validation(format!(
            "synth_planted needs N >= 4, got {}",
            cfg.n
        )));
    }
    if !(cfg.background_noise >= 0.0) {
        return Err(Error::validation("background noise must be >= 0"));
    }
    let mut planted: BTreeMap<HeadId, &PlantedHead> = BTreeMap::new();
    for p in &cfg.planted {
        if p.head.layer >= cfg.layers || p.head.head >= cfg.heads {
            return Err(Error::validation(format!(
                "planted head {} out of range",
                p.head
            )));
        }
        if p.direction.len() != cfg.dim {
            return Err(Error::validation(format!(
                "planted direction for {} has length {}, dim is {}",
                p.head,
                p.direction.len(),
                cfg.dim
            )));
        }
        if p.direction.iter().all(|v| *v == 0.0) || p.direction.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "planted direction for {} is zero or non-finite",
                p.head
            )));
        }
        if !(p.gain >= 0.0) || !(p.noise >= 0.0) {
            return Err(Error::validation("gains and noise scales must be >= 0"));
        }
        if planted.insert(p.head, p).is_some() {
            return Err(Error::validation(format!("head {} planted twice", p.head)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<f64> = (0..cfg.n)
        .map(|_| f64::from(rng.random_range(-1.0..=1.0_f64) as f32))
        .collect();
    let mut values = Vec::with_capacity(cfg.n * cfg.layers * cfg.heads * cfg.dim);
    for &y in &labels {
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                match planted.get(&HeadId::new(l, h)) {
                    Some(p) => {
                        for &v in &p.direction {
                            let eps: f64 = rng.sample(StandardNormal);
                            values.push((p.gain * y * v + p.noise * eps) as f32);
                        }
                    }
                    None => {
                        for _ in 0..cfg.dim {
                            let eps: f64 = rng.sample(StandardNormal);
                            values.push((cfg.background_noise * eps) as f32);
                        }
                    }
                }
            }
        }
    }
    let tensor = ActivationTensor::new(cfg.n, cfg.layers, cfg.heads, cfg.dim, values)?;
    let mut ds = ProbeDataset::from_parts(labels, tensor)?;
    ds.metadata
        .insert("label_source".into(), "synthetic-uniform".into());
    ds.metadata
        .insert("generator".into(), "synth_planted".into());
    ds.metadata.insert("seed".into(), cfg.seed.to_string());
    let heads: Vec<String> = cfg.planted.iter().map(|p| p.head.to_string()).collect();
    ds.metadata.insert("planted_heads".into(), heads.join(" "));
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Toy-model datasets
// ---------------------------------------------------------------------------

/// Which prompt position the activations are read at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    /// Final prompt token.
    Last,
    /// Fixed 0-based index.
    Index(usize),
    /// Mean over all prompt positions.
    Mean,
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Position::Last => write!(f, "last"),
            Position::Index(i) => write!(f, "index:{i}"),
            Position::Mean => write!(f, "mean"),
        }
    }
}

/// Runs every prompt through the model and records head activations at `position`.
pub fn from_toy_model(
    model: &ToyTransformer,
    prompts: &[Vec<TokenId>],
    labels: &[f64],
    position: Position,
) -> Result<ProbeDataset> {
    if prompts.is_empty() {
        return Err(Error::validation("no prompts"));
    }
    if prompts.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} prompts but {} labels",
            prompts.len(),
            labels.len()
        )));
    }
    let cfg = model.config();
    let (l, h, d) = (cfg.layers, cfg.heads, cfg.head_dim);
    let mut values = Vec::with_capacity(prompts.len() * l * h * d);
    for (i, prompt) in prompts.iter().enumerate() {
        let out = model.forward(prompt, None)?;
        let per_head: Vec<Vec<f64>> = match position {
            Position::Last => out.taps_at(prompt.len() - 1),
            Position::Index(p) => {
                if p >= prompt.len() {
                    return Err(Error::validation(format!(
                        "prompt {i} has length {}, cannot read position {p}",
                        prompt.len()
                    )));
                }
                out.taps_at(p)
            }
            Position::Mean => {
                let mut acc = vec![vec![0.0; d]; l * h];
                for p in 0..prompt.len() {
                    for (a, x) in acc.iter_mut().zip(out.taps_at(p)) {
                        a.iter_mut().zip(&x).for_each(|(s, v)| *s += v);
                    }
                }
                let k = prompt.len() as f64;
                acc.iter_mut().flatten().for_each(|v| *v /= k);
                acc
            }
        };
        values.extend(per_head.iter().flatten().map(|&v| v as f32));
    }
    let tensor = ActivationTensor::new(prompts.len(), l, h, d, values)?;
    let mut ds = ProbeDataset::from_parts(labels.to_vec(), tensor)?;
    ds.metadata.insert("generator".into(), "toy_model".into());
    ds.metadata.insert("position".into(), position.to_string());
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Label transforms and folds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelTransform {
    /// `y ← y³`
    Cubic,
    /// `y ← sin(10 y)`
    Sin10,
    /// `y ← y[Δ(i)]` for a seeded permutation Δ.
    Permute { seed: u64 },
    /// `y ← y[Δ(i)]` for an explicit permutation.
    PermuteWith(Vec<usize>),
}

impl LabelTransform {
    pub fn name(&self) -> &'static str {
        match self {
            LabelTransform::Cubic => "cubic",
            LabelTransform::Sin10 => "sin10",
            LabelTransform::Permute { .. } | LabelTransform::PermuteWith(_) => "permute",
        }
    }
}

/// Seeded permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

pub fn transform_labels(ds: &ProbeDataset, kind: &LabelTransform) -> Result<ProbeDataset> {
    let y = ds.labels();
    let new: Vec<f64> = match kind {
        LabelTransform::Cubic => y.iter().map(|v| v * v * v).collect(),
        LabelTransform::Sin10 => y.iter().map(|v| (10.0 * v).sin()).collect(),
        LabelTransform::Permute { seed } => seeded_permutation(y.len(), *seed)
            .iter()
            .map(|&j| y[j])
            .collect(),
        LabelTransform::PermuteWith(perm) => {
            let mut seen = vec![false; y.len()];
            if perm.len() != y.len()
                || perm
                    .iter()
                    .any(|&j| j >= y.len() || std::mem::replace(&mut seen[j], true))
            {
                return Err(Error::validation("not a permutation of the sample indices"));
            }
            perm.iter().map(|&j| y[j]).collect()
        }
    };
    let mut out = ds.with_labels(new)?;
    out.metadata.insert("transform".into(), kind.name().into());
    Ok(out)
}

/// Seeded partition of samples into `k` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// `(train, test)` indices for fold `f` held out.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &g) in self.fold_of.iter().enumerate() {
            if g == f {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.fold_of.iter().for_each(|&f| s[f] += 1);
        s
    }
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::validation("need at least 2 folds"));
    }
    if n < 2 * k {
        return Err(Error::validation(format!(
            "{n} samples are too few for {k} folds (need >= {})",
            2 * k
        )));
    }
    let perm = seeded_permutation(n, seed);
    let mut fold_of = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{cosine, ridge_fit};
    use crate::toymodel::{plant_concept_model, planted_concept_value, PlantSpec, ToyConfig};

    fn tiny(seed: u64, noise: f64) -> ProbeDataset {
        synth_planted(&SynthConfig {
            n: 40,
            layers: 2,
            heads: 2,
            dim: 3,
            planted: vec![PlantedHead {
                head: HeadId::new(1, 0),
                direction: vec![1.0, -2.0, 0.5],
                gain: 1.0,
                noise,
            }],
            background_noise: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn noiseless_planted_recovers_direction() {
        let ds = tiny(3, 0.0);
        let all: Vec<usize> = (0..ds.len()).collect();
        let x = ds.activations().head_matrix(HeadId::new(1, 0), &all);
        let theta = ridge_fit(&x, ds.labels(), 1.0).unwrap();
        assert!(cosine(&theta, &[1.0, -2.0, 0.5]) >= 1.0 - 1e-9);
    }

    #[test]
    fn synth_is_seeded() {
        assert_eq!(tiny(5, 0.3), tiny(5, 0.3));
        assert_ne!(tiny(5, 0.3).labels(), tiny(6, 0.3).labels());
    }

    #[test]
    fn synth_validation() {
        let mut cfg = SynthConfig {
            n: 10,
            layers: 1,
            heads: 1,
            dim: 2,
            planted: vec![PlantedHead {
                head: HeadId::new(0, 0),
                direction: vec![0.0, 0.0],
                gain: 1.0,
                noise: 0.1,
            }],
            background_noise: 1.0,
            seed: 0,
        };
        assert!(synth_planted(&cfg).is_err());
        cfg.planted[0].direction = vec![1.0, 0.0];
        assert!(synth_planted(&cfg).is_ok());
        cfg.n = 3;
        assert!(synth_planted(&cfg).is_err());
    }

    #[test]
    fn cubic_and_sin10() {
        let ds =
            ProbeDataset::from_parts(vec![0.5, 0.0], ActivationTensor::zeros(2, 1, 1, 1).unwrap())
                .unwrap();
        let c = transform_labels(&ds, &LabelTransform::Cubic).unwrap();
        assert_eq!(c.labels()[0], 0.125);
        let s = transform_labels(&ds, &LabelTransform::Sin10).unwrap();
        assert_eq!(s.labels()[1], 0.0);
        let id = transform_labels(&ds, &LabelTransform::PermuteWith(vec![0, 1])).unwrap();
        assert_eq!(id.labels(), ds.labels());
        assert!(transform_labels(&ds, &LabelTransform::PermuteWith(vec![0, 0])).is_err());
    }

    #[test]
    fn permute_preserves_multiset() {
        let ds = tiny(9, 0.3);
        let p = transform_labels(&ds, &LabelTransform::Permute { seed: 4 }).unwrap();
        let mut a = ds.labels().to_vec();
        let mut b = p.labels().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_ne!(ds.labels(), p.labels());
        assert_eq!(ds.activations(), p.activations());
    }

    #[test]
    fn folds_balanced_and_seeded() {
        let f = make_folds(4, 2, 1).unwrap();
        assert_eq!(f.sizes(), vec![2, 2]);
        assert_eq!(make_folds(101, 2, 8).unwrap().sizes(), vec![51, 50]);
        assert_eq!(make_folds(50, 2, 3).unwrap(), make_folds(50, 2, 3).unwrap());
        assert!(make_folds(3, 2, 0).is_err());
    }

    #[test]
    fn fold_membership_frequency() {
        let mut count = vec![0usize; 100];
        for seed in 0..1000 {
            let f = make_folds(100, 2, seed).unwrap();
            for (i, &g) in f.fold_of.iter().enumerate() {
                if g == 0 {
                    count[i] += 1;
                }
            }
        }
        for c in count {
            let freq = c as f64 / 1000.0;
            assert!((freq - 0.5).abs() <= 0.05, "{freq}");
        }
    }

    #[test]
    fn dataset_validation() {
        let t = ActivationTensor::zeros(2, 1, 1, 1).unwrap();
        let ids = vec!["a".to_string(), "a".to_string()];
        assert!(ProbeDataset::new(
            ids.clone(),
            ids,
            vec![String::new(); 2],
            vec![0.0, 1.0],
            t.clone(),
            BTreeMap::new()
        )
        .is_err());
        assert!(ProbeDataset::from_parts(vec![0.0, f64::NAN], t.clone()).is_err());
        assert!(ProbeDataset::from_parts(vec![0.0], t).is_err());
        assert!(ActivationTensor::new(1, 1, 1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(ActivationTensor::new(0, 1, 1, 2, vec![]).is_err());
    }

    #[test]
    fn label_table_parse_and_attach() {
        let rows = parse_label_table("id,name,label\ns0000,Alice,0.5\ns0001,Bob,-0.25\n").unwrap();
        assert_eq!(rows.len(), 2);
        let ds =
            ProbeDataset::from_parts(vec![0.0, 0.0], ActivationTensor::zeros(2, 1, 1, 1).unwrap())
                .unwrap();
        let ds = ds.attach_labels(&rows).unwrap();
        assert_eq!(ds.labels(), &[0.5, -0.25]);
        assert_eq!(ds.names()[1], "Bob");
        assert!(parse_label_table("id\tname\tlabel\nx\ty\tnotanumber\n").is_err());
        assert!(ds.attach_labels(&rows[..1]).is_err());
    }

    fn planted_model() -> (ToyTransformer, PlantSpec) {
        let spec = PlantSpec {
            head: HeadId::new(0, 1),
            direction: vec![0.5, 1.0, -1.0],
            readout_gain: 1.0,
        };
        (
            plant_concept_model(ToyConfig::new(2, 2, 3, 6, 12, 1), &spec).unwrap(),
            spec,
        )
    }

    #[test]
    fn toy_model_rows() {
        let (model, spec) = planted_model();
        let prompts = vec![vec![3, 7], vec![3, 7], vec![5], vec![2, 9, 11]];
        let labels: Vec<f64> = prompts
            .iter()
            .map(|p| planted_concept_value(12, *p.last().unwrap()))
            .collect();
        let ds = from_toy_model(&model, &prompts, &labels, Position::Last).unwrap();
        let a = ds.activations();
        assert_eq!(a.head_vector(0, spec.head), a.head_vector(1, spec.head));
        let v = &spec.direction;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        for i in 0..prompts.len() {
            let row: Vec<f64> = a
                .head_vector(i, spec.head)
                .iter()
                .map(|&x| f64::from(x))
                .collect();
            let along = crate::numkit::dot(&row, v) / vv;
            assert!((along - labels[i]).abs() < 1e-6);
        }
        let single = vec![vec![4]];
        let last = from_toy_model(&model, &single, &[0.0], Position::Last);
        // N = 1 is rejected by the dataset invariant
        assert!(last.is_err());
        let two = vec![vec![4], vec![6]];
        let l = from_toy_model(&model, &two, &[0.0, 1.0], Position::Last).unwrap();
        let z = from_toy_model(&model, &two, &[0.0, 1.0], Position::Index(0)).unwrap();
        assert_eq!(l.activations(), z.activations());
        assert!(from_toy_model(&model, &two, &[0.0, 1.0], Position::Index(1)).is_err());
        assert!(from_toy_model(&model, &two, &[0.0], Position::Last).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = tiny(1, 0.3);
        let b = transform_labels(&a, &LabelTransform::Cubic).unwrap();
        assert_eq!(a.fingerprint(), tiny(1, 0.3).fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
