// SPDX-License-Identifier: MIT OR Apache-2.0

//! The desk-scale demo fixture: a planted toy model plus a synthetic probing
//! dataset whose planted head and direction match the model's.

use crate::dataset::{random_direction, synth_planted, PlantedHead, ProbeDataset, SynthConfig};
use crate::error::Result;
use crate::monitor::PromptLine;
use crate::toymodel::{plant_concept_model, HeadId, PlantSpec, ToyConfig, ToyTransformer};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub seed: u64,
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub model_dim: usize,
    pub vocab: usize,
    pub planted_head: HeadId,
    /// Signal gain of the planted head in the dataset.
    pub gain: f64,
    /// Noise on the planted head.
    pub noise: f64,
    /// Noise on every other head.
    pub background_noise: f64,
    /// HI−LO logit gain of the planted model.
    pub readout_gain: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 500,
            layers: 4,
            heads: 8,
            dim: 64,
            model_dim: 80,
            vocab: 32,
            planted_head: HeadId::new(2, 5),
            gain: 1.0,
            noise: 0.3,
            background_noise: 1.0,
            readout_gain: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Demo {
    pub config: DemoConfig,
    pub direction: Vec<f64>,
    pub model: ToyTransformer,
    pub dataset: ProbeDataset,
    pub prompts: Vec<PromptLine>,
}

/// Seed offsets keep the direction, model and data streams independent.
const DIRECTION_STREAM: u64 = 0x5eed_d1ec;
const MODEL_STREAM: u64 = 0x5eed_303e;

pub fn build_demo(cfg: &DemoConfig) -> Result<Demo> {
    let direction = random_direction(cfg.dim, cfg.seed ^ DIRECTION_STREAM);
    let model = plant_concept_model(
        ToyConfig::new(
            cfg.layers,
            cfg.heads,
            cfg.dim,
            cfg.model_dim,
            cfg.vocab,
            cfg.seed ^ MODEL_STREAM,
        ),
        &PlantSpec {
            head: cfg.planted_head,
            direction: direction.clone(),
            readout_gain: cfg.readout_gain,
        },
    )?;
    let mut dataset = synth_planted(&SynthConfig {
        n: cfg.n,
        layers: cfg.layers,
        heads: cfg.heads,
        dim: cfg.dim,
        planted: vec![PlantedHead {
            head: cfg.planted_head,
            direction: direction.clone(),
            gain: cfg.gain,
            noise: cfg.noise,
        }],
        background_noise: cfg.background_noise,
        seed: cfg.seed,
    })?;
    dataset.metadata.insert("fixture".into(), "demo".into());
    let v = cfg.vocab as u32;
    let prompts = [
        ("economy", vec![2 % v, 9 % v, 14 % v]),
        ("economy", vec![20 % v, 5 % v]),
        ("immigration", vec![11 % v, 3 % v, 27 % v, 8 % v]),
        ("healthcare", vec![17 % v, 24 % v]),
    ]
    .into_iter()
    .map(|(issue, tokens)| PromptLine {
        issue: issue.into(),
        tokens,
    })
    .collect();
    Ok(Demo {
        config: cfg.clone(),
        direction,
        model,
        dataset,
        prompts,
    })
}
