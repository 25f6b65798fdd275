//! Distant-supervision warm start: each turn's pseudo-positive entity is the
//! one with the most attribute values in the context and response, and the
//! encoders are trained with in-batch negatives.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DenseRetriever, Tower};
use crate::autodiff::Graph;
use crate::dialogue::{Context, Sample};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::text::Vocab;
use crate::training::{linear_decay, AdamW, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 32,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                clip: 1.0,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// A short warm start for the synthetic reference task.
    pub fn reference() -> Self {
        PretrainConfig {
            steps: 100,
            ..PretrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Turns without any KB value mention.
    pub skipped: usize,
    pub labeled: usize,
}

/// Entity with the most values mentioned in context plus response; ties go
/// to the lowest index. `None` when nothing is mentioned.
pub fn pseudo_positive(kb: &KnowledgeBase, context: &Context, response: &str) -> Option<usize> {
    let text = format!("{} {response}", context.text());
    let counts = kb.mention_counts(&text);
    let mut best: Option<(usize, usize)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 && best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
}

/// Mean in-batch cross-entropy: context `i` should score its own positive
/// above the other positives in the batch. Gradients reach the retriever
/// store after the call.
pub fn in_batch_loss(
    retriever: &mut DenseRetriever,
    contexts: &[Vec<u32>],
    positives: &[Vec<u32>],
    backward: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let cv = retriever.bind(&mut g, Tower::Context)?;
    let ev = retriever.bind(&mut g, Tower::Entity)?;
    let c = retriever.encode_batch(&mut g, &cv, contexts)?;
    let e = retriever.encode_batch(&mut g, &ev, positives)?;
    let et = g.transpose(e);
    let logits = g.matmul(c, et)?;
    let targets: Vec<usize> = (0..contexts.len()).collect();
    let loss = g.cross_entropy(logits, &targets)?;
    let value = g.item(loss);
    if backward {
        g.backward(loss)?;
        retriever.store_mut().accumulate_grads(&g);
    }
    Ok(value)
}

pub fn pretrain_retriever(
    retriever: &mut DenseRetriever,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    samples: &[Sample],
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if config.batch_size < 2 {
        return Err(Error::Contract(format!(
            "in-batch training needs a batch of at least 2, got {}",
            config.batch_size
        )));
    }
    let mut labeled: Vec<(Vec<u32>, usize)> = Vec::new();
    let mut skipped = 0;
    for s in samples {
        match pseudo_positive(kb, &s.context, &s.response) {
            Some(i) => labeled.push((retriever.context_ids(vocab, &s.context), i)),
            None => {
                debug!(
                    "no KB value mentioned in {} turn {}",
                    s.dialogue_id, s.context.turn_index
                );
                skipped += 1;
            }
        }
    }
    let mut report = PretrainReport {
        losses: Vec::with_capacity(config.steps),
        skipped,
        labeled: labeled.len(),
    };
    if config.steps == 0 {
        return Ok(report);
    }
    let distinct: std::collections::BTreeSet<usize> = labeled.iter().map(|l| l.1).collect();
    if distinct.len() < 2 {
        return Err(Error::Input(
            "pretraining needs turns labeled with at least two different entities".into(),
        ));
    }
    let batch_size = config.batch_size.min(distinct.len());
    let entity_ids: Vec<Vec<u32>> = kb
        .entities()
        .iter()
        .map(|e| retriever.entity_ids(vocab, e))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(config.optimizer);
    for step in 0..config.steps {
        // Fill the batch with turns whose positives are all different.
        let mut ctx = Vec::with_capacity(batch_size);
        let mut pos = Vec::with_capacity(batch_size);
        let mut used = Vec::with_capacity(batch_size);
        let mut scanned = 0;
        while ctx.len() < batch_size && scanned < labeled.len() {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (ids, p) = &labeled[order[cursor]];
            cursor += 1;
            scanned += 1;
            if !used.contains(p) {
                used.push(*p);
                ctx.push(ids.clone());
                pos.push(entity_ids[*p].clone());
            }
        }
        if ctx.len() < 2 {
            continue;
        }
        let loss = in_batch_loss(retriever, &ctx, &pos, true)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "pretraining loss is not finite".into(),
            });
        }
        let lr = linear_decay(config.optimizer.lr, step, config.steps);
        opt.step(retriever.store_mut(), lr);
        report.losses.push(loss);
    }
    info!(
        "pretrained retriever for {} steps on {} labeled turns ({} skipped)",
        config.steps, report.labeled, report.skipped
    );
    Ok(report)
}
