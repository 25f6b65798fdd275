//! Retrieval-generation misalignment and entity-usage statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dialogue::Sample;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::generator::Generator;
use crate::kb::KnowledgeBase;
use crate::metaknow::{Confidence, MetaMode, Thresholds};
use crate::pipeline::{infer, InferenceConfig};
use crate::retriever::{RetrievalResult, Retriever};
use crate::text::Vocab;

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!(
            "correlation needs two equal-length series of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the series has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub generator: String,
    pub retriever: String,
    pub recall_at_k: f64,
    pub entity_f1: f64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentReport {
    pub k: usize,
    pub rows: Vec<AlignmentRow>,
    /// Correlation of Recall@K with Entity F1 per generator; `None` when
    /// either series is constant.
    pub pearson: BTreeMap<String, Option<f64>>,
}

impl MisalignmentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("generator,retriever,recall_at_k,entity_f1,bleu\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.generator, r.retriever, r.recall_at_k, r.entity_f1, r.bleu
            );
        }
        out
    }
}

/// A generator under study with the meta mode it was trained for.
pub struct GeneratorEntry<'a> {
    pub name: String,
    pub generator: &'a Generator,
    pub meta_mode: MetaMode,
}

/// Runs every (retriever, generator) pair over `samples` and correlates
/// Recall@K with Entity F1 per generator.
pub fn misalignment_study(
    zoo: &[(String, Retriever)],
    generators: &[GeneratorEntry<'_>],
    vocab: &Vocab,
    kb: &KnowledgeBase,
    samples: &[Sample],
    k: usize,
    thresholds: &Thresholds,
) -> Result<MisalignmentReport> {
    if zoo.len() < 3 {
        return Err(Error::Contract(format!(
            "the study needs at least 3 retrievers, got {}",
            zoo.len()
        )));
    }
    if !samples
        .iter()
        .any(|s| s.gold_entity_ids.as_ref().is_some_and(|g| !g.is_empty()))
    {
        return Err(Error::Input(
            "Recall@K needs samples with gold entity labels".into(),
        ));
    }
    let mut rows = Vec::with_capacity(zoo.len() * generators.len());
    let mut pearson_by = BTreeMap::new();
    for entry in generators {
        let config = InferenceConfig {
            k,
            meta_mode: entry.meta_mode,
            thresholds: *thresholds,
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (name, retriever) in zoo {
            let outputs = infer(entry.generator, retriever, vocab, kb, samples, &config)?;
            let report = evaluate(&outputs, samples, kb, &[k])?;
            let recall = report.recall_at_k[&k].unwrap_or(0.0);
            xs.push(recall);
            ys.push(report.entity_f1);
            rows.push(AlignmentRow {
                generator: entry.name.clone(),
                retriever: name.clone(),
                recall_at_k: recall,
                entity_f1: report.entity_f1,
                bleu: report.bleu,
            });
        }
        let r = match pearson(&xs, &ys) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        pearson_by.insert(entry.name.clone(), r);
    }
    Ok(MisalignmentReport {
        k,
        rows,
        pearson: pearson_by,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub used: usize,
    pub total: usize,
    pub fraction: f64,
}

impl Usage {
    fn add(&mut self, used: bool) {
        self.total += 1;
        self.used += usize::from(used);
        self.fraction = self.used as f64 / self.total as f64;
    }
}

/// How often retrieved entities are named in responses, by retrieval rank
/// and by confidence bucket. Only responses that name some KB entity count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub eligible: usize,
    /// Index `i` holds rank `i + 1`.
    pub per_rank: Vec<Usage>,
    pub per_confidence: BTreeMap<Confidence, Usage>,
}

impl BehaviorStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,key,used,total,fraction\n");
        for (i, u) in self.per_rank.iter().enumerate() {
            let _ = writeln!(out, "rank,{},{},{},{}", i + 1, u.used, u.total, u.fraction);
        }
        for (c, u) in &self.per_confidence {
            let key = match c {
                Confidence::Low => "low",
                Confidence::Mid => "mid",
                Confidence::High => "high",
            };
            let _ = writeln!(
                out,
                "confidence,{key},{},{},{}",
                u.used, u.total, u.fraction
            );
        }
        out
    }
}

pub fn behavior_stats(
    responses: &[String],
    retrieval_results: &[Vec<RetrievalResult>],
    kb: &KnowledgeBase,
    thresholds: &Thresholds,
) -> Result<BehaviorStats> {
    if responses.len() != retrieval_results.len() {
        return Err(Error::Contract(format!(
            "{} responses but {} retrieval lists",
            responses.len(),
            retrieval_results.len()
        )));
    }
    let k = retrieval_results.iter().map(Vec::len).max().unwrap_or(0);
    let mut stats = BehaviorStats {
        eligible: 0,
        per_rank: vec![Usage::default(); k],
        per_confidence: [Confidence::Low, Confidence::Mid, Confidence::High]
            .into_iter()
            .map(|c| (c, Usage::default()))
            .collect(),
    };
    for (response, results) in responses.iter().zip(retrieval_results) {
        if !(0..kb.len()).any(|i| kb.name_mentioned(i, response)) {
            continue;
        }
        stats.eligible += 1;
        for r in results {
            let used = kb.name_mentioned(r.entity_index, response);
            stats.per_rank[r.rank - 1].add(used);
            if let Some(u) = stats.per_confidence.get_mut(&thresholds.bucket(r.prob)) {
                u.add(used);
            }
        }
    }
    Ok(stats)
}
