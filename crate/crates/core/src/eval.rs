//! Response and retrieval metrics: corpus BLEU-4, micro Entity F1 and
//! Recall@K.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dialogue::Sample;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::pipeline::TurnOutput;
use crate::text::tokenize;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with uniform weights, clipped n-gram counts summed
/// over the corpus, the standard brevity penalty and no smoothing.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Contract(
            "BLEU needs at least one sentence pair".into(),
        ));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, cnt) in ngram_counts(c, n) {
                matched[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
    }
    if c_len == 0 || (0..4).any(|i| matched[i] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl EntityScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EntityScore {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }
}

/// Micro-averaged precision, recall and F1 of KB values mentioned in the
/// responses against the gold value sets.
pub fn entity_f1(
    responses: &[String],
    gold_values: &[BTreeSet<String>],
    kb: &KnowledgeBase,
) -> Result<EntityScore> {
    if responses.len() != gold_values.len() {
        return Err(Error::Contract(format!(
            "{} responses but {} gold value sets",
            responses.len(),
            gold_values.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (r, gold) in responses.iter().zip(gold_values) {
        let predicted = kb.mentioned_values(r);
        let hit = predicted.intersection(gold).count();
        tp += hit;
        fp += predicted.len() - hit;
        fn_ += gold.len() - hit;
    }
    Ok(EntityScore::from_counts(tp, fp, fn_))
}

/// Fraction of labeled turns whose gold entities all sit in the first `k`
/// retrieved ids. `None` when no turn carries gold labels.
pub fn recall_at_k(
    retrieved: &[Vec<String>],
    gold_entity_ids: &[Option<Vec<String>>],
    k: usize,
) -> Result<Option<f64>> {
    if retrieved.len() != gold_entity_ids.len() {
        return Err(Error::Contract(format!(
            "{} retrieval lists but {} gold labels",
            retrieved.len(),
            gold_entity_ids.len()
        )));
    }
    let (mut hits, mut labeled) = (0usize, 0usize);
    for (list, gold) in retrieved.iter().zip(gold_entity_ids) {
        let Some(gold) = gold.as_ref().filter(|g| !g.is_empty()) else {
            continue;
        };
        if k == 0 || k > list.len() {
            return Err(Error::Contract(format!(
                "K={k} but only {} entities were retrieved",
                list.len()
            )));
        }
        labeled += 1;
        if gold.iter().all(|id| list[..k].contains(id)) {
            hits += 1;
        }
    }
    Ok((labeled > 0).then(|| hits as f64 / labeled as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub response: String,
    pub reference: String,
    pub retrieved: Vec<String>,
    pub predicted_values: BTreeSet<String>,
    pub gold_values: BTreeSet<String>,
    /// Whether the response names a gold entity; absent without labels.
    pub gold_name_used: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_turns: usize,
    pub bleu: f64,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub entity_f1: f64,
    pub recall_at_k: BTreeMap<usize, Option<f64>>,
    /// Fraction of labeled turns whose response names a gold entity.
    pub gold_name_usage: Option<f64>,
    pub turns: Vec<TurnReport>,
}

impl MetricReport {
    /// Human-readable summary with BLEU and fractions as percentages.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = format!(
            "turns            {}\nBLEU             {:.2}\nEntity F1        {:.2}\nEntity P         {:.2}\nEntity R         {:.2}\n",
            self.n_turns,
            100.0 * self.bleu,
            100.0 * self.entity_f1,
            100.0 * self.entity_precision,
            100.0 * self.entity_recall
        );
        for (k, v) in &self.recall_at_k {
            out.push_str(&format!("{:<17}{}\n", format!("Recall@{k}"), pct(*v)));
        }
        out.push_str(&format!("gold name usage  {}\n", pct(self.gold_name_usage)));
        out
    }
}

/// Scores inference outputs against their samples.
pub fn evaluate(
    outputs: &[TurnOutput],
    samples: &[Sample],
    kb: &KnowledgeBase,
    ks: &[usize],
) -> Result<MetricReport> {
    if outputs.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} outputs for {} samples",
            outputs.len(),
            samples.len()
        )));
    }
    let cands: Vec<Vec<String>> = outputs.iter().map(|o| tokenize(&o.response)).collect();
    let refs: Vec<Vec<String>> = samples.iter().map(|s| tokenize(&s.response)).collect();
    let bleu = if samples.is_empty() {
        0.0
    } else {
        bleu(&cands, &refs)?
    };
    let responses: Vec<String> = outputs.iter().map(|o| o.response.clone()).collect();
    let golds: Vec<BTreeSet<String>> = samples.iter().map(|s| s.gold_values.clone()).collect();
    let ent = entity_f1(&responses, &golds, kb)?;
    let lists: Vec<Vec<String>> = outputs
        .iter()
        .map(|o| o.retrieved.iter().map(|r| r.entity_id.clone()).collect())
        .collect();
    let gold_ids: Vec<Option<Vec<String>>> =
        samples.iter().map(|s| s.gold_entity_ids.clone()).collect();
    let mut recall = BTreeMap::new();
    for &k in ks {
        recall.insert(k, recall_at_k(&lists, &gold_ids, k)?);
    }
    let mut turns = Vec::with_capacity(samples.len());
    let (mut used, mut labeled) = (0usize, 0usize);
    for ((o, s), list) in outputs.iter().zip(samples).zip(lists) {
        let gold_name_used = s
            .gold_entity_ids
            .as_ref()
            .filter(|g| !g.is_empty())
            .map(|ids| {
                ids.iter()
                    .filter_map(|id| kb.index_of(id))
                    .any(|i| kb.name_mentioned(i, &o.response))
            });
        if let Some(u) = gold_name_used {
            labeled += 1;
            used += usize::from(u);
        }
        turns.push(TurnReport {
            dialogue_id: s.dialogue_id.clone(),
            turn_index: s.context.turn_index,
            response: o.response.clone(),
            reference: s.response.clone(),
            retrieved: list,
            predicted_values: kb.mentioned_values(&o.response),
            gold_values: s.gold_values.clone(),
            gold_name_used,
        });
    }
    Ok(MetricReport {
        n_turns: samples.len(),
        bleu,
        entity_precision: ent.precision,
        entity_recall: ent.recall,
        entity_f1: ent.f1,
        recall_at_k: recall,
        gold_name_usage: (labeled > 0).then(|| used as f64 / labeled as f64),
        turns,
    })
}
