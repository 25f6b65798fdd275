//! Lexical, counting, oracle and random retrievers.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rank_topk, DenseRetriever, EntityIndex, RetrievalResult};
use crate::dialogue::{Context, KbScope, Sample};
use crate::error::{Error, Result};
use crate::kb::{flatten_entity, KnowledgeBase};
use crate::text::{tokenize, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Dense,
    Bm25,
    Frequency,
    Oracle,
    Random,
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RetrieverKind::Dense => "dense",
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Frequency => "frequency",
            RetrieverKind::Oracle => "oracle",
            RetrieverKind::Random => "random",
        };
        f.write_str(s)
    }
}

impl FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RetrieverKind::Dense),
            "bm25" => Ok(RetrieverKind::Bm25),
            "frequency" => Ok(RetrieverKind::Frequency),
            "oracle" => Ok(RetrieverKind::Oracle),
            "random" => Ok(RetrieverKind::Random),
            other => Err(Error::Input(format!("unknown retriever {other:?}"))),
        }
    }
}

/// Okapi BM25 over tokenized documents.
#[derive(Clone, Debug)]
pub struct Bm25 {
    k1: f64,
    b: f64,
    term_freqs: Vec<HashMap<String, usize>>,
    lengths: Vec<f64>,
    avg_len: f64,
    doc_freq: HashMap<String, usize>,
}

impl Bm25 {
    pub const K1: f64 = 1.2;
    pub const B: f64 = 0.75;

    pub fn new(docs: &[Vec<String>], k1: f64, b: f64) -> Self {
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in doc {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let lengths: Vec<f64> = docs.iter().map(|d| d.len() as f64).collect();
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<f64>() / docs.len() as f64
        };
        Bm25 {
            k1,
            b,
            term_freqs,
            lengths,
            avg_len,
            doc_freq,
        }
    }

    /// Index over the flattened KB entities with the standard parameters.
    pub fn for_kb(kb: &KnowledgeBase) -> Self {
        let docs: Vec<Vec<String>> = kb
            .entities()
            .iter()
            .map(|e| tokenize(&flatten_entity(e)))
            .collect();
        Bm25::new(&docs, Self::K1, Self::B)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, which stays positive for
    /// terms found in most documents.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.term_freqs.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of every document for the distinct terms of `query`.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        self.term_freqs
            .iter()
            .zip(&self.lengths)
            .map(|(tf, &len)| {
                terms
                    .iter()
                    .filter_map(|t| tf.get(t).map(|&f| (t, f as f64)))
                    .map(|(t, f)| {
                        let norm = self.k1 * (1.0 - self.b + self.b * len / self.avg_len);
                        self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
                    })
                    .sum()
            })
            .collect()
    }
}

/// Number of each entity's values mentioned in the context.
pub fn frequency_scores(kb: &KnowledgeBase, context: &Context) -> Vec<f64> {
    kb.mention_counts(&context.text())
        .into_iter()
        .map(|c| c as f64)
        .collect()
}

/// Gold entities first with all the probability mass, then the rest of the
/// condensed knowledge base (or the full KB for a global scope) with none.
pub fn oracle_results(
    kb: &KnowledgeBase,
    gold_ids: Option<&[String]>,
    scope: &KbScope,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    let gold = match gold_ids {
        Some(ids) if !ids.is_empty() => ids,
        _ => {
            return Err(Error::Contract(
                "the oracle retriever needs gold entity labels".into(),
            ))
        }
    };
    if k == 0 || k > kb.len() {
        return Err(Error::Contract(format!(
            "K must lie in 1..={}, got {k}",
            kb.len()
        )));
    }
    let mut order: Vec<usize> = Vec::with_capacity(kb.len());
    for id in gold {
        let i = kb
            .index_of(id)
            .ok_or_else(|| Error::Contract(format!("unknown gold entity {id}")))?;
        if !order.contains(&i) {
            order.push(i);
        }
    }
    let n_gold = order.len();
    let condensed: Vec<usize> = match scope {
        KbScope::Global => (0..kb.len()).collect(),
        KbScope::Session(ids) => {
            let mut v: Vec<usize> = ids.iter().filter_map(|id| kb.index_of(id)).collect();
            v.extend(0..kb.len());
            v
        }
    };
    for i in condensed {
        if order.len() >= k {
            break;
        }
        if !order.contains(&i) {
            order.push(i);
        }
    }
    order.truncate(k);
    let shown_gold = n_gold.min(k);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(pos, i)| {
            let is_gold = pos < shown_gold;
            RetrievalResult {
                entity_id: kb.entity(i).id().to_string(),
                entity_index: i,
                score: if is_gold { 1.0 } else { 0.0 },
                prob: if is_gold {
                    1.0 / shown_gold as f64
                } else {
                    0.0
                },
                rank: pos + 1,
            }
        })
        .collect())
}

/// Uniformly random scores drawn from a stream keyed by `seed` and `key`.
pub fn random_scores(n: usize, seed: u64, key: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// Any member of the retriever zoo.
#[derive(Clone, Debug)]
pub enum Retriever {
    Dense {
        model: Box<DenseRetriever>,
        index: EntityIndex,
    },
    Bm25(Bm25),
    Frequency,
    Oracle,
    Random {
        seed: u64,
    },
}

impl Retriever {
    pub fn kind(&self) -> RetrieverKind {
        match self {
            Retriever::Dense { .. } => RetrieverKind::Dense,
            Retriever::Bm25(_) => RetrieverKind::Bm25,
            Retriever::Frequency => RetrieverKind::Frequency,
            Retriever::Oracle => RetrieverKind::Oracle,
            Retriever::Random { .. } => RetrieverKind::Random,
        }
    }

    pub fn dense(model: DenseRetriever, vocab: &Vocab, kb: &KnowledgeBase) -> Result<Self> {
        let index = model.build_index(vocab, kb, 0)?;
        Ok(Retriever::Dense {
            model: Box::new(model),
            index,
        })
    }

    /// Top-`k` entities for one sample. `key` distinguishes samples for the
    /// random retriever.
    pub fn retrieve(
        &self,
        vocab: &Vocab,
        kb: &KnowledgeBase,
        sample: &Sample,
        key: u64,
        k: usize,
    ) -> Result<Vec<RetrievalResult>> {
        match self {
            Retriever::Dense { model, index } => {
                model.retrieve_topk(vocab, &sample.context, index, kb, k)
            }
            Retriever::Bm25(bm25) => rank_topk(kb, &bm25.scores(&sample.context.text()), k),
            Retriever::Frequency => rank_topk(kb, &frequency_scores(kb, &sample.context), k),
            Retriever::Oracle => {
                oracle_results(kb, sample.gold_entity_ids.as_deref(), &sample.scope, k)
            }
            Retriever::Random { seed } => rank_topk(kb, &random_scores(kb.len(), *seed, key), k),
        }
    }
}
