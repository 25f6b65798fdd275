//! Dual-encoder dense retriever, ranking utilities and baseline retrievers.

pub mod baselines;
pub mod pretrain;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterStore, Tensor, Var};
use crate::dialogue::Context;
use crate::error::{Error, Result};
use crate::kb::{flatten_entity, Entity, KnowledgeBase};
use crate::text::{Keep, Vocab};

pub use baselines::{Bm25, Retriever, RetrieverKind};
pub use pretrain::{pretrain_retriever, pseudo_positive, PretrainConfig, PretrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    /// Width of context and entity vectors.
    pub dim: usize,
    /// Score with cosine similarity instead of the raw dot product.
    pub cosine: bool,
    pub max_input_len: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            dim: 64,
            cosine: false,
            max_input_len: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tower {
    Context,
    Entity,
}

impl Tower {
    fn prefix(self) -> &'static str {
        match self {
            Tower::Context => "ctx",
            Tower::Entity => "ent",
        }
    }
}

/// Parameters of one encoder tower bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct TowerVars {
    pub emb: Var,
    pub w: Var,
    pub b: Var,
}

/// One scored entity in a ranked list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entity_id: String,
    pub entity_index: usize,
    pub score: f64,
    /// Softmax of `score` over the returned list.
    pub prob: f64,
    /// 1-based position.
    pub rank: usize,
}

/// Entity vectors computed with a frozen copy of the entity encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityIndex {
    vectors: Vec<Vec<f64>>,
    stamp: usize,
}

impl EntityIndex {
    pub fn new(vectors: Vec<Vec<f64>>, stamp: usize) -> Self {
        EntityIndex { vectors, stamp }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Training step at which the index was built.
    pub fn stamp(&self) -> usize {
        self.stamp
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    /// Dot product of `query` with every entity vector, in KB order.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.vectors
            .iter()
            .map(|v| v.iter().zip(query).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Indices of the `k` highest scores, best first; equal scores keep KB order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "K must lie in 1..={}, got {k}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NumericInput(
            "retrieval scores must be finite".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

/// Top-`k` results over all KB entities; probabilities are the softmax of
/// the selected scores only.
pub fn rank_topk(kb: &KnowledgeBase, scores: &[f64], k: usize) -> Result<Vec<RetrievalResult>> {
    if scores.len() != kb.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} entities",
            scores.len(),
            kb.len()
        )));
    }
    let order = top_k_indices(scores, k)?;
    let picked: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let probs = softmax(&picked);
    Ok(order
        .into_iter()
        .zip(probs)
        .enumerate()
        .map(|(pos, (i, prob))| RetrievalResult {
            entity_id: kb.entity(i).id().to_string(),
            entity_index: i,
            score: scores[i],
            prob,
            rank: pos + 1,
        })
        .collect())
}

/// Context and entity encoders: mean-pooled embeddings, a linear map and tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseRetriever {
    config: RetrieverConfig,
    store: ParameterStore,
}

impl DenseRetriever {
    pub fn new(config: RetrieverConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let d = config.dim;
        let mut store = ParameterStore::new(seed);
        for t in [Tower::Context, Tower::Entity] {
            let p = t.prefix();
            store.init_uniform(&format!("{p}.emb"), &[vocab_size, d], d)?;
            store.init_uniform(&format!("{p}.w"), &[d, d], d)?;
            store.init_zeros(&format!("{p}.b"), &[d])?;
        }
        Ok(DenseRetriever { config, store })
    }

    pub fn from_store(config: RetrieverConfig, store: ParameterStore) -> Result<Self> {
        for t in [Tower::Context, Tower::Entity] {
            let w = store.get(&format!("{}.w", t.prefix()))?;
            if w.shape() != [config.dim, config.dim] {
                return Err(Error::Checkpoint(format!(
                    "retriever weight shape {:?} does not match dim {}",
                    w.shape(),
                    config.dim
                )));
            }
        }
        Ok(DenseRetriever { config, store })
    }

    pub fn config(&self) -> &RetrieverConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn bind(&self, g: &mut Graph, tower: Tower) -> Result<TowerVars> {
        let p = tower.prefix();
        Ok(TowerVars {
            emb: self.store.bind(g, &format!("{p}.emb"))?,
            w: self.store.bind(g, &format!("{p}.w"))?,
            b: self.store.bind(g, &format!("{p}.b"))?,
        })
    }

    /// Encodes each token sequence into one row of an `n x d` matrix.
    pub fn encode_batch(&self, g: &mut Graph, vars: &TowerVars, seqs: &[Vec<u32>]) -> Result<Var> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Contract(
                "cannot encode an empty token sequence".into(),
            ));
        }
        let ids: Vec<usize> = seqs.iter().flatten().map(|&t| t as usize).collect();
        let segs: Vec<usize> = seqs
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.len()))
            .collect();
        let x = g.gather(vars.emb, &ids)?;
        let pooled = g.segment_mean(x, &segs, seqs.len())?;
        let proj = g.matmul(pooled, vars.w)?;
        let biased = g.add_row(proj, vars.b)?;
        let h = g.tanh(biased);
        Ok(if self.config.cosine {
            g.l2_normalize_rows(h)
        } else {
            h
        })
    }

    pub fn context_ids(&self, vocab: &Vocab, context: &Context) -> Vec<u32> {
        vocab.encode_truncated(&context.text(), self.config.max_input_len, Keep::Suffix)
    }

    pub fn entity_ids(&self, vocab: &Vocab, e: &Entity) -> Vec<u32> {
        vocab.encode_truncated(&flatten_entity(e), self.config.max_input_len, Keep::Prefix)
    }

    /// Gradient-free encoding of several sequences with one tower.
    pub fn embed(&self, tower: Tower, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, tower)?;
        let h = self.encode_batch(&mut g, &vars, seqs)?;
        let t: &Tensor = g.value(h);
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    pub fn encode_context(&self, vocab: &Vocab, context: &Context) -> Result<Vec<f64>> {
        let ids = self.context_ids(vocab, context);
        Ok(self.embed(Tower::Context, &[ids])?.remove(0))
    }

    pub fn encode_entity(&self, vocab: &Vocab, e: &Entity) -> Result<Vec<f64>> {
        let ids = self.entity_ids(vocab, e);
        Ok(self.embed(Tower::Entity, &[ids])?.remove(0))
    }

    /// Encodes every KB entity with the current parameters.
    pub fn build_index(
        &self,
        vocab: &Vocab,
        kb: &KnowledgeBase,
        stamp: usize,
    ) -> Result<EntityIndex> {
        let mut vectors = Vec::with_capacity(kb.len());
        let seqs: Vec<Vec<u32>> = kb
            .entities()
            .iter()
            .map(|e| self.entity_ids(vocab, e))
            .collect();
        for chunk in seqs.chunks(64) {
            vectors.extend(self.embed(Tower::Entity, chunk)?);
        }
        Ok(EntityIndex::new(vectors, stamp))
    }

    /// Scores of the context against every indexed entity.
    pub fn score_all(
        &self,
        vocab: &Vocab,
        context: &Context,
        index: &EntityIndex,
    ) -> Result<Vec<f64>> {
        Ok(index.scores(&self.encode_context(vocab, context)?))
    }

    pub fn retrieve_topk(
        &self,
        vocab: &Vocab,
        context: &Context,
        index: &EntityIndex,
        kb: &KnowledgeBase,
        k: usize,
    ) -> Result<Vec<RetrievalResult>> {
        rank_topk(kb, &self.score_all(vocab, context, index)?, k)
    }
}
