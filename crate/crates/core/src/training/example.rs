//! One training example: retrieval against a stale index, meta annotation,
//! the optional negative entity, and the loss graph over fresh encodings.

use crate::autodiff::Graph;
use crate::dialogue::Sample;
use crate::error::Result;
use crate::generator::{GenInput, GenVars, Generator};
use crate::kb::KnowledgeBase;
use crate::metaknow::{annotate, select_negative, AnnotatedEntity, MetaKnowledge, MetaMode};
use crate::retriever::{rank_topk, DenseRetriever, EntityIndex, TowerVars};
use crate::text::Vocab;

use super::losses::{contrastive_terms, loss_ctr, loss_mml, loss_nll, total_loss, LossTerms};
use super::TrainConfig;

/// Everything the loss needs, in token ids.
#[derive(Clone, Debug)]
pub struct Example {
    pub context_ids: Vec<u32>,
    /// Entity indices: the top-K in rank order, then the negative if used.
    pub candidates: Vec<usize>,
    pub candidate_ids: Vec<Vec<u32>>,
    pub annotated: Vec<AnnotatedEntity>,
    /// Context with every candidate.
    pub full_input: GenInput,
    /// Context with one candidate each.
    pub single_inputs: Vec<GenInput>,
    /// Context alone.
    pub base_input: GenInput,
    /// Positions in `candidates` of the contrastive positives.
    pub positives: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn prepare_example(
    retriever: &DenseRetriever,
    generator: &Generator,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    sample: &Sample,
    index: &EntityIndex,
    config: &TrainConfig,
) -> Result<Example> {
    let scores = retriever.score_all(vocab, &sample.context, index)?;
    let results = rank_topk(kb, &scores, config.k)?;
    let mut annotated = annotate(
        &results,
        &sample.context,
        kb,
        &config.thresholds,
        config.meta_mode,
    )?;
    if config.use_negative {
        let retrieved: Vec<usize> = results.iter().map(|r| r.entity_index).collect();
        let neg = select_negative(&scores, &retrieved)?;
        annotated.push(AnnotatedEntity::new(
            kb,
            neg,
            MetaKnowledge::negative(),
            config.meta_mode,
        ));
    }
    let candidates: Vec<usize> = annotated.iter().map(|a| a.entity_index).collect();
    let candidate_ids = candidates
        .iter()
        .map(|&i| retriever.entity_ids(vocab, kb.entity(i)))
        .collect();
    let single_inputs = annotated
        .iter()
        .map(|a| {
            let mut a = a.clone();
            if !config.annotate_single {
                a.rendering.clear();
            }
            generator.build_input(vocab, &sample.context, &[a], kb)
        })
        .collect();
    Ok(Example {
        context_ids: retriever.context_ids(vocab, &sample.context),
        candidate_ids,
        full_input: generator.build_input(vocab, &sample.context, &annotated, kb),
        single_inputs,
        base_input: generator.build_input(vocab, &sample.context, &[], kb),
        positives: (0..config.positive_set_size.min(config.k)).collect(),
        target: generator.target_ids(vocab, &sample.response),
        candidates,
        annotated,
    })
}

/// Retriever and generator parameters bound into one graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundModels {
    pub context: TowerVars,
    pub entity: TowerVars,
    pub generator: GenVars,
}

/// Builds every enabled loss term of `ex`. Retrieval scores are recomputed
/// from the bound retriever parameters, so the marginal likelihood carries
/// gradients to the retriever.
pub fn example_loss(
    g: &mut Graph,
    retriever: &DenseRetriever,
    generator: &Generator,
    vars: &BoundModels,
    ex: &Example,
    config: &TrainConfig,
) -> Result<LossTerms> {
    let nll = if config.alpha > 0.0 {
        Some(loss_nll(
            g,
            generator,
            &vars.generator,
            &ex.full_input,
            &ex.target,
        )?)
    } else {
        None
    };
    let need_mml = config.use_mml && config.beta > 0.0;
    let need_ctr = config.meta_mode == MetaMode::Ctr && config.gamma > 0.0;
    let mut single = vec![None; ex.single_inputs.len()];
    let mut single_ll = |g: &mut Graph, i: usize| -> Result<_> {
        if let Some(v) = single[i] {
            return Ok(v);
        }
        let v =
            generator.log_likelihood_graph(g, &vars.generator, &ex.single_inputs[i], &ex.target)?;
        single[i] = Some(v);
        Ok(v)
    };
    let mml = if need_mml {
        let c = retriever.encode_batch(g, &vars.context, std::slice::from_ref(&ex.context_ids))?;
        let e = retriever.encode_batch(g, &vars.entity, &ex.candidate_ids)?;
        let et = g.transpose(e);
        let scores = g.matmul(c, et)?;
        let mut lls = Vec::with_capacity(ex.single_inputs.len());
        for i in 0..ex.single_inputs.len() {
            let ll = single_ll(g, i)?;
            lls.push(if config.stop_generator_grad_in_mml {
                g.detach(ll)
            } else {
                ll
            });
        }
        Some(loss_mml(g, scores, &lls)?)
    } else {
        None
    };
    let ctr = if need_ctr {
        let pos: Vec<_> = ex
            .positives
            .iter()
            .map(|&i| single_ll(g, i))
            .collect::<Result<_>>()?;
        let base =
            generator.log_likelihood_graph(g, &vars.generator, &ex.base_input, &ex.target)?;
        let terms = contrastive_terms(g, &pos, base, ex.target.len())?;
        Some(loss_ctr(g, &terms, config.margin)?)
    } else {
        None
    };
    let total = total_loss(g, &config.weights(), nll, mml, ctr)?;
    Ok(LossTerms {
        total,
        nll,
        mml,
        ctr,
    })
}
