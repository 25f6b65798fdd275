//! Graph-level loss terms. Every function takes and returns graph scalars,
//! so tests can feed leaves directly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::{GenInput, GenVars, Generator};

/// `-log p(r | c, E; theta)` with the full annotated entity list.
pub fn loss_nll(
    g: &mut Graph,
    generator: &Generator,
    vars: &GenVars,
    input: &GenInput,
    target: &[usize],
) -> Result<Var> {
    let ll = generator.log_likelihood_graph(g, vars, input, target)?;
    Ok(g.neg(ll))
}

/// `-log sum_i softmax(scores)_i * p_i`, where `log_likelihoods[i]` is
/// `log p(r | c, e_i)`. `scores` holds one retrieval score per entity.
pub fn loss_mml(g: &mut Graph, scores: Var, log_likelihoods: &[Var]) -> Result<Var> {
    if log_likelihoods.is_empty() {
        return Err(Error::Contract(
            "the marginal likelihood needs at least one entity".into(),
        ));
    }
    let n = g.value(scores).len();
    if n != log_likelihoods.len() {
        return Err(Error::Contract(format!(
            "{n} retrieval scores for {} likelihoods",
            log_likelihoods.len()
        )));
    }
    let log_q = g.log_softmax(scores)?;
    let lls = g.concat(log_likelihoods, 1)?;
    let log_q = g.concat(&[log_q], 1)?;
    let joint = g.add(log_q, lls)?;
    let lse = g.logsumexp(joint)?;
    Ok(g.neg(lse))
}

/// Length-normalised log-likelihoods of the positives and of the
/// entity-free baseline.
#[derive(Clone, Debug)]
pub struct ContrastiveTerms {
    pub d: Vec<Var>,
    pub d_minus: Var,
}

pub fn contrastive_terms(
    g: &mut Graph,
    positive_lls: &[Var],
    baseline_ll: Var,
    response_len: usize,
) -> Result<ContrastiveTerms> {
    if response_len == 0 {
        return Err(Error::Contract("response length must be positive".into()));
    }
    let inv = 1.0 / response_len as f64;
    Ok(ContrastiveTerms {
        d: positive_lls.iter().map(|&v| g.scale(v, inv)).collect(),
        d_minus: g.scale(baseline_ll, inv),
    })
}

/// `sum_i max(0, d_minus - d_i + margin)`.
pub fn loss_ctr(g: &mut Graph, terms: &ContrastiveTerms, margin: f64) -> Result<Var> {
    if terms.d.is_empty() {
        return Err(Error::Contract(
            "the contrastive loss needs a positive entity".into(),
        ));
    }
    let m = g.constant(Tensor::scalar(margin));
    let mut hinges = Vec::with_capacity(terms.d.len());
    for &d in &terms.d {
        let gap = g.sub(terms.d_minus, d)?;
        let gap = g.add(gap, m)?;
        hinges.push(g.relu(gap));
    }
    let stacked = g.concat(&hinges, 1)?;
    Ok(g.sum(stacked))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

/// Loss terms of one example; absent terms were not evaluated.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub nll: Option<Var>,
    pub mml: Option<Var>,
    pub ctr: Option<Var>,
}

/// `alpha * nll + beta * mml + gamma * ctr` over the terms present.
pub fn total_loss(
    g: &mut Graph,
    weights: &LossWeights,
    nll: Option<Var>,
    mml: Option<Var>,
    ctr: Option<Var>,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, w) in [
        (nll, weights.alpha),
        (mml, weights.beta),
        (ctr, weights.gamma),
    ] {
        if let Some(t) = term {
            let scaled = g.scale(t, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => g.add(a, scaled)?,
            });
        }
    }
    acc.ok_or_else(|| Error::Contract("no loss term is enabled".into()))
}
