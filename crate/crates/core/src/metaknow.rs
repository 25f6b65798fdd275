//! Meta knowledge of retrieved entities (retrieval order, confidence and
//! co-occurrence with the context), its renderings, and negative sampling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dialogue::Context;
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::retriever::RetrievalResult;

/// Retrieval order: positions 1 to 5 get their own tag, everything after
/// that (and the negative entity) is `Other`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankTag {
    Top(u8),
    Other,
}

impl RankTag {
    pub fn from_rank(rank: usize) -> Self {
        if (1..=5).contains(&rank) {
            RankTag::Top(rank as u8)
        } else {
            RankTag::Other
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Low,
    Mid,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cooccurrence {
    Old,
    New,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaKnowledge {
    pub rank: RankTag,
    pub confidence: Confidence,
    pub cooccurrence: Cooccurrence,
    pub is_negative: bool,
}

impl MetaKnowledge {
    /// The fixed annotation of an injected negative entity.
    pub fn negative() -> Self {
        MetaKnowledge {
            rank: RankTag::Other,
            confidence: Confidence::Low,
            cooccurrence: Cooccurrence::New,
            is_negative: true,
        }
    }
}

/// Confidence bucket edges on the retrieval probability:
/// `q <= low` is low, `low < q <= high` is mid, `q > high` is high.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            low: 0.4,
            high: 0.75,
        }
    }
}

impl Thresholds {
    pub fn bucket(&self, q: f64) -> Confidence {
        if q <= self.low {
            Confidence::Low
        } else if q <= self.high {
            Confidence::Mid
        } else {
            Confidence::High
        }
    }
}

/// Meta knowledge for a ranked result list.
pub fn compute_meta(
    results: &[RetrievalResult],
    context: &Context,
    kb: &KnowledgeBase,
    thresholds: &Thresholds,
) -> Result<Vec<MetaKnowledge>> {
    for (pos, r) in results.iter().enumerate() {
        let out_of_order = r.rank != pos + 1 || (pos > 0 && r.score > results[pos - 1].score);
        if out_of_order {
            return Err(Error::Contract(format!(
                "retrieval results must be sorted by rank; position {} holds rank {}",
                pos + 1,
                r.rank
            )));
        }
    }
    let mentioned = kb.mentioned_values(&context.text());
    results
        .iter()
        .map(|r| {
            if r.entity_index >= kb.len() {
                return Err(Error::Contract(format!(
                    "entity index {} outside the knowledge base",
                    r.entity_index
                )));
            }
            let name = kb.entity(r.entity_index).name_value();
            Ok(MetaKnowledge {
                rank: RankTag::from_rank(r.rank),
                confidence: thresholds.bucket(r.prob),
                cooccurrence: if mentioned.contains(name) {
                    Cooccurrence::Old
                } else {
                    Cooccurrence::New
                },
                is_negative: false,
            })
        })
        .collect()
}

const RANK_TOKENS: [&str; 5] = [
    "<1th-entity>",
    "<2th-entity>",
    "<3th-entity>",
    "<4th-entity>",
    "<5th-entity>",
];

/// Prefix tokens in the order rank, confidence, co-occurrence.
pub fn render_prefix(meta: &MetaKnowledge) -> [&'static str; 3] {
    let rank = match meta.rank {
        RankTag::Top(n) => RANK_TOKENS[n as usize - 1],
        RankTag::Other => "<other-entity>",
    };
    let confidence = match meta.confidence {
        Confidence::Low => "<low-confidence>",
        Confidence::Mid => "<mid-confidence>",
        Confidence::High => "<high-confidence>",
    };
    let cooccurrence = match meta.cooccurrence {
        Cooccurrence::Old => "<old-entity>",
        Cooccurrence::New => "<new-entity>",
    };
    [rank, confidence, cooccurrence]
}

/// Prefix tokens in the order used by the language-model explanation
/// text: co-occurrence, confidence, rank.
pub fn render_prefix_llm(meta: &MetaKnowledge) -> [&'static str; 3] {
    let [rank, confidence, cooccurrence] = render_prefix(meta);
    [cooccurrence, confidence, rank]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    /// Short phrases for the fine-tuned generator.
    SmallModel,
    /// Sentences for an instruction-following language model.
    Llm,
}

pub fn render_prompt(meta: &MetaKnowledge, style: PromptStyle) -> String {
    match style {
        PromptStyle::SmallModel => {
            let rank = match meta.rank {
                RankTag::Top(n) => format!("The top-{n} recalled:"),
                RankTag::Other => "The negative entity recalled:".to_string(),
            };
            let confidence = match meta.confidence {
                Confidence::High => "with high confidence:",
                Confidence::Mid => "with middle confidence:",
                Confidence::Low => "with low confidence:",
            };
            let cooccurrence = match meta.cooccurrence {
                Cooccurrence::Old => "existed in history:",
                Cooccurrence::New => "newly recalled:",
            };
            format!("{rank} {confidence} {cooccurrence}")
        }
        PromptStyle::Llm => {
            let confidence = match meta.confidence {
                Confidence::High => "It has high possibility that",
                Confidence::Mid => "It has medium possibility that",
                Confidence::Low => "It has low possibility that",
            };
            let rank = match meta.rank {
                RankTag::Top(n) => format!("this entity is top-{n} important."),
                RankTag::Other => "this entity is not important.".to_string(),
            };
            let cooccurrence = match meta.cooccurrence {
                Cooccurrence::Old => "This entity has appeared before.",
                Cooccurrence::New => "This is a new entity.",
            };
            format!("{confidence} {rank} {cooccurrence}")
        }
    }
}

/// Lowest-scoring entity outside `retrieved`, ties broken by KB order.
/// `scores` holds the context's score against every KB entity.
pub fn select_negative(scores: &[f64], retrieved: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if retrieved.contains(&i) {
            continue;
        }
        if best.is_none_or(|b| s < scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| {
        Error::Contract("every entity was retrieved; no negative candidate is left".into())
    })
}

/// How meta knowledge reaches the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaMode {
    /// Special tokens before each entity.
    Prefix,
    /// Natural-language phrases before each entity.
    Prompt,
    /// No annotation in the input; a contrastive ranking loss instead.
    Ctr,
    None,
}

impl fmt::Display for MetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaMode::Prefix => "prefix",
            MetaMode::Prompt => "prompt",
            MetaMode::Ctr => "ctr",
            MetaMode::None => "none",
        })
    }
}

impl FromStr for MetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(MetaMode::Prefix),
            "prompt" => Ok(MetaMode::Prompt),
            "ctr" => Ok(MetaMode::Ctr),
            "none" => Ok(MetaMode::None),
            other => Err(Error::Input(format!("unknown meta mode {other:?}"))),
        }
    }
}

/// Text placed before an entity in the generator input.
pub fn render(meta: &MetaKnowledge, mode: MetaMode) -> String {
    match mode {
        MetaMode::Prefix => render_prefix(meta).join(" "),
        MetaMode::Prompt => render_prompt(meta, PromptStyle::SmallModel),
        MetaMode::Ctr | MetaMode::None => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEntity {
    pub entity_id: String,
    pub entity_index: usize,
    pub meta: MetaKnowledge,
    pub rendering: String,
}

impl AnnotatedEntity {
    pub fn new(
        kb: &KnowledgeBase,
        entity_index: usize,
        meta: MetaKnowledge,
        mode: MetaMode,
    ) -> Self {
        AnnotatedEntity {
            entity_id: kb.entity(entity_index).id().to_string(),
            entity_index,
            meta,
            rendering: render(&meta, mode),
        }
    }
}

/// Retrieval results paired with their meta knowledge and rendering.
pub fn annotate(
    results: &[RetrievalResult],
    context: &Context,
    kb: &KnowledgeBase,
    thresholds: &Thresholds,
    mode: MetaMode,
) -> Result<Vec<AnnotatedEntity>> {
    let metas = compute_meta(results, context, kb, thresholds)?;
    Ok(results
        .iter()
        .zip(metas)
        .map(|(r, m)| AnnotatedEntity::new(kb, r.entity_index, m, mode))
        .collect())
}
