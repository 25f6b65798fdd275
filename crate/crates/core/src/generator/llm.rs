//! In-context prompt text for an instruction-following language model.

use serde::{Deserialize, Serialize};

use crate::dialogue::Context;
use crate::kb::{flatten_entity, KnowledgeBase};
use crate::metaknow::{render_prefix_llm, render_prompt, AnnotatedEntity, PromptStyle};

/// Explanation of the prefix tags.
pub const PREFIX_EXPLANATION: &str = "Each record of knowledge base is accompanied by three tags. \
The first tag indicates whether this entity appeared before. <new-entity> means this is a new \
entity, and <old-entity> means this entity appeared before. The second tag indicates the \
authenticity of the third tag. There are three types <low-confidence>, <mid-confidence> and \
<high-confidence> indicating low, middle, high retrieval confidence respectively. A higher \
retrieval confidence means the entity is potentially more related to the user goal. The third tag \
indicates its importance to the dialogue. <nth-entity> means it is the nth important entity in the \
knowledge base, for example, <1th-entity> is the top-1 important and <other-entity> means it is not \
important.";

/// Explanation used when records carry descriptive sentences.
pub const PROMPT_EXPLANATION: &str = "Each record of knowledge base is preceded by sentences \
describing how it was retrieved for the current dialogue. Records described as likely and \
important deserve more attention when you write the reply.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    Prefix,
    Prompt,
}

/// A solved example shown before the query.
#[derive(Clone, Debug)]
pub struct Demonstration {
    pub context: Context,
    pub entities: Vec<AnnotatedEntity>,
    pub response: String,
}

fn knowledge_lines(kb: &KnowledgeBase, entities: &[AnnotatedEntity], mode: LlmMode) -> String {
    entities
        .iter()
        .map(|a| {
            let tags = match mode {
                LlmMode::Prefix => render_prefix_llm(&a.meta).join(" "),
                LlmMode::Prompt => render_prompt(&a.meta, PromptStyle::Llm),
            };
            format!("{tags} {}\n", flatten_entity(kb.entity(a.entity_index)))
        })
        .collect()
}

fn dialogue_lines(context: &Context) -> String {
    context
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let who = if i % 2 == 0 { "User" } else { "System" };
            format!("{who}: {s}\n")
        })
        .collect()
}

fn block(
    kb: &KnowledgeBase,
    context: &Context,
    entities: &[AnnotatedEntity],
    mode: LlmMode,
) -> String {
    format!(
        "Knowledge base:\n{}Dialogue:\n{}Response:",
        knowledge_lines(kb, entities, mode),
        dialogue_lines(context)
    )
}

/// Explanation, then each demonstration with its response, then the
/// current dialogue with an open response slot.
pub fn render_llm_prompt(
    kb: &KnowledgeBase,
    context: &Context,
    entities: &[AnnotatedEntity],
    demonstrations: &[Demonstration],
    mode: LlmMode,
) -> String {
    let mut out = String::from(match mode {
        LlmMode::Prefix => PREFIX_EXPLANATION,
        LlmMode::Prompt => PROMPT_EXPLANATION,
    });
    out.push_str("\n\n");
    for d in demonstrations {
        out.push_str(&block(kb, &d.context, &d.entities, mode));
        out.push(' ');
        out.push_str(&d.response);
        out.push_str("\n\n");
    }
    out.push_str(&block(kb, context, entities, mode));
    out
}
