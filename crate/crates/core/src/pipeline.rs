//! Glue shared by training, evaluation and the command line: vocabulary
//! construction, batch inference and the on-disk model bundle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::dialogue::{Dialogue, Sample, Split};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::kb::{flatten_entity, KnowledgeBase};
use crate::metaknow::{
    annotate, render_prompt, AnnotatedEntity, Confidence, Cooccurrence, MetaKnowledge, MetaMode,
    PromptStyle, RankTag, Thresholds,
};
use crate::retriever::{DenseRetriever, RetrievalResult, Retriever, RetrieverConfig};
use crate::text::Vocab;

/// Every phrase the prompt renderings can produce.
fn prompt_phrases() -> Vec<String> {
    let mut out = Vec::new();
    let ranks = (1..=5).map(RankTag::Top).chain([RankTag::Other]);
    for rank in ranks {
        for confidence in [Confidence::Low, Confidence::Mid, Confidence::High] {
            for cooccurrence in [Cooccurrence::Old, Cooccurrence::New] {
                let m = MetaKnowledge {
                    rank,
                    confidence,
                    cooccurrence,
                    is_negative: false,
                };
                out.push(render_prompt(&m, PromptStyle::SmallModel));
            }
        }
    }
    out
}

/// Vocabulary over the training dialogues and the flattened KB, with
/// attribute names and prompt phrases forced in.
pub fn build_vocab(kb: &KnowledgeBase, dialogues: &[Dialogue], min_count: usize) -> Result<Vocab> {
    let mut corpus: Vec<String> = kb.entities().iter().map(flatten_entity).collect();
    for d in dialogues.iter().filter(|d| d.split == Split::Train) {
        for t in &d.turns {
            corpus.push(t.user.clone());
            corpus.push(t.system.clone());
        }
    }
    let mut forced = kb.attribute_names();
    forced.extend(prompt_phrases());
    Vocab::build(corpus.iter().map(String::as_str), &forced, min_count)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub k: usize,
    pub meta_mode: MetaMode,
    pub thresholds: Thresholds,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            k: 7,
            meta_mode: MetaMode::Prefix,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnOutput {
    pub retrieved: Vec<RetrievalResult>,
    pub entities: Vec<AnnotatedEntity>,
    pub response: String,
}

/// Retrieves, annotates and generates for one sample.
pub fn infer_one(
    generator: &Generator,
    retriever: &Retriever,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    sample: &Sample,
    key: u64,
    config: &InferenceConfig,
) -> Result<TurnOutput> {
    let retrieved = retriever.retrieve(vocab, kb, sample, key, config.k)?;
    let entities = annotate(
        &retrieved,
        &sample.context,
        kb,
        &config.thresholds,
        config.meta_mode,
    )?;
    let response = generator.respond(vocab, &sample.context, &entities, kb)?;
    Ok(TurnOutput {
        retrieved,
        entities,
        response,
    })
}

/// Inference over a list of samples; sample position is the random key.
pub fn infer(
    generator: &Generator,
    retriever: &Retriever,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    samples: &[Sample],
    config: &InferenceConfig,
) -> Result<Vec<TurnOutput>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| infer_one(generator, retriever, vocab, kb, s, i as u64, config))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub retriever: RetrieverConfig,
    pub generator: GeneratorConfig,
    pub inference: InferenceConfig,
}

/// Vocabulary, retriever and generator saved side by side in one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub vocab: Vocab,
    pub retriever: DenseRetriever,
    pub generator: Generator,
    pub inference: InferenceConfig,
}

impl ModelBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.retriever.store().save(dir, "retriever")?;
        self.generator.store().save(dir, "generator")?;
        let manifest = BundleManifest {
            retriever: *self.retriever.config(),
            generator: *self.generator.config(),
            inference: self.inference,
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::file(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let retriever = DenseRetriever::from_store(
            manifest.retriever,
            ParameterStore::load(dir, "retriever")?,
        )?;
        let generator =
            Generator::from_store(manifest.generator, ParameterStore::load(dir, "generator")?)?;
        if generator.vocab_size() != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "generator has {} output tokens but the vocabulary has {}",
                generator.vocab_size(),
                vocab.len()
            )));
        }
        Ok(ModelBundle {
            vocab,
            retriever,
            generator,
            inference: manifest.inference,
        })
    }

    /// Rounds parameters to the precision kept on disk.
    pub fn round_to_f32(&mut self) {
        self.retriever.store_mut().round_to_f32();
        self.generator.store_mut().round_to_f32();
    }
}
