//! Joint training of retriever and generator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::example::{example_loss, prepare_example, BoundModels};
use super::losses::LossWeights;
use super::optim::{linear_decay, AdamW, OptimizerConfig};
use crate::autodiff::Graph;
use crate::dialogue::Sample;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::generator::Generator;
use crate::kb::KnowledgeBase;
use crate::metaknow::{MetaMode, Thresholds};
use crate::pipeline::{infer, InferenceConfig};
use crate::retriever::{DenseRetriever, Retriever, Tower};
use crate::text::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Contrastive margin.
    pub margin: f64,
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub optimizer: OptimizerConfig,
    /// Retriever learning rate when it differs from the generator's.
    pub retriever_lr: Option<f64>,
    pub positive_set_size: usize,
    pub use_mml: bool,
    pub use_negative: bool,
    pub meta_mode: MetaMode,
    pub stop_generator_grad_in_mml: bool,
    /// Keep meta annotations in the single-entity inputs of the marginal
    /// likelihood and the contrastive loss.
    pub annotate_single: bool,
    pub thresholds: Thresholds,
    /// Steps between rebuilds of the entity index used for retrieval.
    pub index_refresh: usize,
    /// Steps between validation runs; 0 validates only at the end.
    pub eval_every: usize,
    /// Validation samples used per run; 0 uses all.
    pub eval_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            margin: 0.01,
            k: 7,
            steps: 1500,
            batch_size: 2,
            accumulation: 32,
            optimizer: OptimizerConfig::default(),
            retriever_lr: None,
            positive_set_size: 1,
            use_mml: true,
            use_negative: true,
            meta_mode: MetaMode::Prefix,
            stop_generator_grad_in_mml: false,
            annotate_single: true,
            thresholds: Thresholds::default(),
            index_refresh: 100,
            eval_every: 100,
            eval_limit: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the synthetic task on one CPU core.
    pub fn reference() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 4,
            accumulation: 1,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                clip: 1.0,
                ..OptimizerConfig::default()
            },
            retriever_lr: Some(3e-3),
            index_refresh: 20,
            eval_every: 50,
            eval_limit: 0,
            ..TrainConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            k: self.k,
            meta_mode: self.meta_mode,
            thresholds: self.thresholds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.margin > 0.0) {
            return bad(format!(
                "the contrastive margin must be positive, got {}",
                self.margin
            ));
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return bad("batch size and accumulation must be at least 1".into());
        }
        if self.positive_set_size == 0 || self.positive_set_size > self.k {
            return bad(format!("positive set size must lie in 1..={}", self.k));
        }
        if self.index_refresh == 0 {
            return bad("index refresh interval must be at least 1".into());
        }
        if !(self.optimizer.lr >= 0.0) || self.retriever_lr.is_some_and(|lr| !(lr >= 0.0)) {
            return bad("learning rates must be non-negative".into());
        }
        if !(self.thresholds.low <= self.thresholds.high) {
            return bad("the low confidence threshold exceeds the high one".into());
        }
        Ok(())
    }
}

/// One row of the step log; losses are means over the step's examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_nll: Option<f64>,
    pub l_mml: Option<f64>,
    pub l_ctr: Option<f64>,
    pub val_entity_f1: Option<f64>,
    pub val_recall_at_k: Option<f64>,
}

pub fn log_to_csv(log: &[StepLog]) -> String {
    let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    let mut out = String::from("step,L_NLL,L_MML,L_CTR,val_entity_f1,val_recall_at_k\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            f(r.l_nll),
            f(r.l_mml),
            f(r.l_ctr),
            f(r.val_entity_f1),
            f(r.val_recall_at_k)
        );
    }
    out
}

pub fn write_log_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    fs::write(path, log_to_csv(log)).map_err(|e| Error::file(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation checkpoint (the last step when
    /// there is no validation data).
    pub retriever: DenseRetriever,
    pub generator: Generator,
    pub log: Vec<StepLog>,
    pub best_step: usize,
    pub best_entity_f1: Option<f64>,
    pub seconds: f64,
}

/// Validation Entity F1 and Recall@K of the current parameters.
pub fn validate_models(
    retriever: &DenseRetriever,
    generator: &Generator,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    samples: &[Sample],
    config: &InferenceConfig,
) -> Result<(f64, Option<f64>)> {
    let zoo = Retriever::dense(retriever.clone(), vocab, kb)?;
    let outputs = infer(generator, &zoo, vocab, kb, samples, config)?;
    let report = evaluate(&outputs, samples, kb, &[config.k])?;
    Ok((report.entity_f1, report.recall_at_k[&config.k]))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn train(
    retriever: DenseRetriever,
    generator: Generator,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    train_samples: &[Sample],
    valid_samples: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let mut retriever = retriever;
    let mut generator = generator;
    if config.steps == 0 {
        return Ok(TrainOutcome {
            retriever,
            generator,
            log: Vec::new(),
            best_step: 0,
            best_entity_f1: None,
            seconds: 0.0,
        });
    }
    if train_samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    if config.k > kb.len() || (config.use_negative && config.k >= kb.len()) {
        return Err(Error::Contract(format!(
            "K={} leaves no room in a knowledge base of {} entities",
            config.k,
            kb.len()
        )));
    }
    let valid = if config.eval_limit > 0 {
        &valid_samples[..config.eval_limit.min(valid_samples.len())]
    } else {
        valid_samples
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut gen_opt = AdamW::new(config.optimizer);
    let r_lr = config.retriever_lr.unwrap_or(config.optimizer.lr);
    let mut ret_opt = AdamW::new(OptimizerConfig {
        lr: r_lr,
        ..config.optimizer
    });
    let per_step = config.batch_size * config.accumulation;
    let scale = 1.0 / per_step as f64;
    let train_retriever = config.use_mml && config.beta > 0.0;
    let inference = config.inference();

    let mut index = retriever.build_index(vocab, kb, 0)?;
    let mut log = Vec::with_capacity(config.steps);
    let mut best: Option<(f64, usize, DenseRetriever, Generator)> = None;
    for step in 0..config.steps {
        if step > 0 && step % config.index_refresh == 0 {
            index = retriever.build_index(vocab, kb, step)?;
        }
        let (mut nll, mut mml, mut ctr) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..per_step {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &train_samples[order[cursor]];
            cursor += 1;
            let ex = prepare_example(&retriever, &generator, vocab, kb, sample, &index, config)?;
            let mut g = Graph::new();
            let vars = BoundModels {
                context: retriever.bind(&mut g, Tower::Context)?,
                entity: retriever.bind(&mut g, Tower::Entity)?,
                generator: generator.bind(&mut g)?,
            };
            let terms =
                example_loss(&mut g, &retriever, &generator, &vars, &ex, config).map_err(|e| {
                    match e {
                        Error::NumericInput(detail) => Error::Divergence { step, detail },
                        other => other,
                    }
                })?;
            let total = g.item(terms.total);
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!(
                        "loss is {total} on {} turn {}",
                        sample.dialogue_id, sample.context.turn_index
                    ),
                });
            }
            for (t, acc) in [
                (terms.nll, &mut nll),
                (terms.mml, &mut mml),
                (terms.ctr, &mut ctr),
            ] {
                if let Some(v) = t {
                    acc.push(g.item(v));
                }
            }
            let scaled = g.scale(terms.total, scale);
            g.backward(scaled)?;
            generator.store_mut().accumulate_grads(&g);
            if train_retriever {
                retriever.store_mut().accumulate_grads(&g);
            }
        }
        gen_opt.step(
            generator.store_mut(),
            linear_decay(config.optimizer.lr, step, config.steps),
        );
        if train_retriever {
            ret_opt.step(
                retriever.store_mut(),
                linear_decay(r_lr, step, config.steps),
            );
        }
        let mut row = StepLog {
            step: step + 1,
            l_nll: mean(&nll),
            l_mml: mean(&mml),
            l_ctr: mean(&ctr),
            val_entity_f1: None,
            val_recall_at_k: None,
        };
        let last = step + 1 == config.steps;
        let due = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        if !valid.is_empty() && (due || last) {
            let (f1, recall) =
                validate_models(&retriever, &generator, vocab, kb, valid, &inference)?;
            info!(
                "step {}: val Entity F1 {:.4}, Recall@{} {}",
                step + 1,
                f1,
                config.k,
                recall.map_or("n/a".into(), |r| format!("{r:.4}"))
            );
            row.val_entity_f1 = Some(f1);
            row.val_recall_at_k = recall;
            if best.as_ref().is_none_or(|b| f1 > b.0) {
                best = Some((f1, step + 1, retriever.clone(), generator.clone()));
            }
        }
        debug!(
            "step {} nll {:?} mml {:?} ctr {:?}",
            step + 1,
            row.l_nll,
            row.l_mml,
            row.l_ctr
        );
        log.push(row);
    }
    let seconds = start.elapsed().as_secs_f64();
    info!("trained {} steps in {seconds:.1}s", config.steps);
    Ok(match best {
        Some((f1, best_step, r, g)) => TrainOutcome {
            retriever: r,
            generator: g,
            log,
            best_step,
            best_entity_f1: Some(f1),
            seconds,
        },
        None => TrainOutcome {
            retriever,
            generator,
            log,
            best_step: config.steps,
            best_entity_f1: None,
            seconds,
        },
    })
}
