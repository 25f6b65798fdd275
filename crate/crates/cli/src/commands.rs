use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use anyhow::{Context as _, Result};
use log::info;
use serde::Serialize;
use serde_json::json;

use mktod::analysis::{behavior_stats, misalignment_study, BehaviorStats, GeneratorEntry};
use mktod::dialogue::{
    load_dialogues, make_synthetic_task, samples, save_dialogues, Context, Dialogue, KbScope,
    Sample, Split,
};
use mktod::eval::evaluate;
use mktod::generator::Generator;
use mktod::kb::{load_kb, save_kb, KnowledgeBase};
use mktod::metaknow::{annotate, MetaMode};
use mktod::pipeline::{build_vocab, infer, infer_one, InferenceConfig, ModelBundle};
use mktod::retriever::{pretrain_retriever, Bm25, DenseRetriever, Retriever, RetrieverKind};
use mktod::text::Vocab;
use mktod::training::{train as train_models, write_log_csv};

use crate::config::{invalid, RunConfig};

fn load_data(cfg: &RunConfig) -> Result<(KnowledgeBase, Vec<Dialogue>)> {
    let kb = load_kb(&cfg.data.kb, &cfg.data.name_attribute)?;
    let dialogues = load_dialogues(&cfg.data.dialogues, &kb)?;
    Ok((kb, dialogues))
}

fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    Ok(ModelBundle::load(dir).with_context(|| format!("loading bundle {}", dir.display()))?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn split_name(split: Split) -> String {
    serde_json::to_value(split)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Any retriever of the zoo except the two dense members, which need a
/// trained model.
fn lexical_retriever(kind: RetrieverKind, kb: &KnowledgeBase, seed: u64) -> Option<Retriever> {
    match kind {
        RetrieverKind::Bm25 => Some(Retriever::Bm25(Bm25::for_kb(kb))),
        RetrieverKind::Frequency => Some(Retriever::Frequency),
        RetrieverKind::Oracle => Some(Retriever::Oracle),
        RetrieverKind::Random => Some(Retriever::Random { seed }),
        RetrieverKind::Dense => None,
    }
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir_or("data");
    let (kb, dialogues) = make_synthetic_task(&cfg.synth)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_kb(&kb, &out.join("kb.json"))?;
    save_dialogues(&dialogues, &out.join("dialogues.jsonl"))?;
    cfg.write(&out)?;
    info!(
        "wrote {} entities and {} dialogues to {}",
        kb.len(),
        dialogues.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitSummary {
    dialogues: usize,
    turns: usize,
    labeled_turns: usize,
}

#[derive(Serialize)]
struct IngestSummary {
    entities: usize,
    attributes: Vec<String>,
    vocab_size: usize,
    splits: BTreeMap<String, SplitSummary>,
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir_or("data");
    let (kb, dialogues) = load_data(cfg)?;
    let vocab = build_vocab(&kb, &dialogues, cfg.data.min_count)?;
    let mut splits = BTreeMap::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let ds: Vec<&Dialogue> = dialogues.iter().filter(|d| d.split == split).collect();
        splits.insert(
            split_name(split),
            SplitSummary {
                dialogues: ds.len(),
                turns: ds.iter().map(|d| d.turns.len()).sum(),
                labeled_turns: ds
                    .iter()
                    .flat_map(|d| &d.turns)
                    .filter(|t| t.gold_entity_ids.as_ref().is_some_and(|g| !g.is_empty()))
                    .count(),
            },
        );
    }
    let summary = IngestSummary {
        entities: kb.len(),
        attributes: kb.attribute_names(),
        vocab_size: vocab.len(),
        splits,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_kb(&kb, &out.join("kb.json"))?;
    save_dialogues(&dialogues, &out.join("dialogues.jsonl"))?;
    vocab.save(&out.join("vocab.txt"))?;
    write_json(&out.join("summary.json"), &summary)?;
    cfg.write(&out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir.clone().unwrap_or_else(|| cfg.warm.clone());
    let (kb, dialogues) = load_data(cfg)?;
    let vocab = build_vocab(&kb, &dialogues, cfg.data.min_count)?;
    let train_samples = samples(&dialogues, Split::Train, &kb);
    let mut retriever = DenseRetriever::new(cfg.retriever, vocab.len(), cfg.seed)?;
    let generator = Generator::new(cfg.generator, vocab.len(), cfg.seed)?;
    let report = pretrain_retriever(&mut retriever, &vocab, &kb, &train_samples, &cfg.pretrain)?;
    let bundle = ModelBundle {
        vocab,
        retriever,
        generator,
        inference: cfg.train.inference(),
    };
    bundle.save(&out)?;
    let mut log = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(log, "{i},{l}");
    }
    write_text(&out.join("pretrain_log.csv"), &log)?;
    cfg.write(&out)?;
    info!(
        "warm start written to {} ({} labeled turns, {} skipped)",
        out.display(),
        report.labeled,
        report.skipped
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    best_step: usize,
    best_entity_f1: Option<f64>,
    meta_mode: MetaMode,
    use_mml: bool,
    use_negative: bool,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.checkpoint.clone());
    let warm = load_bundle(&cfg.warm)?;
    let (kb, dialogues) = load_data(cfg)?;
    let train_samples = samples(&dialogues, Split::Train, &kb);
    let valid_samples = samples(&dialogues, Split::Valid, &kb);
    let outcome = train_models(
        warm.retriever,
        warm.generator,
        &warm.vocab,
        &kb,
        &train_samples,
        &valid_samples,
        &cfg.train,
    )?;
    let bundle = ModelBundle {
        vocab: warm.vocab,
        retriever: outcome.retriever,
        generator: outcome.generator,
        inference: cfg.train.inference(),
    };
    bundle.save(&out)?;
    write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            steps: cfg.train.steps,
            best_step: outcome.best_step,
            best_entity_f1: outcome.best_entity_f1,
            meta_mode: cfg.train.meta_mode,
            use_mml: cfg.train.use_mml,
            use_negative: cfg.train.use_negative,
        },
    )?;
    cfg.write(&out)?;
    match outcome.best_entity_f1 {
        Some(f1) => info!(
            "trained for {} steps in {:.1}s; best validation Entity F1 {f1:.4} at step {}",
            cfg.train.steps, outcome.seconds, outcome.best_step
        ),
        None => info!(
            "trained for {} steps in {:.1}s",
            cfg.train.steps, outcome.seconds
        ),
    }
    Ok(())
}

/// The retriever to run with a bundle: its own dense model or a baseline.
fn bundle_retriever(
    kind: RetrieverKind,
    bundle: &ModelBundle,
    kb: &KnowledgeBase,
    seed: u64,
) -> Result<Retriever> {
    match lexical_retriever(kind, kb, seed) {
        Some(r) => Ok(r),
        None => Ok(Retriever::dense(
            bundle.retriever.clone(),
            &bundle.vocab,
            kb,
        )?),
    }
}

fn check_depths(ks: &[usize], k: usize) -> Result<()> {
    match ks.iter().find(|&&d| d > k) {
        Some(d) => Err(invalid(format!(
            "Recall@{d} needs at least {d} retrieved entities but the bundle retrieves {k}"
        ))),
        None => Ok(()),
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir_or("runs/eval");
    let bundle = load_bundle(&cfg.checkpoint)?;
    check_depths(&cfg.eval.ks, bundle.inference.k)?;
    let (kb, dialogues) = load_data(cfg)?;
    let split_samples = samples(&dialogues, cfg.eval.split, &kb);
    let retriever = bundle_retriever(cfg.eval.retriever, &bundle, &kb, cfg.seed)?;
    let outputs = infer(
        &bundle.generator,
        &retriever,
        &bundle.vocab,
        &kb,
        &split_samples,
        &bundle.inference,
    )?;
    let report = evaluate(&outputs, &split_samples, &kb, &cfg.eval.ks)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("metrics.json"), &report)?;
    cfg.write(&out)?;
    print!("{}", report.table());
    Ok(())
}

/// Vocabulary for runs that may not have a dense model.
fn vocab_for(kind: RetrieverKind, cfg: &RunConfig) -> Result<(Option<ModelBundle>, Option<Vocab>)> {
    if kind == RetrieverKind::Dense || cfg.checkpoint.join("model.json").exists() {
        Ok((Some(load_bundle(&cfg.checkpoint)?), None))
    } else {
        let (kb, dialogues) = load_data(cfg)?;
        Ok((
            None,
            Some(build_vocab(&kb, &dialogues, cfg.data.min_count)?),
        ))
    }
}

/// `retrieve`, or `annotate` when `meta` is given.
pub fn retrieve(
    cfg: &RunConfig,
    kind: Option<RetrieverKind>,
    split: Option<Split>,
    k: Option<usize>,
    meta: Option<Option<MetaMode>>,
) -> Result<()> {
    let kind = kind.unwrap_or(cfg.eval.retriever);
    let (bundle, plain_vocab) = vocab_for(kind, cfg)?;
    let (kb, dialogues) = load_data(cfg)?;
    let vocab = match (&bundle, &plain_vocab) {
        (Some(b), _) => &b.vocab,
        (None, Some(v)) => v,
        (None, None) => unreachable!("vocab_for returns one of the two"),
    };
    let retriever = match &bundle {
        Some(b) => bundle_retriever(kind, b, &kb, cfg.seed)?,
        None => lexical_retriever(kind, &kb, cfg.seed).expect("dense always loads a bundle"),
    };
    let inference = bundle
        .as_ref()
        .map_or(cfg.train.inference(), |b| b.inference);
    let k = k.unwrap_or(inference.k);
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let split_samples = samples(&dialogues, split.unwrap_or(cfg.eval.split), &kb);
    let stdout = io::stdout();
    let mut w = io::BufWriter::new(stdout.lock());
    for (i, s) in split_samples.iter().enumerate() {
        let results = retriever.retrieve(vocab, &kb, s, i as u64, k)?;
        let line = match meta {
            None => json!({
                "dialogue_id": s.dialogue_id,
                "turn_index": s.context.turn_index,
                "results": results,
            }),
            Some(mode) => {
                let mode = mode.unwrap_or(inference.meta_mode);
                let entities = annotate(&results, &s.context, &kb, &inference.thresholds, mode)?;
                json!({
                    "dialogue_id": s.dialogue_id,
                    "turn_index": s.context.turn_index,
                    "entities": entities,
                })
            }
        };
        if let Err(e) = writeln!(w, "{line}") {
            return quiet_broken_pipe(e);
        }
    }
    w.flush().or_else(quiet_broken_pipe)
}

/// A closed downstream pipe (`| head`) ends output normally.
fn quiet_broken_pipe(e: io::Error) -> Result<()> {
    if e.kind() == io::ErrorKind::BrokenPipe {
        Ok(())
    } else {
        Err(e.into())
    }
}

#[derive(Serialize)]
struct AnalysisSummary {
    k: usize,
    split: Split,
    n_turns: usize,
    zoo: Vec<String>,
    pearson: BTreeMap<String, Option<f64>>,
    rows: Vec<mktod::analysis::AlignmentRow>,
    behavior: BTreeMap<String, BehaviorStats>,
}

pub fn analyze(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir_or("runs/analyze");
    let a = &cfg.analyze;
    let checkpoints = if a.checkpoints.is_empty() {
        BTreeMap::from([("model".to_string(), cfg.checkpoint.clone())])
    } else {
        a.checkpoints.clone()
    };
    let mut bundles = Vec::with_capacity(checkpoints.len());
    for (name, dir) in &checkpoints {
        bundles.push((name.clone(), load_bundle(dir)?));
    }
    let (kb, dialogues) = load_data(cfg)?;
    let vocab = bundles[0].1.vocab.clone();
    if bundles.iter().any(|(_, b)| b.vocab != vocab) {
        return Err(invalid("all checkpoints must share one vocabulary"));
    }
    let mut zoo = Vec::with_capacity(a.zoo.len());
    let mut seen = BTreeSet::new();
    for name in &a.zoo {
        if !seen.insert(name.as_str()) {
            return Err(invalid(format!("retriever {name:?} listed twice")));
        }
        let model = match name.as_str() {
            "pretrained-dense" => Some(load_bundle(&cfg.warm)?),
            "jointly-trained-dense" => match &a.joint {
                Some(dir) => Some(load_bundle(dir)?),
                None => Some(bundles[0].1.clone()),
            },
            _ => None,
        };
        let retriever = match model {
            Some(m) => {
                if m.vocab != vocab {
                    return Err(invalid(format!("{name} uses a different vocabulary")));
                }
                Retriever::dense(m.retriever, &vocab, &kb)?
            }
            None => {
                let kind: RetrieverKind = name.parse().map_err(|_| {
                    invalid(format!(
                        "unknown zoo member {name:?}; expected bm25, frequency, oracle, random, \
                         pretrained-dense or jointly-trained-dense"
                    ))
                })?;
                lexical_retriever(kind, &kb, cfg.seed).ok_or_else(|| {
                    invalid("name the dense members pretrained-dense or jointly-trained-dense")
                })?
            }
        };
        zoo.push((name.clone(), retriever));
    }
    let split_samples = samples(&dialogues, a.split, &kb);
    let thresholds = cfg.train.thresholds;
    let entries: Vec<GeneratorEntry<'_>> = bundles
        .iter()
        .map(|(name, b)| GeneratorEntry {
            name: name.clone(),
            generator: &b.generator,
            meta_mode: b.inference.meta_mode,
        })
        .collect();
    let report = misalignment_study(
        &zoo,
        &entries,
        &vocab,
        &kb,
        &split_samples,
        a.k,
        &thresholds,
    )?;

    // Entity usage of each generator paired with its own retriever.
    let mut behavior = BTreeMap::new();
    let mut behavior_csv = String::from("generator,group,key,used,total,fraction\n");
    for (name, b) in &bundles {
        let own = Retriever::dense(b.retriever.clone(), &vocab, &kb)?;
        let config = InferenceConfig {
            k: a.k,
            meta_mode: b.inference.meta_mode,
            thresholds,
        };
        let outputs = infer(&b.generator, &own, &vocab, &kb, &split_samples, &config)?;
        let responses: Vec<String> = outputs.iter().map(|o| o.response.clone()).collect();
        let lists: Vec<_> = outputs.into_iter().map(|o| o.retrieved).collect();
        let stats = behavior_stats(&responses, &lists, &kb, &thresholds)?;
        for line in stats.to_csv().lines().skip(1) {
            let _ = writeln!(behavior_csv, "{name},{line}");
        }
        behavior.insert(name.clone(), stats);
    }

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("alignment.csv"), &report.to_csv())?;
    write_text(&out.join("behavior.csv"), &behavior_csv)?;
    let summary = AnalysisSummary {
        k: a.k,
        split: a.split,
        n_turns: split_samples.len(),
        zoo: a.zoo.clone(),
        pearson: report.pearson.clone(),
        rows: report.rows.clone(),
        behavior,
    };
    write_json(&out.join("analysis.json"), &summary)?;
    cfg.write(&out)?;
    println!("generator,retriever,recall@{},entity_f1,bleu", a.k);
    for r in &report.rows {
        println!(
            "{},{},{:.2},{:.2},{:.2}",
            r.generator,
            r.retriever,
            100.0 * r.recall_at_k,
            100.0 * r.entity_f1,
            100.0 * r.bleu
        );
    }
    for (name, p) in &report.pearson {
        match p {
            Some(p) => println!("pearson[{name}] = {p:.4}"),
            None => println!("pearson[{name}] undefined"),
        }
    }
    Ok(())
}

pub fn chat(cfg: &RunConfig, kind: Option<RetrieverKind>, k: Option<usize>) -> Result<()> {
    let bundle = load_bundle(&cfg.checkpoint)?;
    let kb = load_kb(&cfg.data.kb, &cfg.data.name_attribute)?;
    let retriever = bundle_retriever(kind.unwrap_or(RetrieverKind::Dense), &bundle, &kb, cfg.seed)?;
    let mut inference = bundle.inference;
    if let Some(k) = k {
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        inference.k = k;
    }
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    writeln!(
        stdout,
        "type a message; :reset clears the history, :quit leaves"
    )?;
    let mut history: Vec<String> = Vec::new();
    let mut turn = 0u64;
    loop {
        write!(stdout, "user> ")?;
        stdout.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim();
        match line {
            "" => continue,
            ":quit" | ":q" => break,
            ":reset" => {
                history.clear();
                continue;
            }
            _ => {}
        }
        history.push(line.to_string());
        let sample = Sample {
            dialogue_id: "chat".into(),
            context: Context::from_segments(history.clone())?,
            response: String::new(),
            gold_entity_ids: None,
            gold_values: BTreeSet::new(),
            scope: KbScope::Global,
        };
        let output = infer_one(
            &bundle.generator,
            &retriever,
            &bundle.vocab,
            &kb,
            &sample,
            turn,
            &inference,
        )?;
        turn += 1;
        for (r, e) in output.retrieved.iter().zip(&output.entities) {
            let m = &e.meta;
            writeln!(
                stdout,
                "  {:>2}. {:<24} p={:.3} {:?}/{:?}/{:?}  {}",
                r.rank,
                kb.entity(r.entity_index).name_value(),
                r.prob,
                m.rank,
                m.confidence,
                m.cooccurrence,
                e.rendering
            )?;
        }
        writeln!(stdout, "system> {}", output.response)?;
        history.push(output.response);
    }
    Ok(())
}
