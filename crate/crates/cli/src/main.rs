//! `mktod`: synthetic data, retriever pretraining, joint training,
//! evaluation and misalignment analysis from the command line.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{env_overrides, invalid, read_file, resolve, Invalid, Override, Preset, RunConfig};
use mktod::dialogue::Split;
use mktod::metaknow::MetaMode;
use mktod::retriever::RetrieverKind;

#[derive(Parser, Debug)]
#[command(
    name = "mktod",
    version,
    about = "Retrieval-augmented dialogue with meta knowledge"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML or JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default hyper-parameters to start from.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Knowledge base JSON file.
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
    /// Dialogue JSON lines file.
    #[arg(long, global = true)]
    dialogues: Option<PathBuf>,
    #[arg(long, global = true)]
    name_attribute: Option<String>,
    /// Any config value, e.g. `--set train.margin=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic knowledge base and dialogue set.
    Synth(SynthArgs),
    /// Validate a knowledge base and dialogues and write normalized copies.
    Ingest,
    /// Warm-start the retriever and initialize the generator.
    Pretrain(PretrainArgs),
    /// Train retriever and generator jointly from a warm start.
    Train(TrainArgs),
    /// Score a trained bundle on one split.
    Eval(EvalArgs),
    /// Print top-K entities per turn as JSON lines.
    Retrieve(RetrieveArgs),
    /// Print annotated entities per turn as JSON lines.
    Annotate(AnnotateArgs),
    /// Correlate retrieval quality with response quality across retrievers.
    Analyze(AnalyzeArgs),
    /// Talk to a trained bundle on the terminal.
    Chat(ChatArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n_entities: Option<usize>,
    #[arg(long)]
    n_attributes: Option<usize>,
    #[arg(long)]
    n_dialogues: Option<usize>,
    #[arg(long)]
    distractor_rate: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Warm-start bundle directory.
    #[arg(long)]
    warm: Option<PathBuf>,
    /// prefix, prompt, ctr or none.
    #[arg(long)]
    meta: Option<MetaMode>,
    #[arg(long)]
    no_mml: bool,
    #[arg(long)]
    no_negative: bool,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// dense, bm25, frequency, oracle or random.
    #[arg(long)]
    retriever: Option<RetrieverKind>,
    #[arg(long)]
    split: Option<Split>,
    /// Recall@K depths, comma separated.
    #[arg(long = "k", value_delimiter = ',')]
    ks: Vec<usize>,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    retriever: Option<RetrieverKind>,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    #[command(flatten)]
    retrieve: RetrieveArgs,
    #[arg(long)]
    meta: Option<MetaMode>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Retrievers to compare, comma separated.
    #[arg(long, value_delimiter = ',')]
    zoo: Vec<String>,
    /// Trained bundles as NAME=DIR, comma separated.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<String>,
    #[arg(long)]
    warm: Option<PathBuf>,
    /// Bundle supplying the jointly trained retriever.
    #[arg(long)]
    joint: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args, Debug)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    retriever: Option<RetrieverKind>,
    #[arg(long)]
    k: Option<usize>,
}

fn path_value(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Command-line flags as config overrides, lowest precedence first.
fn flag_overrides(cli: &Cli) -> anyhow::Result<Vec<Override>> {
    let g = &cli.global;
    let mut out = Vec::new();
    let mut put = |path: &str, v: Value| out.push(Override::new(path, v));
    if let Some(p) = g.preset {
        put("preset", serde_json::to_value(p)?);
    }
    if let Some(s) = g.seed {
        put("seed", json!(s));
    }
    if let Some(p) = &g.out {
        put("out_dir", path_value(p));
    }
    if let Some(p) = &g.kb {
        put("data.kb", path_value(p));
    }
    if let Some(p) = &g.dialogues {
        put("data.dialogues", path_value(p));
    }
    if let Some(n) = &g.name_attribute {
        put("data.name_attribute", json!(n));
    }
    match &cli.command {
        Command::Synth(a) => {
            for (key, v) in [
                ("synth.n_entities", a.n_entities),
                ("synth.n_attributes", a.n_attributes),
                ("synth.n_dialogues", a.n_dialogues),
                ("synth.distractor_rate", a.distractor_rate),
            ] {
                if let Some(v) = v {
                    put(key, json!(v));
                }
            }
        }
        Command::Pretrain(a) => {
            if let Some(s) = a.steps {
                put("pretrain.steps", json!(s));
            }
        }
        Command::Train(a) => {
            if let Some(p) = &a.warm {
                put("warm", path_value(p));
            }
            if let Some(m) = a.meta {
                put("train.meta_mode", serde_json::to_value(m)?);
            }
            if a.no_mml {
                put("train.use_mml", json!(false));
            }
            if a.no_negative {
                put("train.use_negative", json!(false));
            }
            if let Some(s) = a.steps {
                put("train.steps", json!(s));
            }
        }
        Command::Eval(a) => {
            if let Some(p) = &a.checkpoint {
                put("checkpoint", path_value(p));
            }
            if let Some(r) = a.retriever {
                put("eval.retriever", serde_json::to_value(r)?);
            }
            if let Some(s) = a.split {
                put("eval.split", serde_json::to_value(s)?);
            }
            if !a.ks.is_empty() {
                put("eval.ks", json!(a.ks));
            }
        }
        Command::Retrieve(RetrieveArgs { checkpoint, .. })
        | Command::Annotate(AnnotateArgs {
            retrieve: RetrieveArgs { checkpoint, .. },
            ..
        })
        | Command::Chat(ChatArgs { checkpoint, .. }) => {
            if let Some(p) = checkpoint {
                put("checkpoint", path_value(p));
            }
        }
        Command::Analyze(a) => {
            if !a.zoo.is_empty() {
                put("analyze.zoo", json!(a.zoo));
            }
            if !a.checkpoints.is_empty() {
                let mut map = serde_json::Map::new();
                for item in &a.checkpoints {
                    let (name, dir) = item
                        .split_once('=')
                        .filter(|(n, d)| !n.is_empty() && !d.is_empty())
                        .ok_or_else(|| invalid(format!("expected NAME=DIR, got {item:?}")))?;
                    if map.insert(name.to_string(), json!(dir)).is_some() {
                        return Err(invalid(format!("checkpoint {name:?} given twice")));
                    }
                }
                // Replace, rather than extend, whatever the file listed.
                put("analyze.checkpoints", Value::Null);
                put("analyze.checkpoints", Value::Object(map));
            }
            if let Some(p) = &a.warm {
                put("warm", path_value(p));
            }
            if let Some(p) = &a.joint {
                put("analyze.joint", path_value(p));
            }
            if let Some(k) = a.k {
                put("analyze.k", json!(k));
            }
            if let Some(s) = a.split {
                put("analyze.split", serde_json::to_value(s)?);
            }
        }
        Command::Ingest => {}
    }
    for item in &g.set {
        out.push(Override::parse(item)?);
    }
    Ok(out)
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let file = cli.global.config.as_deref().map(read_file).transpose()?;
    let env = env_overrides(std::env::vars());
    resolve(file, &env, &flag_overrides(cli)?)
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Ingest => commands::ingest(&cfg),
        Command::Pretrain(_) => commands::pretrain(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Retrieve(a) => commands::retrieve(&cfg, a.retriever, a.split, a.k, None),
        Command::Annotate(a) => {
            let r = &a.retrieve;
            commands::retrieve(&cfg, r.retriever, r.split, r.k, Some(a.meta))
        }
        Command::Analyze(_) => commands::analyze(&cfg),
        Command::Chat(a) => commands::chat(&cfg, a.retriever, a.k),
    }
}

/// The error chain on one line, skipping causes already quoted by their
/// parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 1 for bad input or configuration, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mktod::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    ExitCode::from(run(std::env::args_os()))
}
