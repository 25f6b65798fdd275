//! Acceptance suite. Every test prints one PASS/FAIL line to stderr,
//! bypassing the harness's output capture.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::panic::{self, UnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mktod::analysis::pearson;
use mktod::autodiff::gradcheck::{check_gradients, relative_error};
use mktod::autodiff::{Graph, Tensor, Var};
use mktod::dialogue::{
    make_synthetic_task, samples, Context, KbScope, Sample, Split, SyntheticSpec,
};
use mktod::eval::{entity_f1, evaluate, recall_at_k};
use mktod::generator::{render_llm_prompt, Generator, GeneratorConfig, LlmMode};
use mktod::kb::{Entity, KnowledgeBase};
use mktod::metaknow::{
    annotate, render, render_prompt, Confidence, Cooccurrence, MetaKnowledge, MetaMode,
    PromptStyle, RankTag, Thresholds,
};
use mktod::pipeline::{build_vocab, infer};
use mktod::retriever::{
    pretrain_retriever, Bm25, DenseRetriever, PretrainConfig, Retriever, RetrieverConfig, Tower,
};
use mktod::text::{tokenize, Vocab};
use mktod::training::{
    contrastive_terms, example_loss, loss_ctr, loss_mml, loss_nll, prepare_example, train,
    BoundModels, TrainConfig,
};

/// Runs `body`, prints the verdict line and re-raises any failure.
fn criterion<F>(n: u32, name: &str, body: F)
where
    F: FnOnce() -> String + UnwindSafe,
{
    let result = panic::catch_unwind(body);
    let line = match &result {
        Ok(detail) => format!("acceptance criterion {n} ({name}): PASS - {detail}\n"),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| e.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            format!("acceptance criterion {n} ({name}): FAIL - {msg}\n")
        }
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(e) = result {
        panic::resume_unwind(e);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn off_kink(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(0.1..1.5);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, values).unwrap()
}

// ---------------------------------------------------------------------------
// Shared micro setup: a 4-entity KB, 3-wide retriever, 3-wide generator.

struct Micro {
    kb: KnowledgeBase,
    vocab: Vocab,
    retriever: DenseRetriever,
    generator: Generator,
    sample: Sample,
}

fn randomize(store: &mut mktod::autodiff::ParameterStore, r: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in store.iter_mut() {
        t.values_mut()
            .iter_mut()
            .for_each(|v| *v = r.gen_range(-scale..scale));
    }
}

fn micro(seed: u64, cosine: bool, copy: bool) -> Micro {
    let e = |id: &str, name: &str, area: &str| {
        Entity::new(
            id,
            vec![("name".into(), name.into()), ("area".into(), area.into())],
            "name",
        )
        .unwrap()
    };
    let kb = KnowledgeBase::new(
        vec![
            e("a", "red lion", "north"),
            e("b", "blue cow", "south"),
            e("c", "green fox", "north"),
            e("d", "gold hen", "east"),
        ],
        "name",
    )
    .unwrap();
    let vocab = Vocab::build(
        ["name red lion blue cow green fox gold hen area north south east ; i want food in the north try"],
        &[],
        1,
    )
    .unwrap();
    let mut r = rng(seed);
    let rc = RetrieverConfig {
        dim: 3,
        cosine,
        ..RetrieverConfig::default()
    };
    let mut retriever = DenseRetriever::new(rc, vocab.len(), seed).unwrap();
    randomize(retriever.store_mut(), &mut r, 1.0);
    let gc = GeneratorConfig {
        hidden: 3,
        copy,
        ..GeneratorConfig::default()
    };
    let mut generator = Generator::new(gc, vocab.len(), seed).unwrap();
    randomize(generator.store_mut(), &mut r, 0.5);
    let sample = Sample {
        dialogue_id: "m".into(),
        context: Context::from_segments(vec!["i want food in the north".into()]).unwrap(),
        response: "try red lion".into(),
        gold_entity_ids: Some(vec!["a".into()]),
        gold_values: BTreeSet::from(["red lion".to_string()]),
        scope: KbScope::Global,
    };
    Micro {
        kb,
        vocab,
        retriever,
        generator,
        sample,
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

type OpFn = fn(&mut Graph, &[Var]) -> mktod::Result<Var>;
type MakeFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn op_table() -> Vec<(&'static str, MakeFn, OpFn)> {
    fn u(r: &mut ChaCha8Rng, s: &[usize]) -> Tensor {
        random_tensor(r, s, -1.5, 1.5)
    }
    vec![
        (
            "matmul",
            |r| vec![u(r, &[3, 4]), u(r, &[4, 2])],
            |g, v| g.matmul(v[0], v[1]),
        ),
        (
            "transpose",
            |r| vec![u(r, &[3, 2])],
            |g, v| Ok(g.transpose(v[0])),
        ),
        (
            "add",
            |r| vec![u(r, &[2, 3]), u(r, &[2, 3])],
            |g, v| g.add(v[0], v[1]),
        ),
        (
            "sub",
            |r| vec![u(r, &[2, 3]), u(r, &[2, 3])],
            |g, v| g.sub(v[0], v[1]),
        ),
        (
            "mul",
            |r| vec![u(r, &[2, 3]), u(r, &[2, 3])],
            |g, v| g.mul(v[0], v[1]),
        ),
        (
            "add_row",
            |r| vec![u(r, &[3, 4]), u(r, &[4])],
            |g, v| g.add_row(v[0], v[1]),
        ),
        (
            "mul_scalar",
            |r| vec![u(r, &[2, 3]), u(r, &[1, 1])],
            |g, v| g.mul_scalar(v[0], v[1]),
        ),
        (
            "scale",
            |r| vec![u(r, &[5])],
            |g, v| Ok(g.scale(v[0], -2.5)),
        ),
        ("neg", |r| vec![u(r, &[4])], |g, v| Ok(g.neg(v[0]))),
        ("tanh", |r| vec![u(r, &[2, 3])], |g, v| Ok(g.tanh(v[0]))),
        (
            "sigmoid",
            |r| vec![u(r, &[2, 3])],
            |g, v| Ok(g.sigmoid(v[0])),
        ),
        (
            "relu",
            |r| vec![off_kink(r, &[2, 3])],
            |g, v| Ok(g.relu(v[0])),
        ),
        ("exp", |r| vec![u(r, &[2, 3])], |g, v| Ok(g.exp(v[0]))),
        (
            "log",
            |r| vec![random_tensor(r, &[2, 3], 0.2, 2.0)],
            |g, v| Ok(g.log(v[0])),
        ),
        ("softmax", |r| vec![u(r, &[3, 4])], |g, v| g.softmax(v[0])),
        (
            "log_softmax",
            |r| vec![u(r, &[3, 4])],
            |g, v| g.log_softmax(v[0]),
        ),
        (
            "logsumexp",
            |r| vec![u(r, &[2, 5])],
            |g, v| g.logsumexp(v[0]),
        ),
        (
            "cross_entropy",
            |r| vec![u(r, &[3, 4])],
            |g, v| g.cross_entropy(v[0], &[2, 0, 3]),
        ),
        ("sum", |r| vec![u(r, &[3, 2])], |g, v| Ok(g.sum(v[0]))),
        ("mean_rows", |r| vec![u(r, &[3, 2])], |g, v| g.mean(v[0], 0)),
        ("mean_cols", |r| vec![u(r, &[3, 2])], |g, v| g.mean(v[0], 1)),
        ("select", |r| vec![u(r, &[2, 3])], |g, v| g.select(v[0], 4)),
        (
            "concat_rows",
            |r| vec![u(r, &[2, 3]), u(r, &[1, 3])],
            |g, v| g.concat(&[v[0], v[1]], 0),
        ),
        (
            "concat_cols",
            |r| vec![u(r, &[2, 3]), u(r, &[2, 1])],
            |g, v| g.concat(&[v[0], v[1], v[0]], 1),
        ),
        (
            "gather",
            |r| vec![u(r, &[4, 3])],
            |g, v| g.gather(v[0], &[3, 0, 3, 1]),
        ),
        (
            "segment_mean",
            |r| vec![u(r, &[5, 3])],
            |g, v| g.segment_mean(v[0], &[0, 2, 0, 2, 2], 3),
        ),
        (
            "scatter_cols",
            |r| vec![u(r, &[1, 4])],
            |g, v| g.scatter_cols(v[0], &[2, 0, 2, 5], 6),
        ),
        (
            "l2_normalize_rows",
            |r| vec![u(r, &[3, 4])],
            |g, v| Ok(g.l2_normalize_rows(v[0])),
        ),
    ]
}

/// Worst relative error of the op at several random points, with a random
/// weighting of the outputs so every element gets its own gradient.
fn op_error(name: &str, make: MakeFn, op: OpFn) -> f64 {
    let mut r = rng(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let inputs = make(&mut r);
        let wseed: u64 = r.gen();
        let report = check_gradients(&inputs, 1e-5, |g, vars| {
            let out = op(g, vars)?;
            let shape = g.value(out).shape().to_vec();
            let w = random_tensor(&mut rng(wseed), &shape, -1.5, 1.5);
            let w = g.constant(w);
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn loss_value(m: &Micro, ex: &mktod::training::Example, cfg: &TrainConfig) -> f64 {
    let mut g = Graph::new();
    let vars = BoundModels {
        context: m.retriever.bind(&mut g, Tower::Context).unwrap(),
        entity: m.retriever.bind(&mut g, Tower::Entity).unwrap(),
        generator: m.generator.bind(&mut g).unwrap(),
    };
    let terms = example_loss(&mut g, &m.retriever, &m.generator, &vars, ex, cfg).unwrap();
    g.item(terms.total)
}

/// Central differences over every retriever (phi) and generator (theta)
/// parameter of the total loss; returns the worst error per side.
fn total_loss_errors(m: &mut Micro, cfg: &TrainConfig) -> (f64, f64, usize) {
    let index = m.retriever.build_index(&m.vocab, &m.kb, 0).unwrap();
    let ex = prepare_example(
        &m.retriever,
        &m.generator,
        &m.vocab,
        &m.kb,
        &m.sample,
        &index,
        cfg,
    )
    .unwrap();

    let mut g = Graph::new();
    let vars = BoundModels {
        context: m.retriever.bind(&mut g, Tower::Context).unwrap(),
        entity: m.retriever.bind(&mut g, Tower::Entity).unwrap(),
        generator: m.generator.bind(&mut g).unwrap(),
    };
    let terms = example_loss(&mut g, &m.retriever, &m.generator, &vars, &ex, cfg).unwrap();
    assert!(terms.nll.is_some() && terms.mml.is_some());
    g.backward(terms.total).unwrap();
    m.retriever.store_mut().zero_grads();
    m.generator.store_mut().zero_grads();
    m.retriever.store_mut().accumulate_grads(&g);
    m.generator.store_mut().accumulate_grads(&g);

    let h = 1e-5;
    let mut checked = 0;
    let mut worst = [0.0f64; 2];
    for side in 0..2 {
        let names: Vec<String> = if side == 0 {
            m.retriever.store().iter().map(|(n, _)| n.clone()).collect()
        } else {
            m.generator.store().iter().map(|(n, _)| n.clone()).collect()
        };
        for name in names {
            let (len, analytic) = {
                let t = if side == 0 {
                    m.retriever.store().get(&name).unwrap()
                } else {
                    m.generator.store().get(&name).unwrap()
                };
                (
                    t.len(),
                    t.grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]),
                )
            };
            for j in 0..len {
                let mut eval_at = |delta: f64| {
                    let store = if side == 0 {
                        m.retriever.store_mut()
                    } else {
                        m.generator.store_mut()
                    };
                    let v = &mut store.get_mut(&name).unwrap().values_mut()[j];
                    let orig = *v;
                    *v = orig + delta;
                    let out = loss_value(m, &ex, cfg);
                    let store = if side == 0 {
                        m.retriever.store_mut()
                    } else {
                        m.generator.store_mut()
                    };
                    store.get_mut(&name).unwrap().values_mut()[j] = orig;
                    out
                };
                let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                worst[side] = worst[side].max(relative_error(analytic[j], numeric, 1e-3));
                checked += 1;
            }
        }
    }
    (worst[0], worst[1], checked)
}

#[test]
fn criterion_1_gradient_integrity() {
    criterion(1, "gradient integrity", || {
        let start = Instant::now();
        let mut worst_op = ("", 0.0f64);
        let table = op_table();
        for (name, make, op) in &table {
            let e = op_error(name, *make, *op);
            assert!(e < 1e-4, "op {name}: relative error {e:e}");
            if e >= worst_op.1 {
                worst_op = (name, e);
            }
        }
        let mut worst_phi: f64 = 0.0;
        let mut worst_theta: f64 = 0.0;
        let mut n = 0;
        for (seed, mode, cosine, copy) in [
            (0, MetaMode::Ctr, false, true),
            (1, MetaMode::Prefix, true, false),
            (2, MetaMode::Prompt, false, true),
        ] {
            let mut m = micro(seed, cosine, copy);
            let cfg = TrainConfig {
                k: 2,
                meta_mode: mode,
                margin: 5.0,
                ..TrainConfig::default()
            };
            let (phi, theta, checked) = total_loss_errors(&mut m, &cfg);
            assert!(phi < 1e-4, "total loss wrt retriever ({mode}): {phi:e}");
            assert!(theta < 1e-4, "total loss wrt generator ({mode}): {theta:e}");
            worst_phi = worst_phi.max(phi);
            worst_theta = worst_theta.max(theta);
            n += checked;
        }
        let secs = start.elapsed().as_secs_f64();
        assert!(secs < 60.0, "gradient suite took {secs:.1}s");
        format!(
            "{} ops (worst {} {:.1e}); total loss over {n} parameters, worst phi {:.1e}, theta {:.1e}; {secs:.1}s",
            table.len(),
            worst_op.0,
            worst_op.1,
            worst_phi,
            worst_theta
        )
    });
}

// ---------------------------------------------------------------------------
// 2. Loss identities

fn mml_of(scores: &[f64], lls: &[f64]) -> f64 {
    let mut g = Graph::new();
    let s = g.leaf(Tensor::vector(scores.to_vec()), true);
    let l: Vec<Var> = lls
        .iter()
        .map(|&v| g.leaf(Tensor::scalar(v), true))
        .collect();
    let out = loss_mml(&mut g, s, &l).unwrap();
    g.item(out)
}

fn ctr_of(lls: &[f64], base: f64, len: usize, margin: f64) -> f64 {
    let mut g = Graph::new();
    let l: Vec<Var> = lls
        .iter()
        .map(|&v| g.leaf(Tensor::scalar(v), true))
        .collect();
    let b = g.leaf(Tensor::scalar(base), true);
    let terms = contrastive_terms(&mut g, &l, b, len).unwrap();
    let out = loss_ctr(&mut g, &terms, margin).unwrap();
    g.item(out)
}

#[test]
fn criterion_2_loss_identities() {
    criterion(2, "loss identities", || {
        // (a) One retrieved entity: the marginal likelihood is that entity's NLL.
        let m = micro(3, false, true);
        let index = m.retriever.build_index(&m.vocab, &m.kb, 0).unwrap();
        let results = m
            .retriever
            .retrieve_topk(&m.vocab, &m.sample.context, &index, &m.kb, 1)
            .unwrap();
        let ents = annotate(
            &results,
            &m.sample.context,
            &m.kb,
            &Thresholds::default(),
            MetaMode::Prefix,
        )
        .unwrap();
        let input = m
            .generator
            .build_input(&m.vocab, &m.sample.context, &ents, &m.kb);
        let target = m.generator.target_ids(&m.vocab, &m.sample.response);
        let mut g = Graph::new();
        let gv = m.generator.bind(&mut g).unwrap();
        let nll = loss_nll(&mut g, &m.generator, &gv, &input, &target).unwrap();
        let nll = g.item(nll);
        let ll = m.generator.log_likelihood(&input, &target).unwrap();
        let mut max_a: f64 = 0.0;
        for s in [-3.0, 0.0, 0.7, 12.5] {
            let mml = mml_of(&[s], &[ll]);
            max_a = max_a.max((mml - nll).abs());
        }
        assert!(max_a <= 1e-12, "K=1 gap {max_a:e}");

        // (b) Bounded by the best and worst single-entity NLL.
        let mut r = rng(2);
        for i in 0..100 {
            let k = r.gen_range(1..=8);
            let scores: Vec<f64> = (0..k).map(|_| r.gen_range(-5.0..5.0)).collect();
            let lls: Vec<f64> = (0..k).map(|_| r.gen_range(-60.0..-0.01)).collect();
            let v = mml_of(&scores, &lls);
            let lo = lls.iter().map(|l| -l).fold(f64::INFINITY, f64::min);
            let hi = lls.iter().map(|l| -l).fold(f64::NEG_INFINITY, f64::max);
            assert!(
                lo - 1e-12 <= v && v <= hi + 1e-12,
                "instance {i}: {v} outside [{lo}, {hi}]"
            );
        }

        // (c) The contrastive loss vanishes exactly when every margin is met.
        let mut met = 0;
        let mut violated = 0;
        for _ in 0..200 {
            let len = r.gen_range(1..20);
            let margin = r.gen_range(0.01..1.0);
            let base = r.gen_range(-40.0..-1.0);
            let n = r.gen_range(1..5);
            let lls: Vec<f64> = (0..n)
                .map(|_| base + r.gen_range(-3.0..3.0) * len as f64)
                .collect();
            let all_met = lls
                .iter()
                .all(|&l| base / len as f64 - l / len as f64 + margin <= 0.0);
            let v = ctr_of(&lls, base, len, margin);
            if all_met {
                assert_eq!(v, 0.0);
                met += 1;
            } else {
                assert!(v > 0.0);
                violated += 1;
            }
        }
        assert!(
            met > 10 && violated > 10,
            "cases met {met} violated {violated}"
        );

        // (d) Shift and permutation invariance.
        let mut max_d: f64 = 0.0;
        for _ in 0..100 {
            let k = r.gen_range(2..=8);
            let scores: Vec<f64> = (0..k).map(|_| r.gen_range(-5.0..5.0)).collect();
            let lls: Vec<f64> = (0..k).map(|_| r.gen_range(-30.0..-0.1)).collect();
            let base = mml_of(&scores, &lls);
            let c = r.gen_range(-50.0..50.0);
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            max_d = max_d.max((mml_of(&shifted, &lls) - base).abs());
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut r);
            let ps: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
            let pl: Vec<f64> = order.iter().map(|&i| lls[i]).collect();
            max_d = max_d.max((mml_of(&ps, &pl) - base).abs());
        }
        assert!(max_d <= 1e-9, "invariance gap {max_d:e}");
        format!("K=1 gap {max_a:.1e}; 100 bounded instances; ctr zero on {met}/{} met cases; invariance gap {max_d:.1e}", met + violated)
    });
}

// ---------------------------------------------------------------------------
// 3. Oracle equivalence

const COLORS: [&str; 12] = [
    "red", "blue", "green", "gold", "grey", "pink", "teal", "plum", "rust", "sand", "navy", "jade",
];
const BEASTS: [&str; 20] = [
    "lion", "cow", "fox", "hen", "owl", "elk", "yak", "eel", "ram", "bat", "cat", "dog", "emu",
    "gnu", "hog", "jay", "koi", "ant", "bee", "cod",
];
const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const FOODS: [&str; 6] = ["thai", "greek", "korean", "french", "indian", "tapas"];

fn big_kb() -> KnowledgeBase {
    let mut r = rng(223);
    let mut names: Vec<String> = COLORS
        .iter()
        .flat_map(|c| BEASTS.iter().map(move |b| format!("{c} {b}")))
        .collect();
    names.shuffle(&mut r);
    let entities = names[..223]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            Entity::new(
                &format!("e{i:03}"),
                vec![
                    ("name".into(), name.clone()),
                    ("area".into(), AREAS[r.gen_range(0..AREAS.len())].into()),
                    ("food".into(), FOODS[r.gen_range(0..FOODS.len())].into()),
                ],
                "name",
            )
            .unwrap()
        })
        .collect();
    KnowledgeBase::new(entities, "name").unwrap()
}

fn random_text(r: &mut ChaCha8Rng, words: usize) -> String {
    let pool: Vec<&str> = COLORS
        .iter()
        .chain(&BEASTS)
        .chain(&AREAS)
        .chain(&FOODS)
        .chain(&["i", "want", "a", "place", "the", "in", "food", "please"])
        .copied()
        .collect();
    (0..words)
        .map(|_| *pool.choose(r).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Values found on token boundaries by plain string search.
fn brute_mentions(kb: &KnowledgeBase, text: &str) -> BTreeSet<String> {
    let padded = format!(" {} ", tokenize(text).join(" "));
    kb.entities()
        .iter()
        .flat_map(|e| e.attributes().iter().map(|(_, v)| v.clone()))
        .filter(|v| padded.contains(&format!(" {v} ")))
        .collect()
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn raw_moment_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn criterion_3_oracle_equivalence() {
    criterion(3, "oracle equivalence", || {
        let kb = big_kb();
        assert_eq!(kb.len(), 223);
        let mut r = rng(50);
        let corpus: Vec<String> = (0..50).map(|_| random_text(&mut r, 12)).collect();
        let mut docs: Vec<String> = kb
            .entities()
            .iter()
            .map(mktod::kb::flatten_entity)
            .collect();
        docs.extend(corpus.iter().cloned());
        let vocab =
            Vocab::build(docs.iter().map(String::as_str), &kb.attribute_names(), 1).unwrap();
        let rc = RetrieverConfig {
            dim: 16,
            ..RetrieverConfig::default()
        };
        let retriever = DenseRetriever::new(rc, vocab.len(), 9).unwrap();
        let index = retriever.build_index(&vocab, &kb, 0).unwrap();
        let entity_vecs: Vec<Vec<f64>> = kb
            .entities()
            .iter()
            .map(|e| retriever.encode_entity(&vocab, e).unwrap())
            .collect();
        let mut compared = 0;
        for text in &corpus {
            let ctx = Context::from_segments(vec![text.clone()]).unwrap();
            let q = retriever.encode_context(&vocab, &ctx).unwrap();
            let scores: Vec<f64> = entity_vecs
                .iter()
                .map(|e| e.iter().zip(&q).map(|(a, b)| a * b).sum())
                .collect();
            let mut full: Vec<usize> = (0..kb.len()).collect();
            full.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            for k in [1, 7, 50, 223] {
                let got = retriever
                    .retrieve_topk(&vocab, &ctx, &index, &kb, k)
                    .unwrap();
                let ids: Vec<usize> = got.iter().map(|x| x.entity_index).collect();
                assert_eq!(ids, full[..k], "top-{k} differs from the full sort");
                let ranks: Vec<usize> = got.iter().map(|x| x.rank).collect();
                assert_eq!(ranks, (1..=k).collect::<Vec<_>>());
                let top = scores[full[0]];
                let z: f64 = full[..k].iter().map(|&i| (scores[i] - top).exp()).sum();
                for x in &got {
                    assert!((x.score - scores[x.entity_index]).abs() < 1e-12);
                    let p = (scores[x.entity_index] - top).exp() / z;
                    assert!((x.prob - p).abs() < 1e-12, "prob {} vs {p}", x.prob);
                }
                compared += 1;
            }
        }

        // Entity F1 against plain string search and hand counting.
        let mut responses = Vec::new();
        let mut golds = Vec::new();
        for _ in 0..80 {
            let words = r.gen_range(3..15);
            responses.push(random_text(&mut r, words));
            let mut gold = BTreeSet::new();
            for _ in 0..r.gen_range(0..4) {
                let e = kb.entity(r.gen_range(0..kb.len()));
                let (_, v) = e.attributes().choose(&mut r).unwrap();
                gold.insert(v.clone());
            }
            golds.push(gold);
        }
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (resp, gold) in responses.iter().zip(&golds) {
            let pred = brute_mentions(&kb, resp);
            assert_eq!(pred, kb.mentioned_values(resp), "mentions in {resp:?}");
            tp += pred.iter().filter(|v| gold.contains(*v)).count();
            fp += pred.iter().filter(|v| !gold.contains(*v)).count();
            fn_ += gold.iter().filter(|v| !pred.contains(*v)).count();
        }
        let score = entity_f1(&responses, &golds, &kb).unwrap();
        assert_eq!(
            (
                score.true_positives,
                score.false_positives,
                score.false_negatives
            ),
            (tp, fp, fn_)
        );
        let p = tp as f64 / (tp + fp) as f64;
        let rc = tp as f64 / (tp + fn_) as f64;
        assert_eq!(score.precision, p);
        assert_eq!(score.recall, rc);
        assert_eq!(score.f1, 2.0 * p * rc / (p + rc));
        let alt = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        assert!((score.f1 - alt).abs() < 1e-12);

        // Recall@K against counting.
        let ids: Vec<String> = kb.entities().iter().map(|e| e.id().to_string()).collect();
        let mut lists = Vec::new();
        let mut gold_ids = Vec::new();
        for _ in 0..60 {
            let mut l = ids.clone();
            l.shuffle(&mut r);
            l.truncate(10);
            lists.push(l);
            gold_ids.push(if r.gen_bool(0.2) {
                None
            } else {
                let n = r.gen_range(1..3);
                let mut g: Vec<String> = ids.choose_multiple(&mut r, n).cloned().collect();
                if r.gen_bool(0.5) {
                    g[0] = lists.last().unwrap()[r.gen_range(0..10)].clone();
                }
                Some(g)
            });
        }
        for k in 1..=10 {
            let labeled = gold_ids.iter().filter(|g| g.is_some()).count();
            let hits = lists
                .iter()
                .zip(&gold_ids)
                .filter(|(l, g)| {
                    g.as_ref()
                        .is_some_and(|g| g.iter().all(|x| l[..k].contains(x)))
                })
                .count();
            assert_eq!(
                recall_at_k(&lists, &gold_ids, k).unwrap(),
                Some(hits as f64 / labeled as f64)
            );
        }

        // Pearson against the textbook formula.
        for n in [3, 5, 10, 40] {
            let x: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| 0.3 * v + r.gen_range(0.0..0.5)).collect();
            let got = pearson(&x, &y).unwrap();
            assert_eq!(got, brute_pearson(&x, &y).clamp(-1.0, 1.0));
            assert!((got - raw_moment_pearson(&x, &y)).abs() < 1e-9);
        }

        // BM25 against values worked out by hand for a three-document corpus.
        let toy: Vec<Vec<String>> = ["the cat sat on the mat", "the dog sat", "cats and dogs"]
            .iter()
            .map(|d| tokenize(d))
            .collect();
        let bm = Bm25::new(&toy, 1.2, 0.75);
        let s = bm.scores("the cat sat cat");
        let expected = [1.771044751773864, 1.047096693003158, 0.0];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-9, "bm25 {a} vs {b}");
        }
        format!("{compared} top-K lists over 223 entities; F1 {tp}/{fp}/{fn_}; Recall@1..10; Pearson; BM25 toy corpus")
    });
}

// ---------------------------------------------------------------------------
// 4. Meta-knowledge rendering

const EXPLANATION_PARAGRAPH: &str = "Each record of knowledge base is accompanied by three tags. The first tag indicates whether this entity appeared before. <new-entity> means this is a new entity, and <old-entity> means this entity appeared before. The second tag indicates the authenticity of the third tag. There are three types <low-confidence>, <mid-confidence> and <high-confidence> indicating low, middle, high retrieval confidence respectively. A higher retrieval confidence means the entity is potentially more related to the user goal. The third tag indicates its importance to the dialogue. <nth-entity> means it is the nth important entity in the knowledge base, for example, <1th-entity> is the top-1 important and <other-entity> means it is not important.";

#[test]
fn criterion_4_meta_knowledge_rendering() {
    criterion(4, "meta-knowledge rendering", || {
        let ranks: [(RankTag, &str, &str, &str); 6] = [
            (
                RankTag::Top(1),
                "<1th-entity>",
                "The top-1 recalled:",
                "this entity is top-1 important.",
            ),
            (
                RankTag::Top(2),
                "<2th-entity>",
                "The top-2 recalled:",
                "this entity is top-2 important.",
            ),
            (
                RankTag::Top(3),
                "<3th-entity>",
                "The top-3 recalled:",
                "this entity is top-3 important.",
            ),
            (
                RankTag::Top(4),
                "<4th-entity>",
                "The top-4 recalled:",
                "this entity is top-4 important.",
            ),
            (
                RankTag::Top(5),
                "<5th-entity>",
                "The top-5 recalled:",
                "this entity is top-5 important.",
            ),
            (
                RankTag::Other,
                "<other-entity>",
                "The negative entity recalled:",
                "this entity is not important.",
            ),
        ];
        let confidences = [
            (
                Confidence::High,
                "<high-confidence>",
                "with high confidence:",
                "It has high possibility that",
            ),
            (
                Confidence::Mid,
                "<mid-confidence>",
                "with middle confidence:",
                "It has medium possibility that",
            ),
            (
                Confidence::Low,
                "<low-confidence>",
                "with low confidence:",
                "It has low possibility that",
            ),
        ];
        let cooccurrences = [
            (
                Cooccurrence::Old,
                "<old-entity>",
                "existed in history:",
                "This entity has appeared before.",
            ),
            (
                Cooccurrence::New,
                "<new-entity>",
                "newly recalled:",
                "This is a new entity.",
            ),
        ];
        let mut n = 0;
        for (rank, rp, rs, rl) in &ranks {
            for (confidence, cp, cs, cl) in &confidences {
                for (cooccurrence, op, os, ol) in &cooccurrences {
                    let m = MetaKnowledge {
                        rank: *rank,
                        confidence: *confidence,
                        cooccurrence: *cooccurrence,
                        is_negative: false,
                    };
                    assert_eq!(render(&m, MetaMode::Prefix), format!("{rp} {cp} {op}"));
                    let small = render_prompt(&m, PromptStyle::SmallModel);
                    let llm = render_prompt(&m, PromptStyle::Llm);
                    for phrase in [rs, cs, os] {
                        assert!(small.contains(phrase), "{small:?} lacks {phrase:?}");
                    }
                    for phrase in [rl, cl, ol] {
                        assert!(llm.contains(phrase), "{llm:?} lacks {phrase:?}");
                    }
                    assert_eq!(render(&m, MetaMode::None), "");
                    n += 1;
                }
            }
        }
        assert_eq!(n, 36);
        assert_eq!(
            render(&MetaKnowledge::negative(), MetaMode::Prefix),
            "<other-entity> <low-confidence> <new-entity>"
        );
        assert_eq!(RankTag::from_rank(6), RankTag::Other);

        let m = micro(4, false, true);
        let index = m.retriever.build_index(&m.vocab, &m.kb, 0).unwrap();
        let results = m
            .retriever
            .retrieve_topk(&m.vocab, &m.sample.context, &index, &m.kb, 3)
            .unwrap();
        let ents = annotate(
            &results,
            &m.sample.context,
            &m.kb,
            &Thresholds::default(),
            MetaMode::Prefix,
        )
        .unwrap();
        let prompt = render_llm_prompt(&m.kb, &m.sample.context, &ents, &[], LlmMode::Prefix);
        assert!(
            prompt.contains(EXPLANATION_PARAGRAPH),
            "explanation paragraph missing"
        );
        "36 prefix strings, negative entity, prompt phrases for both styles, explanation paragraph"
            .to_string()
    });
}

// ---------------------------------------------------------------------------
// 5 and 6. Desk-scale experiments on the reference synthetic task.

struct SeedRun {
    seed: u64,
    warm_recall1: f64,
    joint_recall1: f64,
    usage_prefix: f64,
    usage_none: f64,
    seconds: f64,
}

fn recall1(r: &DenseRetriever, vocab: &Vocab, kb: &KnowledgeBase, va: &[Sample]) -> f64 {
    let index = r.build_index(vocab, kb, 0).unwrap();
    let lists: Vec<Vec<String>> = va
        .iter()
        .map(|s| {
            r.retrieve_topk(vocab, &s.context, &index, kb, 1)
                .unwrap()
                .into_iter()
                .map(|x| x.entity_id)
                .collect()
        })
        .collect();
    let gold: Vec<Option<Vec<String>>> = va.iter().map(|s| s.gold_entity_ids.clone()).collect();
    recall_at_k(&lists, &gold, 1).unwrap().unwrap()
}

fn run_seed(seed: u64) -> SeedRun {
    let start = Instant::now();
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    assert_eq!(
        (spec.n_entities, spec.distractor_rate, spec.n_dialogues),
        (50, 2, 500)
    );
    let (kb, dialogues) = make_synthetic_task(&spec).unwrap();
    let vocab = build_vocab(&kb, &dialogues, 1).unwrap();
    let tr = samples(&dialogues, Split::Train, &kb);
    let va = samples(&dialogues, Split::Valid, &kb);
    let te = samples(&dialogues, Split::Test, &kb);
    let mut warm = DenseRetriever::new(RetrieverConfig::default(), vocab.len(), seed).unwrap();
    let pc = PretrainConfig {
        seed,
        ..PretrainConfig::reference()
    };
    pretrain_retriever(&mut warm, &vocab, &kb, &tr, &pc).unwrap();
    let g0 = Generator::new(GeneratorConfig::default(), vocab.len(), seed).unwrap();
    let warm_recall1 = recall1(&warm, &vocab, &kb, &va);

    let mut usage = BTreeMap::new();
    let mut joint_recall1 = 0.0;
    for mode in [MetaMode::Prefix, MetaMode::None] {
        let cfg = TrainConfig {
            seed,
            meta_mode: mode,
            ..TrainConfig::reference()
        };
        assert!(cfg.use_mml);
        let out = train(warm.clone(), g0.clone(), &vocab, &kb, &tr, &va, &cfg).unwrap();
        if mode == MetaMode::Prefix {
            joint_recall1 = recall1(&out.retriever, &vocab, &kb, &va);
        }
        let zoo = Retriever::dense(out.retriever, &vocab, &kb).unwrap();
        let outputs = infer(&out.generator, &zoo, &vocab, &kb, &te, &cfg.inference()).unwrap();
        let report = evaluate(&outputs, &te, &kb, &[1]).unwrap();
        usage.insert(mode.to_string(), report.gold_name_usage.unwrap());
    }
    SeedRun {
        seed,
        warm_recall1,
        joint_recall1,
        usage_prefix: usage["prefix"],
        usage_none: usage["none"],
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn seed_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| (0..3).map(run_seed).collect())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_5_mml_improves_retrieval() {
    criterion(5, "MML joint training improves Recall@1", || {
        let runs = seed_runs();
        let gain = mean(runs.iter().map(|r| r.joint_recall1 - r.warm_recall1));
        let per_seed: Vec<String> = runs
            .iter()
            .map(|r| {
                format!(
                    "seed {} {:.1}->{:.1} in {:.0}s",
                    r.seed,
                    100.0 * r.warm_recall1,
                    100.0 * r.joint_recall1,
                    r.seconds
                )
            })
            .collect();
        for r in runs {
            assert!(r.seconds < 600.0, "seed {} took {:.0}s", r.seed, r.seconds);
        }
        assert!(
            gain >= 0.05,
            "mean Recall@1 gain {:.2} points ({})",
            100.0 * gain,
            per_seed.join("; ")
        );
        format!(
            "mean gain {:.1} points ({})",
            100.0 * gain,
            per_seed.join("; ")
        )
    });
}

#[test]
fn criterion_6_meta_knowledge_improves_usage() {
    criterion(6, "meta knowledge improves gold-entity usage", || {
        let runs = seed_runs();
        let gap = mean(runs.iter().map(|r| r.usage_prefix - r.usage_none));
        let per_seed: Vec<String> = runs
            .iter()
            .map(|r| {
                format!(
                    "seed {} prefix {:.1} none {:.1}",
                    r.seed,
                    100.0 * r.usage_prefix,
                    100.0 * r.usage_none
                )
            })
            .collect();
        assert!(
            gap >= 0.05,
            "mean usage gap {:.2} points ({})",
            100.0 * gap,
            per_seed.join("; ")
        );
        format!(
            "mean gap {:.1} points ({})",
            100.0 * gap,
            per_seed.join("; ")
        )
    });
}

// ---------------------------------------------------------------------------
// 7 and 8. The command-line pipeline.

fn mktod(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_mktod"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "mktod {args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const METRIC_FILES: [&str; 9] = [
    "runs/warm/pretrain_log.csv",
    "runs/prefix/train_log.csv",
    "runs/prefix/train_summary.json",
    "runs/none/train_log.csv",
    "runs/none/train_summary.json",
    "runs/eval/metrics.json",
    "runs/analyze/alignment.csv",
    "runs/analyze/behavior.csv",
    "runs/analyze/analysis.json",
];

/// synth, pretrain, two trainings, eval and analyze in a fresh directory.
fn pipeline() -> (tempfile::TempDir, f64) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = ["--preset", "reference", "--seed", "0"];
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(common);
        mktod(d, &all);
    };
    run(&["synth"]);
    run(&["pretrain"]);
    run(&["train", "--meta", "prefix", "--out", "runs/prefix"]);
    run(&["train", "--meta", "none", "--out", "runs/none"]);
    run(&["eval", "--checkpoint", "runs/prefix", "--out", "runs/eval"]);
    run(&[
        "analyze",
        "--zoo",
        "bm25,frequency,pretrained-dense,jointly-trained-dense,oracle",
        "--checkpoints",
        "with_meta=runs/prefix,without_meta=runs/none",
        "--k",
        "7",
        "--out",
        "runs/analyze",
    ]);
    (dir, start.elapsed().as_secs_f64())
}

fn first_pipeline() -> &'static (tempfile::TempDir, f64) {
    static RUN: OnceLock<(tempfile::TempDir, f64)> = OnceLock::new();
    RUN.get_or_init(pipeline)
}

#[test]
fn criterion_7_misalignment_report() {
    criterion(7, "misalignment report", || {
        let (dir, secs) = first_pipeline();
        let d = dir.path();
        let csv = std::fs::read_to_string(d.join("runs/analyze/alignment.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("generator,retriever,recall_at_k,entity_f1,bleu")
        );
        let mut rows: BTreeMap<String, Vec<(String, f64, f64, f64)>> = BTreeMap::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f.len(), 5, "row {line:?}");
            let num = |s: &str| {
                let v: f64 = s.parse().unwrap();
                assert!(
                    v.is_finite() && (0.0..=1.0).contains(&v),
                    "value {s} in {line:?}"
                );
                v
            };
            rows.entry(f[0].to_string()).or_default().push((
                f[1].to_string(),
                num(f[2]),
                num(f[3]),
                num(f[4]),
            ));
        }
        let zoo = [
            "bm25",
            "frequency",
            "pretrained-dense",
            "jointly-trained-dense",
            "oracle",
        ];
        assert_eq!(
            rows.keys().collect::<Vec<_>>(),
            ["with_meta", "without_meta"]
        );
        for (gen, rs) in &rows {
            let names: Vec<&str> = rs.iter().map(|r| r.0.as_str()).collect();
            assert_eq!(names, zoo, "{gen}");
            let oracle = rs.iter().find(|r| r.0 == "oracle").unwrap();
            assert_eq!(oracle.1, 1.0, "{gen} oracle Recall@K");
        }
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(d.join("runs/analyze/analysis.json")).unwrap(),
        )
        .unwrap();
        let mut ps = Vec::new();
        for gen in ["with_meta", "without_meta"] {
            let p = summary["pearson"][gen].as_f64();
            assert!(
                p.is_some_and(f64::is_finite),
                "pearson for {gen}: {}",
                summary["pearson"][gen]
            );
            ps.push(format!("{gen} {:.3}", p.unwrap()));
        }
        for f in METRIC_FILES {
            assert!(d.join(f).exists(), "{f} missing");
        }
        assert!(*secs < 900.0, "pipeline took {secs:.0}s");
        format!(
            "2 generators x 5 retrievers, oracle Recall@7 = 100%, pearson {}; pipeline {secs:.0}s",
            ps.join(", ")
        )
    });
}

#[test]
fn criterion_8_determinism() {
    criterion(8, "bitwise determinism", || {
        let (a, _) = first_pipeline();
        let (b, _) = pipeline();
        let mut files: Vec<PathBuf> = METRIC_FILES.iter().map(PathBuf::from).collect();
        for dir in ["runs/warm", "runs/prefix", "runs/none"] {
            for f in ["retriever.bin", "generator.bin"] {
                files.push(Path::new(dir).join(f));
            }
        }
        files.push("data/kb.json".into());
        files.push("data/dialogues.jsonl".into());
        for f in &files {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert!(x == y, "{} differs between identical runs", f.display());
        }
        format!("{} output files identical across two runs", files.len())
    });
}
