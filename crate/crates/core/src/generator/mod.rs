//! Attention encoder-decoder that scores and generates system responses
//! given a context and a list of annotated entities.

mod llm;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterStore, Tensor, Var};
use crate::dialogue::Context;
use crate::error::{Error, Result};
use crate::kb::{flatten_entity, KnowledgeBase};
use crate::metaknow::AnnotatedEntity;
use crate::text::{truncate, Keep, Vocab, BOS, EOS, SEP};

pub use llm::{render_llm_prompt, Demonstration, LlmMode, PREFIX_EXPLANATION, PROMPT_EXPLANATION};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub hidden: usize,
    /// Mix a copy distribution over input tokens into every output step.
    pub copy: bool,
    pub max_context_len: usize,
    pub max_entity_len: usize,
    pub max_output_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            hidden: 64,
            copy: true,
            max_context_len: 200,
            max_entity_len: 100,
            max_output_len: 64,
        }
    }
}

/// Token ids of a generator input with one segment id per token: segment
/// 0 is the context (and separator), segment `i` the `i`-th entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenInput {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub n_segments: usize,
}

/// Generator parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct GenVars {
    pub emb: Var,
    pub emb_t: Var,
    pub enc_tok: Var,
    pub enc_seg: Var,
    pub enc_b: Var,
    pub init_w: Var,
    pub init_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
    pub att_q: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub vocab_bias: Var,
    pub copy_w: Var,
    pub copy_b: Var,
}

/// Graph values of one decoding step.
struct StepOut {
    log_gen: Var,
    attention: Var,
    gate: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    vocab_size: usize,
    store: ParameterStore,
}

fn shapes(h: usize, v: usize) -> Vec<(&'static str, Vec<usize>, usize)> {
    vec![
        ("tok.emb", vec![v, h], h),
        ("enc.tok", vec![h, h], h),
        ("enc.seg", vec![h, h], h),
        ("enc.b", vec![h], 0),
        ("init.w", vec![h, h], h),
        ("init.b", vec![h], 0),
        ("dec.w", vec![3 * h, h], 3 * h),
        ("dec.b", vec![h], 0),
        ("att.q", vec![h, h], h),
        ("out.w", vec![2 * h, h], 2 * h),
        ("out.b", vec![h], 0),
        ("out.vocab_bias", vec![v], 0),
        ("copy.w", vec![2 * h, 1], 2 * h),
        ("copy.b", vec![1], 0),
    ]
}

impl Generator {
    pub fn new(config: GeneratorConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut store = ParameterStore::new(seed);
        for (name, shape, fan_in) in shapes(config.hidden, vocab_size) {
            if fan_in == 0 {
                store.init_zeros(name, &shape)?;
            } else {
                store.init_uniform(name, &shape, fan_in)?;
            }
        }
        Ok(Generator {
            config,
            vocab_size,
            store,
        })
    }

    pub fn from_store(config: GeneratorConfig, store: ParameterStore) -> Result<Self> {
        let vocab_size = store.get("tok.emb")?.rows();
        for (name, shape, _) in shapes(config.hidden, vocab_size) {
            let t = store.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "generator parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Generator {
            config,
            vocab_size,
            store,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn bind(&self, g: &mut Graph) -> Result<GenVars> {
        let s = &self.store;
        let emb = s.bind(g, "tok.emb")?;
        let emb_t = g.transpose(emb);
        Ok(GenVars {
            emb,
            emb_t,
            enc_tok: s.bind(g, "enc.tok")?,
            enc_seg: s.bind(g, "enc.seg")?,
            enc_b: s.bind(g, "enc.b")?,
            init_w: s.bind(g, "init.w")?,
            init_b: s.bind(g, "init.b")?,
            dec_w: s.bind(g, "dec.w")?,
            dec_b: s.bind(g, "dec.b")?,
            att_q: s.bind(g, "att.q")?,
            out_w: s.bind(g, "out.w")?,
            out_b: s.bind(g, "out.b")?,
            vocab_bias: s.bind(g, "out.vocab_bias")?,
            copy_w: s.bind(g, "copy.w")?,
            copy_b: s.bind(g, "copy.b")?,
        })
    }

    /// Context (most recent tokens kept) and separator, followed by each
    /// entity's rendering and flattened attributes.
    pub fn build_input(
        &self,
        vocab: &Vocab,
        context: &Context,
        entities: &[AnnotatedEntity],
        kb: &KnowledgeBase,
    ) -> GenInput {
        let mut ids: Vec<usize> = vocab
            .encode_truncated(&context.text(), self.config.max_context_len, Keep::Suffix)
            .into_iter()
            .map(|t| t as usize)
            .collect();
        ids.push(SEP as usize);
        let mut segments = vec![0; ids.len()];
        for (i, a) in entities.iter().enumerate() {
            let text = format!(
                "{} {}",
                a.rendering,
                flatten_entity(kb.entity(a.entity_index))
            );
            let toks = vocab.encode_truncated(&text, self.config.max_entity_len, Keep::Prefix);
            segments.extend(std::iter::repeat_n(i + 1, toks.len()));
            ids.extend(toks.into_iter().map(|t| t as usize));
        }
        GenInput {
            ids,
            segments,
            n_segments: entities.len() + 1,
        }
    }

    /// Response ids capped at the output length and terminated by EOS.
    pub fn target_ids(&self, vocab: &Vocab, response: &str) -> Vec<usize> {
        let max = self.config.max_output_len.max(1);
        let mut ids: Vec<usize> = truncate(&vocab.encode(response), max - 1, Keep::Prefix)
            .into_iter()
            .map(|t| t as usize)
            .collect();
        ids.push(EOS as usize);
        ids
    }

    fn encode(&self, g: &mut Graph, p: &GenVars, input: &GenInput) -> Result<(Var, Var, Var)> {
        if input.ids.is_empty() {
            return Err(Error::Contract("generator input is empty".into()));
        }
        let x = g.gather(p.emb, &input.ids)?;
        let seg = g.segment_mean(x, &input.segments, input.n_segments)?;
        let seg_rows = g.gather(seg, &input.segments)?;
        let a = g.matmul(x, p.enc_tok)?;
        let b = g.matmul(seg_rows, p.enc_seg)?;
        let s = g.add(a, b)?;
        let s = g.add_row(s, p.enc_b)?;
        let enc = g.tanh(s);
        let enc_t = g.transpose(enc);
        let ctx_summary = g.gather(seg, &[0])?;
        let h0 = g.matmul(ctx_summary, p.init_w)?;
        let h0 = g.add_row(h0, p.init_b)?;
        let h0 = g.tanh(h0);
        Ok((enc, enc_t, h0))
    }

    fn step(
        &self,
        g: &mut Graph,
        p: &GenVars,
        enc: Var,
        enc_t: Var,
        prev_token: usize,
        prev_ctx: Var,
        prev_h: Var,
    ) -> Result<(StepOut, Var, Var)> {
        let e = g.gather(p.emb, &[prev_token])?;
        let inp = g.concat(&[e, prev_ctx, prev_h], 1)?;
        let h = g.matmul(inp, p.dec_w)?;
        let h = g.add_row(h, p.dec_b)?;
        let h = g.tanh(h);
        let q = g.matmul(h, p.att_q)?;
        let scores = g.matmul(q, enc_t)?;
        let attention = g.softmax(scores)?;
        let c = g.matmul(attention, enc)?;
        let hc = g.concat(&[h, c], 1)?;
        let o = g.matmul(hc, p.out_w)?;
        let o = g.add_row(o, p.out_b)?;
        let o = g.tanh(o);
        let logits = g.matmul(o, p.emb_t)?;
        let logits = g.add_row(logits, p.vocab_bias)?;
        let log_gen = g.log_softmax(logits)?;
        let z = g.matmul(hc, p.copy_w)?;
        let z = g.add_row(z, p.copy_b)?;
        let gate = g.select(z, 0)?;
        Ok((
            StepOut {
                log_gen,
                attention,
                gate,
            },
            c,
            h,
        ))
    }

    /// Log-probability of `token` at one step.
    fn token_log_prob(
        &self,
        g: &mut Graph,
        input: &GenInput,
        out: &StepOut,
        token: usize,
    ) -> Result<Var> {
        let gen = g.select(out.log_gen, token)?;
        if !self.config.copy {
            return Ok(gen);
        }
        let neg_z = g.neg(out.gate);
        let keep = g.sigmoid(neg_z);
        if !input.ids.contains(&token) {
            let log_keep = g.log(keep);
            return g.add(log_keep, gen);
        }
        let use_copy = g.sigmoid(out.gate);
        let copied = g.scatter_cols(out.attention, &input.ids, self.vocab_size)?;
        let copied = g.select(copied, token)?;
        let gen_p = g.exp(gen);
        let a = g.mul(keep, gen_p)?;
        let b = g.mul(use_copy, copied)?;
        let p_tok = g.add(a, b)?;
        Ok(g.log(p_tok))
    }

    /// Teacher-forced `sum_j log p(r_j | r_<j, input)` as a graph scalar.
    pub fn log_likelihood_graph(
        &self,
        g: &mut Graph,
        p: &GenVars,
        input: &GenInput,
        target: &[usize],
    ) -> Result<Var> {
        if target.last() != Some(&(EOS as usize)) {
            return Err(Error::Contract(
                "the response must be non-empty and end with EOS".into(),
            ));
        }
        let (enc, enc_t, mut h) = self.encode(g, p, input)?;
        let mut ctx = g.constant(Tensor::zeros(&[1, self.config.hidden]));
        let mut prev = BOS as usize;
        let mut terms = Vec::with_capacity(target.len());
        for &tok in target {
            let (out, c, h_new) = self.step(g, p, enc, enc_t, prev, ctx, h)?;
            terms.push(self.token_log_prob(g, input, &out, tok)?);
            ctx = c;
            h = h_new;
            prev = tok;
        }
        let stacked = g.concat(&terms, 1)?;
        Ok(g.sum(stacked))
    }

    /// Gradient-free log-likelihood.
    pub fn log_likelihood(&self, input: &GenInput, target: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let ll = self.log_likelihood_graph(&mut g, &p, input, target)?;
        Ok(g.item(ll))
    }

    fn mixture(&self, g: &Graph, input: &GenInput, out: &StepOut) -> Vec<f64> {
        let mut dist: Vec<f64> = g
            .value(out.log_gen)
            .values()
            .iter()
            .map(|l| l.exp())
            .collect();
        if self.config.copy {
            let z = g.item(out.gate);
            let w = 1.0 / (1.0 + (-z).exp());
            dist.iter_mut().for_each(|p| *p *= 1.0 - w);
            for (a, &id) in g.value(out.attention).values().iter().zip(&input.ids) {
                dist[id] += w * a;
            }
        }
        dist
    }

    /// Output distributions under teacher forcing, one per target token.
    pub fn step_distributions(&self, input: &GenInput, target: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let (enc, enc_t, mut h) = self.encode(&mut g, &p, input)?;
        let mut ctx = g.constant(Tensor::zeros(&[1, self.config.hidden]));
        let mut prev = BOS as usize;
        let mut out = Vec::with_capacity(target.len());
        for &tok in target {
            let (step, c, h_new) = self.step(&mut g, &p, enc, enc_t, prev, ctx, h)?;
            out.push(self.mixture(&g, input, &step));
            ctx = c;
            h = h_new;
            prev = tok;
        }
        Ok(out)
    }

    /// Greedy decoding; stops after EOS or `max_len` tokens. The EOS token,
    /// when produced, is part of the output.
    pub fn generate(&self, input: &GenInput, max_len: usize) -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let (enc, enc_t, mut h) = self.encode(&mut g, &p, input)?;
        let mut ctx = g.constant(Tensor::zeros(&[1, self.config.hidden]));
        let mut prev = BOS as usize;
        let mut out = Vec::new();
        while out.len() < max_len {
            let mark = g.len();
            let (step, c, h_new) = self.step(&mut g, &p, enc, enc_t, prev, ctx, h)?;
            let dist = self.mixture(&g, input, &step);
            let mut best = 0;
            for (i, &v) in dist.iter().enumerate() {
                if v > dist[best] {
                    best = i;
                }
            }
            // Keep only the recurrent state of this step.
            let c_val = g.value(c).clone();
            let h_val = g.value(h_new).clone();
            g.truncate(mark);
            ctx = g.constant(c_val);
            h = g.constant(h_val);
            out.push(best as u32);
            prev = best;
            if best == EOS as usize {
                break;
            }
        }
        Ok(out)
    }

    /// Convenience wrapper: generate and decode a response text.
    pub fn respond(
        &self,
        vocab: &Vocab,
        context: &Context,
        entities: &[AnnotatedEntity],
        kb: &KnowledgeBase,
    ) -> Result<String> {
        let input = self.build_input(vocab, context, entities, kb);
        let ids = self.generate(&input, self.config.max_output_len)?;
        Ok(vocab.decode(&ids))
    }
}
