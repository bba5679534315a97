//! Shared-component sequence models: MR encoder E_x and text encoder E_y
//! (bidirectional GRU stacks to a latent vector), text decoder D_y
//! (autoregressive GRU), and MR decoder D_x (per-slot classifier heads).
//! NLG = D_y after E_x, NLU = D_x after E_y, and the two autoencoders reuse
//! the same four components, so every direction trains the same parameters.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, BOS, EOS};
use crate::kernel::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use crate::kernel::optim::{GradMap, ParamStore};
use crate::kernel::tape::{gru_cell, log_softmax, GruParams, Tape, Var};
use crate::kernel::tensor::Tensor;
use crate::kernel::KernelError;
use crate::mr::{linearize, MeaningRepresentation, Schema, SlotName, SlotValue};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 200,
            hidden_dim: 200,
            latent_dim: 128,
            encoder_layers: 2,
            max_decode_len: 60,
        }
    }
}

/// One D_x classifier head. Classes are the sorted known values, then a
/// reserved unknown-value class, then absent.
#[derive(Debug, Clone)]
pub struct SlotHead {
    pub name: SlotName,
    pub values: Vec<SlotValue>,
}

impl SlotHead {
    pub fn class_count(&self) -> usize {
        self.values.len() + 2
    }

    pub fn unk_class(&self) -> usize {
        self.values.len()
    }

    pub fn absent_class(&self) -> usize {
        self.values.len() + 1
    }

    /// The class this MR assigns to the slot.
    pub fn target_class(&self, mr: &MeaningRepresentation) -> usize {
        match mr.value_of(&self.name) {
            None => self.absent_class(),
            Some(v) => self
                .values
                .iter()
                .position(|known| known == v)
                .unwrap_or_else(|| self.unk_class()),
        }
    }
}

/// A token sequence with its log-probability breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub tokens: Vec<String>,
    pub total_logprob: f64,
    pub per_token: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
    Sample { top_k: usize, seed: u64 },
}

/// Binds ParamStore entries onto a tape once each and collects their
/// gradients by name after backward.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var, KernelError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let v = self.tape.input(self.store.get(name)?);
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    fn zeros(&mut self, n: usize) -> Var {
        self.tape.input(&Tensor::zeros(vec![n]))
    }

    pub fn grads(&self) -> GradMap {
        self.bound
            .iter()
            .map(|(n, v)| (n.clone(), self.tape.grad(*v).to_vec()))
            .collect()
    }
}

const GRU_SUFFIXES: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"];

fn gru_shapes(in_dim: usize, hidden: usize) -> [Vec<usize>; 9] {
    [
        vec![hidden, in_dim],
        vec![hidden, hidden],
        vec![hidden],
        vec![hidden, in_dim],
        vec![hidden, hidden],
        vec![hidden],
        vec![hidden, in_dim],
        vec![hidden, hidden],
        vec![hidden],
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSet {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub schema: Schema,
    pub params: ParamStore,
}

impl ModelSet {
    /// Every parameter name with its shape, in registration order.
    fn param_layout(config: &ModelConfig, vocab_len: usize, schema: &Schema) -> Vec<(String, Vec<usize>)> {
        let (e, h, lat) = (config.embed_dim, config.hidden_dim, config.latent_dim);
        let mut layout = vec![("emb".to_owned(), vec![vocab_len, e])];
        for enc in ["ex", "ey"] {
            for l in 0..config.encoder_layers {
                let in_dim = if l == 0 { e } else { 2 * h };
                for dir in ["f", "b"] {
                    for (suffix, shape) in GRU_SUFFIXES.iter().zip(gru_shapes(in_dim, h)) {
                        layout.push((format!("{}.l{}.{}.{}", enc, l, dir, suffix), shape));
                    }
                }
            }
            layout.push((format!("{}.lat.w", enc), vec![lat, 2 * h]));
            layout.push((format!("{}.lat.b", enc), vec![lat]));
        }
        layout.push(("dy.h0.w".to_owned(), vec![h, lat]));
        layout.push(("dy.h0.b".to_owned(), vec![h]));
        for (suffix, shape) in GRU_SUFFIXES.iter().zip(gru_shapes(e + lat, h)) {
            layout.push((format!("dy.cell.{}", suffix), shape));
        }
        layout.push(("dy.out.w".to_owned(), vec![vocab_len, h]));
        layout.push(("dy.out.b".to_owned(), vec![vocab_len]));
        for (name, spec) in &schema.slots {
            let classes = spec.values.len() + 2;
            layout.push((format!("dx.{}.w", name.as_str()), vec![classes, lat]));
            layout.push((format!("dx.{}.b", name.as_str()), vec![classes]));
        }
        layout
    }

    fn build(
        config: ModelConfig,
        vocab: Vocabulary,
        schema: Schema,
        mut init: impl FnMut(&[usize]) -> Vec<f64>,
    ) -> Self {
        let mut params = ParamStore::new();
        for (name, shape) in Self::param_layout(&config, vocab.len(), &schema) {
            let data = init(&shape);
            params
                .insert(&name, Tensor::new(shape, data).expect("layout-consistent init"))
                .expect("layout names are unique");
        }
        ModelSet {
            config,
            vocab,
            schema,
            params,
        }
    }

    /// Uniform init scaled by fan-in for matrices, zero biases.
    pub fn new(config: ModelConfig, vocab: Vocabulary, schema: Schema, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, vocab, schema, |shape| {
            let len: usize = shape.iter().product();
            if shape.len() == 1 {
                vec![0.0; len]
            } else {
                let r = 1.0 / (shape[shape.len() - 1] as f64).sqrt();
                (0..len).map(|_| rng.random_range(-r..r)).collect()
            }
        })
    }

    /// All-zero parameters, for analytic uniform-distribution checks.
    pub fn zero_init(config: ModelConfig, vocab: Vocabulary, schema: Schema) -> Self {
        Self::build(config, vocab, schema, |shape| {
            vec![0.0; shape.iter().product()]
        })
    }

    /// D_x heads in schema order.
    pub fn heads(&self) -> Vec<SlotHead> {
        self.schema
            .slots
            .iter()
            .map(|(name, spec)| SlotHead {
                name: name.clone(),
                values: spec.values.iter().cloned().collect(),
            })
            .collect()
    }

    fn bind_gru(&self, g: &mut Graph, prefix: &str) -> Result<GruParams, KernelError> {
        let mut vars = [None; 9];
        for (slot, suffix) in vars.iter_mut().zip(GRU_SUFFIXES) {
            *slot = Some(g.param(&format!("{}.{}", prefix, suffix))?);
        }
        let v = |i: usize| vars[i].expect("just bound");
        Ok(GruParams {
            wz: v(0),
            uz: v(1),
            bz: v(2),
            wr: v(3),
            ur: v(4),
            br: v(5),
            wh: v(6),
            uh: v(7),
            bh: v(8),
        })
    }

    /// Bidirectional multi-layer encoding to a latent vector. An empty
    /// sequence encodes from the zero initial states.
    fn encode_ids(&self, g: &mut Graph, ids: &[usize], enc: &str) -> Result<Var, KernelError> {
        let emb = g.param("emb")?;
        let h = self.config.hidden_dim;
        let mut layer_in: Vec<Var> = Vec::with_capacity(ids.len());
        for &id in ids {
            layer_in.push(g.tape.embed(emb, id)?);
        }
        let mut final_f = g.zeros(h);
        let mut final_b = g.zeros(h);
        for l in 0..self.config.encoder_layers {
            let pf = self.bind_gru(g, &format!("{}.l{}.f", enc, l))?;
            let pb = self.bind_gru(g, &format!("{}.l{}.b", enc, l))?;
            let n = layer_in.len();
            let mut hf = g.zeros(h);
            let mut outs_f = Vec::with_capacity(n);
            for &x in &layer_in {
                hf = gru_cell(&mut g.tape, x, hf, &pf)?;
                outs_f.push(hf);
            }
            let mut hb = g.zeros(h);
            let mut outs_b = vec![hb; n];
            for i in (0..n).rev() {
                hb = gru_cell(&mut g.tape, layer_in[i], hb, &pb)?;
                outs_b[i] = hb;
            }
            final_f = hf;
            final_b = hb;
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                next.push(g.tape.concat(outs_f[i], outs_b[i])?);
            }
            layer_in = next;
        }
        let cat = g.tape.concat(final_f, final_b)?;
        let w = g.param(&format!("{}.lat.w", enc))?;
        let b = g.param(&format!("{}.lat.b", enc))?;
        let wx = g.tape.matmul(w, cat)?;
        let pre = g.tape.add(wx, b)?;
        Ok(g.tape.tanh(pre))
    }

    pub fn encode_mr_g(&self, g: &mut Graph, mr: &MeaningRepresentation) -> Result<Var, KernelError> {
        let ids = self.vocab.encode(&linearize(mr));
        self.encode_ids(g, &ids, "ex")
    }

    pub fn encode_text_g(&self, g: &mut Graph, text: &[String]) -> Result<Var, KernelError> {
        let ids = self.vocab.encode(text);
        self.encode_ids(g, &ids, "ey")
    }

    /// Teacher-forced decoder NLL over `targets` (which should end in EOS).
    /// Returns the summed loss and the per-target loss variables.
    pub fn decode_nll_g(
        &self,
        g: &mut Graph,
        latent: Var,
        targets: &[usize],
    ) -> Result<(Var, Vec<Var>), KernelError> {
        let emb = g.param("emb")?;
        let cell = self.bind_gru(g, "dy.cell")?;
        let w0 = g.param("dy.h0.w")?;
        let b0 = g.param("dy.h0.b")?;
        let wo = g.param("dy.out.w")?;
        let bo = g.param("dy.out.b")?;
        let mut h = {
            let wx = g.tape.matmul(w0, latent)?;
            let pre = g.tape.add(wx, b0)?;
            g.tape.tanh(pre)
        };
        let mut prev = BOS;
        let mut losses = Vec::with_capacity(targets.len());
        for &t in targets {
            let e = g.tape.embed(emb, prev)?;
            let x = g.tape.concat(e, latent)?;
            h = gru_cell(&mut g.tape, x, h, &cell)?;
            let wx = g.tape.matmul(wo, h)?;
            let logits = g.tape.add(wx, bo)?;
            losses.push(g.tape.softmax_ce(logits, t)?);
            prev = t;
        }
        let total = g.tape.add_many(&losses)?;
        Ok((total, losses))
    }

    /// Summed per-slot classification NLL of `mr` against the latent.
    pub fn heads_nll_g(
        &self,
        g: &mut Graph,
        latent: Var,
        mr: &MeaningRepresentation,
    ) -> Result<Var, KernelError> {
        let heads = self.heads();
        let mut losses = Vec::with_capacity(heads.len());
        for head in &heads {
            let w = g.param(&format!("dx.{}.w", head.name.as_str()))?;
            let b = g.param(&format!("dx.{}.b", head.name.as_str()))?;
            let wx = g.tape.matmul(w, latent)?;
            let logits = g.tape.add(wx, b)?;
            losses.push(g.tape.softmax_ce(logits, head.target_class(mr))?);
        }
        if losses.is_empty() {
            return Ok(g.zeros(1));
        }
        g.tape.add_many(&losses)
    }

    fn text_targets(&self, text: &[String]) -> Vec<usize> {
        let mut ids = self.vocab.encode(text);
        ids.push(EOS);
        ids
    }

    /// Teacher-forced log p(text | mr), per token including EOS.
    pub fn nlg_logprob(
        &self,
        mr: &MeaningRepresentation,
        text: &[String],
    ) -> Result<ScoredSequence, KernelError> {
        let mut g = Graph::new(&self.params);
        let latent = self.encode_mr_g(&mut g, mr)?;
        let targets = self.text_targets(text);
        let (total, per) = self.decode_nll_g(&mut g, latent, &targets)?;
        Ok(ScoredSequence {
            tokens: text.to_vec(),
            total_logprob: -g.tape.value(total)[0],
            per_token: per.iter().map(|v| -g.tape.value(*v)[0]).collect(),
        })
    }

    /// Factorized log p(mr | text) over the schema heads.
    pub fn nlu_logprob(
        &self,
        text: &[String],
        mr: &MeaningRepresentation,
    ) -> Result<f64, KernelError> {
        let mut g = Graph::new(&self.params);
        let latent = self.encode_text_g(&mut g, text)?;
        let nll = self.heads_nll_g(&mut g, latent, mr)?;
        Ok(-g.tape.value(nll)[0])
    }

    /// Reconstruction log-likelihood of the text through the latent.
    pub fn auto_text_logprob(&self, text: &[String]) -> Result<f64, KernelError> {
        let mut g = Graph::new(&self.params);
        let latent = self.encode_text_g(&mut g, text)?;
        let targets = self.text_targets(text);
        let (total, _) = self.decode_nll_g(&mut g, latent, &targets)?;
        Ok(-g.tape.value(total)[0])
    }

    /// Reconstruction log-likelihood of the MR through the latent.
    pub fn auto_mr_logprob(&self, mr: &MeaningRepresentation) -> Result<f64, KernelError> {
        let mut g = Graph::new(&self.params);
        let latent = self.encode_mr_g(&mut g, mr)?;
        let nll = self.heads_nll_g(&mut g, latent, mr)?;
        Ok(-g.tape.value(nll)[0])
    }

    fn head_logits(&self, text: &[String]) -> Result<Vec<(SlotHead, Vec<f64>)>, KernelError> {
        let mut g = Graph::new(&self.params);
        let latent = self.encode_text_g(&mut g, text)?;
        let mut out = Vec::new();
        for head in self.heads() {
            let w = g.param(&format!("dx.{}.w", head.name.as_str()))?;
            let b = g.param(&format!("dx.{}.b", head.name.as_str()))?;
            let wx = g.tape.matmul(w, latent)?;
            let logits = g.tape.add(wx, b)?;
            let values = g.tape.value(logits).to_vec();
            out.push((head, values));
        }
        Ok(out)
    }

    /// Per-slot argmax MR; unknown-value and absent classes omit the slot.
    /// Ties break toward the lowest class index.
    pub fn nlu_predict(&self, text: &[String]) -> Result<MeaningRepresentation, KernelError> {
        let mut pairs = Vec::new();
        for (head, logits) in self.head_logits(text)? {
            let cls = argmax_lowest(&logits);
            if cls < head.values.len() {
                pairs.push((head.name.clone(), head.values[cls].clone()));
            }
        }
        Ok(MeaningRepresentation::from_pairs(pairs))
    }

    fn latent_value(&self, mr: &MeaningRepresentation) -> Result<Vec<f64>, KernelError> {
        let mut g = Graph::new(&self.params);
        let latent = self.encode_mr_g(&mut g, mr)?;
        Ok(g.tape.value(latent).to_vec())
    }

    /// Decode text from an MR. Greedy and beam are deterministic; sampling
    /// is deterministic per seed. Always terminates by max_decode_len.
    pub fn nlg_generate(
        &self,
        mr: &MeaningRepresentation,
        mode: DecodeMode,
    ) -> Result<ScoredSequence, KernelError> {
        let latent = self.latent_value(mr)?;
        let dec = self.raw_decoder()?;
        match mode {
            DecodeMode::Greedy => self.decode_greedy(&dec, &latent),
            DecodeMode::Beam(k) => {
                let beam = self.decode_beam(&dec, &latent, k.max(1))?;
                let greedy = self.decode_greedy(&dec, &latent)?;
                // beam search prunes, so guarantee it never loses to greedy
                if greedy.total_logprob > beam.total_logprob {
                    Ok(greedy)
                } else {
                    Ok(beam)
                }
            }
            DecodeMode::Sample { top_k, seed } => self.decode_sample(&dec, &latent, top_k.max(1), seed),
        }
    }

    fn raw_decoder(&self) -> Result<RawDecoder<'_>, KernelError> {
        let mut cell = Vec::with_capacity(9);
        for suffix in GRU_SUFFIXES {
            cell.push(self.params.get(&format!("dy.cell.{}", suffix))?);
        }
        Ok(RawDecoder {
            emb: self.params.get("emb")?,
            w0: self.params.get("dy.h0.w")?,
            b0: self.params.get("dy.h0.b")?,
            cell,
            wo: self.params.get("dy.out.w")?,
            bo: self.params.get("dy.out.b")?,
        })
    }

    fn decode_greedy(&self, dec: &RawDecoder, latent: &[f64]) -> Result<ScoredSequence, KernelError> {
        let mut h = dec.initial_state(latent);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut per_token = Vec::new();
        for _ in 0..self.config.max_decode_len {
            let (h2, logits) = dec.step(latent, &h, prev);
            let lp = log_softmax(&logits);
            let tok = argmax_lowest(&lp);
            per_token.push(lp[tok]);
            h = h2;
            prev = tok;
            if tok == EOS {
                break;
            }
            tokens.push(self.vocab.token(tok).to_owned());
        }
        Ok(ScoredSequence {
            tokens,
            total_logprob: per_token.iter().sum(),
            per_token,
        })
    }

    fn decode_beam(
        &self,
        dec: &RawDecoder,
        latent: &[f64],
        k: usize,
    ) -> Result<ScoredSequence, KernelError> {
        struct Hyp {
            ids: Vec<usize>,
            per_token: Vec<f64>,
            total: f64,
            h: Vec<f64>,
            prev: usize,
        }
        let mut live = vec![Hyp {
            ids: Vec::new(),
            per_token: Vec::new(),
            total: 0.0,
            h: dec.initial_state(latent),
            prev: BOS,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for _ in 0..self.config.max_decode_len {
            if live.is_empty() {
                break;
            }
            // (hyp index, token, new total, token logp)
            let mut candidates: Vec<(usize, usize, f64, f64)> = Vec::new();
            let mut states = Vec::with_capacity(live.len());
            for (i, hyp) in live.iter().enumerate() {
                let (h2, logits) = dec.step(latent, &hyp.h, hyp.prev);
                let lp = log_softmax(&logits);
                for (tok, &l) in lp.iter().enumerate() {
                    candidates.push((i, tok, hyp.total + l, l));
                }
                states.push(h2);
            }
            candidates.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .expect("finite log-probs")
                    .then(a.1.cmp(&b.1))
                    .then(a.0.cmp(&b.0))
            });
            let mut next = Vec::with_capacity(k);
            for &(i, tok, total, l) in candidates.iter().take(k) {
                let src = &live[i];
                let mut ids = src.ids.clone();
                if tok != EOS {
                    ids.push(tok);
                }
                let mut per_token = src.per_token.clone();
                per_token.push(l);
                let hyp = Hyp {
                    ids,
                    per_token,
                    total,
                    h: states[i].clone(),
                    prev: tok,
                };
                if tok == EOS {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            live = next;
        }
        finished.extend(live);
        let best = finished
            .into_iter()
            .max_by(|a, b| a.total.partial_cmp(&b.total).expect("finite log-probs"))
            .expect("at least one hypothesis");
        Ok(ScoredSequence {
            tokens: best.ids.iter().map(|&i| self.vocab.token(i).to_owned()).collect(),
            total_logprob: best.total,
            per_token: best.per_token,
        })
    }

    fn decode_sample(
        &self,
        dec: &RawDecoder,
        latent: &[f64],
        top_k: usize,
        seed: u64,
    ) -> Result<ScoredSequence, KernelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = dec.initial_state(latent);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut per_token = Vec::new();
        for _ in 0..self.config.max_decode_len {
            let (h2, logits) = dec.step(latent, &h, prev);
            let lp = log_softmax(&logits);
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).expect("finite").then(a.cmp(&b)));
            order.truncate(top_k);
            let probs: Vec<f64> = order.iter().map(|&i| lp[i].exp()).collect();
            let total: f64 = probs.iter().sum();
            let mut draw = rng.random_range(0.0..total);
            let mut tok = order[order.len() - 1];
            for (&cand, &p) in order.iter().zip(&probs) {
                if draw < p {
                    tok = cand;
                    break;
                }
                draw -= p;
            }
            per_token.push(lp[tok]);
            h = h2;
            prev = tok;
            if tok == EOS {
                break;
            }
            tokens.push(self.vocab.token(tok).to_owned());
        }
        Ok(ScoredSequence {
            tokens,
            total_logprob: per_token.iter().sum(),
            per_token,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        let config = serde_json::json!({
            "model": self.config,
            "vocab": self.vocab.tokens(),
            "schema": self.schema,
        });
        save_checkpoint(&self.params, self.vocab.hash64(), &config, path)
    }

    /// Rebuild a model from a checkpoint, verifying the vocabulary hash and
    /// the parameter layout against the embedded config.
    pub fn load(path: &Path) -> Result<Self, KernelError> {
        let LoadedCheckpoint {
            store,
            vocab_hash,
            config,
        } = load_checkpoint(path, None)?;
        let bad = |msg: String| KernelError::BadManifest(msg);
        let model: ModelConfig = serde_json::from_value(config["model"].clone())
            .map_err(|e| bad(format!("model config: {}", e)))?;
        let tokens: Vec<String> = serde_json::from_value(config["vocab"].clone())
            .map_err(|e| bad(format!("vocab: {}", e)))?;
        let schema: Schema = serde_json::from_value(config["schema"].clone())
            .map_err(|e| bad(format!("schema: {}", e)))?;
        let vocab = Vocabulary::from_tokens(tokens);
        if vocab.hash64() != vocab_hash {
            return Err(KernelError::VocabHashMismatch {
                expected: vocab.hash64(),
                found: vocab_hash,
            });
        }
        for (name, shape) in Self::param_layout(&model, vocab.len(), &schema) {
            let tensor = store
                .get(&name)
                .map_err(|_| bad(format!("missing parameter {:?}", name)))?;
            if tensor.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    name,
                    tensor.shape(),
                    shape
                )));
            }
        }
        Ok(ModelSet {
            config: model,
            vocab,
            schema,
            params: store,
        })
    }

    /// Apply one optimizer step from accumulated graph gradients.
    pub fn apply_adam(&mut self, grads: &GradMap, lr: f64) -> Result<(), KernelError> {
        self.params.adam_step(grads, lr, 1.0)
    }

    pub fn apply_sgd(&mut self, grads: &GradMap, lr: f64) -> Result<(), KernelError> {
        self.params.sgd_step(grads, lr, 1.0)
    }
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Forward-only decoder over raw tensors, mirroring the taped arithmetic
/// exactly so stepwise decoding matches teacher-forced scoring.
struct RawDecoder<'a> {
    emb: &'a Tensor,
    w0: &'a Tensor,
    b0: &'a Tensor,
    cell: Vec<&'a Tensor>,
    wo: &'a Tensor,
    bo: &'a Tensor,
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let k = x.len();
    let m = w.shape()[0];
    (0..m)
        .map(|i| w.data()[i * k..(i + 1) * k].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn vadd(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl RawDecoder<'_> {
    fn initial_state(&self, latent: &[f64]) -> Vec<f64> {
        let mut pre = matvec(self.w0, latent);
        vadd(&mut pre, self.b0.data());
        pre.iter().map(|v| v.tanh()).collect()
    }

    fn gru(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let t = |i: usize| self.cell[i];
        let gate = |w: &Tensor, u: &Tensor, b: &Tensor, uin: &[f64]| {
            let mut pre = matvec(w, x);
            vadd(&mut pre, &matvec(u, uin));
            vadd(&mut pre, b.data());
            pre
        };
        let z: Vec<f64> = gate(t(0), t(1), t(2), h)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let r: Vec<f64> = gate(t(3), t(4), t(5), h)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = gate(t(6), t(7), t(8), &rh).iter().map(|v| v.tanh()).collect();
        z.iter()
            .zip(&cand)
            .zip(h)
            .map(|((zi, ci), hi)| (1.0 - zi) * hi + zi * ci)
            .collect()
    }

    /// One decode step: embed prev token, run the cell, project to logits.
    fn step(&self, latent: &[f64], h: &[f64], prev: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.emb.shape()[1];
        let mut x = self.emb.data()[prev * d..(prev + 1) * d].to_vec();
        x.extend_from_slice(latent);
        let h2 = self.gru(&x, h);
        let mut logits = matvec(self.wo, &h2);
        vadd(&mut logits, self.bo.data());
        (h2, logits)
    }
}
