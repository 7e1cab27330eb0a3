//! Small post-LN transformer encoder used as bi-encoder or cross-encoder.
//!
//! Token and position embeddings feed `num_layers` blocks of multi-head
//! self-attention and a GELU feed-forward network. Outputs are mean-pooled.
//! Cross mode reads `[q; SEP; d]` and adds a linear score head on the pooled
//! state. An optional adapter is threaded through every block.

use std::str::FromStr;

use rand::Rng;

use crate::adapters::Adapter;
use crate::container::{ContentKind, Container};
use crate::corpus::SEP_ID;
use crate::error::{Error, Result};
use crate::numerics::{Parameterized, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    Bi,
    Cross,
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bi" => Ok(EncoderMode::Bi),
            "cross" => Ok(EncoderMode::Cross),
            other => Err(Error::config(format!("unknown encoder mode {other:?}"))),
        }
    }
}

impl EncoderMode {
    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::Bi => "bi",
            EncoderMode::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub mode: EncoderMode,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, mode: EncoderMode) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: 128,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config(format!("encoder sizes must be positive: {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim < 2 {
            return Err(Error::config("hidden_dim must be at least 2 for layer norm"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn_in: Tensor,
    pub ffn_in_bias: Tensor,
    pub ffn_out: Tensor,
    pub ffn_out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const LAYER_PARTS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "ffn_in", "ffn_in_bias",
    "ffn_out", "ffn_out_bias", "ln2_gain", "ln2_bias",
];

impl EncoderLayer {
    fn new<R: Rng>(d: usize, f: usize, rng: &mut R) -> Self {
        EncoderLayer {
            wq: Tensor::glorot(&[d, d], d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::glorot(&[d, d], d, d, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::glorot(&[d, d], d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::glorot(&[d, d], d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            ffn_in: Tensor::glorot(&[f, d], d, f, rng),
            ffn_in_bias: Tensor::zeros(&[f]),
            ffn_out: Tensor::glorot(&[d, f], f, d, rng),
            ffn_out_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    fn shapes(d: usize, f: usize) -> [Vec<usize>; 16] {
        [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![f, d],
            vec![f],
            vec![d, f],
            vec![d],
            vec![d],
            vec![d],
        ]
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Uniform init bounds: token embeddings have standard deviation 0.1,
/// position embeddings are much smaller.
pub const TOKEN_INIT_BOUND: f64 = 0.173_205_080_756_887_72;
pub const POSITION_INIT_BOUND: f64 = 0.01;

/// Mean-pooled final-layer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub embedding: Embedding,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_gain: Tensor,
    pub emb_ln_bias: Tensor,
    pub layers: Vec<EncoderLayer>,
    /// `[1 × hidden]` weight and `[1]` bias; cross mode only.
    pub head: Option<(Tensor, Tensor)>,
    frozen: bool,
}

impl EncoderModel {
    /// Fresh model with every tensor trainable.
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let token_emb = Tensor::uniform(&[config.vocab_size, d], TOKEN_INIT_BOUND, rng);
        let pos_emb = Tensor::uniform(&[config.max_seq_len, d], POSITION_INIT_BOUND, rng);
        let layers = (0..config.num_layers).map(|_| EncoderLayer::new(d, config.ffn_dim, rng)).collect();
        let head = match config.mode {
            EncoderMode::Cross => Some((Tensor::glorot(&[1, d], d, 1, rng), Tensor::zeros(&[1]))),
            EncoderMode::Bi => None,
        };
        let mut model = EncoderModel {
            config,
            token_emb,
            pos_emb,
            emb_ln_gain: Tensor::full(&[d], 1.0),
            emb_ln_bias: Tensor::zeros(&[d]),
            layers,
            head,
            frozen: true,
        };
        model.unfreeze();
        Ok(model)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every backbone tensor as non-trainable. Idempotent.
    pub fn freeze_backbone(&mut self) {
        self.params_mut().into_iter().for_each(|t| t.set_requires_grad(false));
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.params_mut().into_iter().for_each(|t| t.set_requires_grad(true));
        self.frozen = false;
    }

    /// Backbone parameter count `P`.
    pub fn param_count(&self) -> usize {
        self.total_count()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("emb_ln_gain".to_string(), &self.emb_ln_gain),
            ("emb_ln_bias".to_string(), &self.emb_ln_bias),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (part, t) in LAYER_PARTS.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{part}"), t));
            }
        }
        if let Some((w, b)) = &self.head {
            out.push(("head.w".to_string(), w));
            out.push(("head.b".to_string(), b));
        }
        out
    }

    fn check_adapter(&self, adapter: Option<&Adapter>) -> Result<()> {
        if let Some(a) = adapter {
            if a.hidden != self.config.hidden_dim || a.num_layers != self.config.num_layers {
                return Err(Error::shape(format!(
                    "adapter for hidden={} layers={} on encoder hidden={} layers={}",
                    a.hidden, a.num_layers, self.config.hidden_dim, self.config.num_layers
                )));
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Final-layer states `[len × hidden]` for a token sequence already
    /// within `max_seq_len`.
    pub fn forward_states<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        tokens: &[u32],
        adapter: Option<&'p Adapter>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        self.check_tokens(tokens)?;
        self.check_adapter(adapter)?;
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.input(&self.token_emb);
        let pos = tape.input(&self.pos_emb);
        let te = tape.gather(tok, &ids)?;
        let pe = tape.gather(pos, &positions)?;
        let h = tape.add(te, pe)?;
        let (g, b) = (tape.input(&self.emb_ln_gain), tape.input(&self.emb_ln_bias));
        let mut h = tape.layer_norm(h, g, b)?;

        for (l, layer) in self.layers.iter().enumerate() {
            let mut wq = tape.input(&layer.wq);
            let mut wv = tape.input(&layer.wv);
            if let Some(a) = adapter {
                if let Some((pair, scale)) = a.lora_target(l, false) {
                    wq = pair.effective_weight(tape, wq, scale)?;
                }
                if let Some((pair, scale)) = a.lora_target(l, true) {
                    wv = pair.effective_weight(tape, wv, scale)?;
                }
            }
            let bq = tape.input(&layer.bq);
            let wk = tape.input(&layer.wk);
            let bk = tape.input(&layer.bk);
            let bv = tape.input(&layer.bv);
            let q = tape.linear(h, wq, Some(bq))?;
            let k = tape.linear(h, wk, Some(bk))?;
            let v = tape.linear(h, wv, Some(bv))?;
            let mut ctx = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_ex(qh, kh, false, true)?;
                let s = tape.scale(s, inv_sqrt);
                let p = tape.softmax(s)?;
                ctx.push(tape.matmul(p, vh)?);
            }
            let ctx = if heads == 1 { ctx[0] } else { tape.concat_cols(&ctx)? };
            let (wo, bo) = (tape.input(&layer.wo), tape.input(&layer.bo));
            let mut attn = tape.linear(ctx, wo, Some(bo))?;
            if let Some(slot) = adapter.and_then(|a| a.houlsby_slot(l, false)) {
                attn = slot.forward(tape, attn)?;
            }
            let res = tape.add(h, attn)?;
            let (g1, b1) = (tape.input(&layer.ln1_gain), tape.input(&layer.ln1_bias));
            h = tape.layer_norm(res, g1, b1)?;

            let (w_in, b_in) = (tape.input(&layer.ffn_in), tape.input(&layer.ffn_in_bias));
            let (w_out, b_out) = (tape.input(&layer.ffn_out), tape.input(&layer.ffn_out_bias));
            let f = tape.linear(h, w_in, Some(b_in))?;
            let f = tape.gelu(f);
            let mut f = tape.linear(f, w_out, Some(b_out))?;
            if let Some(slot) = adapter.and_then(|a| a.houlsby_slot(l, true)) {
                f = slot.forward(tape, f)?;
            }
            let res = tape.add(h, f)?;
            let (g2, b2) = (tape.input(&layer.ln2_gain), tape.input(&layer.ln2_bias));
            h = tape.layer_norm(res, g2, b2)?;
        }
        Ok(h)
    }

    fn truncate_single<'a>(&self, tokens: &'a [u32]) -> (&'a [u32], bool) {
        let max = self.config.max_seq_len;
        if tokens.len() > max {
            (&tokens[..max], true)
        } else {
            (tokens, false)
        }
    }

    /// Builds `[q; SEP; d]`, cutting the document first and then the query.
    pub fn cross_input(&self, query: &[u32], doc: &[u32]) -> (Vec<u32>, bool) {
        let max = self.config.max_seq_len;
        let q_len = query.len().min(max - 1);
        let d_len = doc.len().min(max - 1 - q_len);
        let truncated = q_len < query.len() || d_len < doc.len();
        let mut seq = Vec::with_capacity(q_len + 1 + d_len);
        seq.extend_from_slice(&query[..q_len]);
        seq.push(SEP_ID);
        seq.extend_from_slice(&doc[..d_len]);
        (seq, truncated)
    }

    /// Pooled embedding on the tape (bi mode).
    pub fn encode_var<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        tokens: &[u32],
        adapter: Option<&'p Adapter>,
    ) -> Result<(Var, bool)> {
        if tokens.is_empty() {
            return Err(Error::input("cannot encode an empty sequence"));
        }
        let (tokens, truncated) = self.truncate_single(tokens);
        let states = self.forward_states(tape, tokens, adapter)?;
        Ok((tape.mean_rows(states)?, truncated))
    }

    /// Cross-encoder relevance score on the tape.
    pub fn score_cross_var<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        query: &[u32],
        doc: &[u32],
        adapter: Option<&'p Adapter>,
    ) -> Result<(Var, bool)> {
        if self.config.mode != EncoderMode::Cross {
            return Err(Error::contract("score_cross needs a cross-mode encoder"));
        }
        if query.is_empty() {
            return Err(Error::input("empty query"));
        }
        let (w, b) = self.head.as_ref().ok_or_else(|| Error::contract("cross encoder lacks a score head"))?;
        let (seq, truncated) = self.cross_input(query, doc);
        let states = self.forward_states(tape, &seq, adapter)?;
        let pooled = tape.mean_rows(states)?;
        let (wv, bv) = (tape.input(w), tape.input(b));
        let s = tape.dot(pooled, wv)?;
        let bs = tape.reshape(bv, vec![])?;
        Ok((tape.add(s, bs)?, truncated))
    }

    /// Relevance score in the model's own mode: cosine of pooled embeddings
    /// (bi) or the score head (cross).
    pub fn score_pair_var<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        query: &[u32],
        doc: &[u32],
        adapter: Option<&'p Adapter>,
    ) -> Result<Var> {
        match self.config.mode {
            EncoderMode::Bi => {
                let (q, _) = self.encode_var(tape, query, adapter)?;
                let (d, _) = self.encode_var(tape, doc, adapter)?;
                tape.cosine(q, d)
            }
            EncoderMode::Cross => Ok(self.score_cross_var(tape, query, doc, adapter)?.0),
        }
    }

    pub fn encode(&self, tokens: &[u32], adapter: Option<&Adapter>) -> Result<Encoded> {
        if self.config.mode != EncoderMode::Bi {
            return Err(Error::contract("encode needs a bi-mode encoder"));
        }
        self.pooled(tokens, adapter)
    }

    /// Mean-pooled states regardless of mode (the gate uses this on either
    /// kind of backbone).
    pub fn pooled(&self, tokens: &[u32], adapter: Option<&Adapter>) -> Result<Encoded> {
        let mut tape = Tape::new();
        let (v, truncated) = self.encode_var(&mut tape, tokens, adapter)?;
        Ok(Encoded { embedding: Embedding(tape.value(v).to_vec()), truncated })
    }

    pub fn score_cross(&self, query: &[u32], doc: &[u32], adapter: Option<&Adapter>) -> Result<Scored> {
        let mut tape = Tape::new();
        let (v, truncated) = self.score_cross_var(&mut tape, query, doc, adapter)?;
        Ok(Scored { score: tape.scalar(v), truncated })
    }

    /// Score in the model's mode without a tape-visible result.
    pub fn score_pair(&self, query: &[u32], doc: &[u32], adapter: Option<&Adapter>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.score_pair_var(&mut tape, query, doc, adapter)?;
        Ok(tape.scalar(v))
    }

    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let mut out = Container::new(ContentKind::Encoder);
        out.header = vec![
            1,
            c.vocab_size as u64,
            c.hidden_dim as u64,
            c.num_layers as u64,
            c.num_heads as u64,
            c.ffn_dim as u64,
            c.max_seq_len as u64,
            match c.mode {
                EncoderMode::Bi => 0,
                EncoderMode::Cross => 1,
            },
            self.frozen as u64,
        ];
        for (name, t) in self.named_params() {
            out.push_tensor(name, t);
        }
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContentKind::Encoder {
            return Err(Error::format(format!("expected encoder container, found {:?}", c.kind)));
        }
        if c.header_at(0)? != 1 {
            return Err(Error::format(format!("unsupported encoder version {}", c.header_at(0)?)));
        }
        let h = |i| c.header_at(i).map(|v| v as usize);
        let mode = match c.header_at(7)? {
            0 => EncoderMode::Bi,
            1 => EncoderMode::Cross,
            other => return Err(Error::format(format!("unknown encoder mode tag {other}"))),
        };
        let config = EncoderConfig {
            vocab_size: h(1)?,
            hidden_dim: h(2)?,
            num_layers: h(3)?,
            num_heads: h(4)?,
            ffn_dim: h(5)?,
            max_seq_len: h(6)?,
            mode,
        };
        config.validate().map_err(|e| Error::format(e.to_string()))?;
        let frozen = c.header_at(8)? != 0;
        let (d, f) = (config.hidden_dim, config.ffn_dim);
        let mut rd = c.reader();
        let token_emb = rd.next("token_emb", &[config.vocab_size, d])?;
        let pos_emb = rd.next("pos_emb", &[config.max_seq_len, d])?;
        let emb_ln_gain = rd.next("emb_ln_gain", &[d])?;
        let emb_ln_bias = rd.next("emb_ln_bias", &[d])?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let shapes = EncoderLayer::shapes(d, f);
            let mut ts = Vec::with_capacity(16);
            for (part, shape) in LAYER_PARTS.iter().zip(shapes.iter()) {
                ts.push(rd.next(&format!("layer{l}.{part}"), shape)?);
            }
            let mut it = ts.into_iter();
            let mut nx = || it.next().expect("16 parts");
            layers.push(EncoderLayer {
                wq: nx(),
                bq: nx(),
                wk: nx(),
                bk: nx(),
                wv: nx(),
                bv: nx(),
                wo: nx(),
                bo: nx(),
                ln1_gain: nx(),
                ln1_bias: nx(),
                ffn_in: nx(),
                ffn_in_bias: nx(),
                ffn_out: nx(),
                ffn_out_bias: nx(),
                ln2_gain: nx(),
                ln2_bias: nx(),
            });
        }
        let head = match mode {
            EncoderMode::Cross => Some((rd.next("head.w", &[1, d])?, rd.next("head.b", &[1])?)),
            EncoderMode::Bi => None,
        };
        rd.finish()?;
        let mut model =
            EncoderModel { config, token_emb, pos_emb, emb_ln_gain, emb_ln_bias, layers, head, frozen: false };
        if frozen {
            model.freeze_backbone();
        } else {
            model.unfreeze();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        EncoderModel::from_container(&Container::from_bytes(bytes)?)
    }
}

impl Parameterized for EncoderModel {
    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb, &mut self.emb_ln_gain, &mut self.emb_ln_bias];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        if let Some((w, b)) = &mut self.head {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Cosine similarity; zero-norm operands score 0.
pub fn score_bi(q: &Embedding, d: &Embedding) -> Result<f64> {
    if q.dim() != d.dim() {
        return Err(Error::shape(format!("embedding dims {} and {} differ", q.dim(), d.dim())));
    }
    let nq = q.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nd = d.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nq == 0.0 || nd == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = q.0.iter().zip(&d.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nq * nd)).clamp(-1.0, 1.0))
}
