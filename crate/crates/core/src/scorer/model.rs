use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, BOS, EOS};
use super::ScorerError;
use crate::autodiff::{Graph, Matrix, NodeId, ParamId, ParamStore};
use crate::lora::AdapterSet;

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
}

impl ModelConfig {
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_len: 128,
            layers: 2,
            d_model: 32,
            d_ff: 64,
            heads: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        let positive = [
            self.vocab_size,
            self.max_len,
            self.layers,
            self.d_model,
            self.d_ff,
            self.heads,
        ];
        if positive.contains(&0) {
            return Err(ScorerError::Config(format!("zero dimension in {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ScorerError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

/// `up` is `d_ff x d_model`, `down` is `d_model x d_ff`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

/// Pre-LN encoder-decoder transformer that scores target strings given an
/// input string.
#[derive(Debug, Clone)]
pub struct ScorerModel {
    config: ModelConfig,
    tokenizer: Tokenizer,
    pub(crate) params: ParamStore,
    layout: Layout,
    pub(crate) adapters: Option<AdapterSet>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId, ScorerError> {
        let dist = Normal::new(0.0, std).map_err(|e| ScorerError::Config(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(self.store.add(name, Matrix::from_vec(rows, cols, data)?, true)?)
    }

    fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<ParamId, ScorerError> {
        Ok(self.store.add(name, Matrix::filled(rows, cols, value), true)?)
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, bias: bool, std: f64) -> Result<Linear, ScorerError> {
        let w = self.normal(&format!("{name}.w"), out, inp, std)?;
        let b = if bias {
            Some(self.constant(&format!("{name}.b"), 1, out, 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm, ScorerError> {
        Ok(Norm {
            g: self.constant(&format!("{name}.g"), 1, d, 1.0)?,
            b: self.constant(&format!("{name}.b"), 1, d, 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize, out_std: f64) -> Result<Attention, ScorerError> {
        let std = 1.0 / (d as f64).sqrt();
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d, false, std)?,
            k: self.linear(&format!("{name}.k"), d, d, false, std)?,
            v: self.linear(&format!("{name}.v"), d, d, false, std)?,
            o: self.linear(&format!("{name}.o"), d, d, false, out_std)?,
        })
    }

    fn ffn(&mut self, name: &str, c: &ModelConfig, out_std: f64) -> Result<FeedForward, ScorerError> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.w1"), c.d_ff, c.d_model, true, 1.0 / (c.d_model as f64).sqrt())?,
            down: self.linear(&format!("{name}.w2"), c.d_model, c.d_ff, true, out_std)?,
        })
    }
}

impl Layout {
    fn build(store: &mut ParamStore, c: &ModelConfig, seed: u64) -> Result<Layout, ScorerError> {
        let mut b = Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = c.d_model;
        let residual_std = 1.0 / ((d as f64).sqrt() * (2.0 * c.layers as f64).sqrt());
        let tok_emb = b.normal("embed.tok", c.vocab_size, d, 0.3)?;
        let enc_pos = b.normal("embed.enc_pos", c.max_len, d, 0.1)?;
        let dec_pos = b.normal("embed.dec_pos", c.max_len, d, 0.1)?;
        let mut encoder = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                ln_attn: b.norm(&format!("{p}.ln_attn"), d)?,
                attn: b.attention(&format!("{p}.attn"), d, residual_std)?,
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), d)?,
                ffn: b.ffn(&format!("{p}.ffn"), c, residual_std)?,
            });
        }
        let enc_norm = b.norm("enc.ln_final", d)?;
        let mut decoder = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                ln_self: b.norm(&format!("{p}.ln_self"), d)?,
                self_attn: b.attention(&format!("{p}.self_attn"), d, residual_std)?,
                ln_cross: b.norm(&format!("{p}.ln_cross"), d)?,
                cross_attn: b.attention(&format!("{p}.cross_attn"), d, residual_std)?,
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), d)?,
                ffn: b.ffn(&format!("{p}.ffn"), c, residual_std)?,
            });
        }
        let dec_norm = b.norm("dec.ln_final", d)?;
        let out = b.linear("out", c.vocab_size, d, true, 1.0 / (d as f64).sqrt())?;
        Ok(Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out,
        })
    }
}

impl ScorerModel {
    /// Randomly initialised model. Every parameter starts trainable.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self, ScorerError> {
        config.validate()?;
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(ScorerError::Config(format!(
                "vocab_size {} but tokenizer has {}",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut params = ParamStore::new();
        let layout = Layout::build(&mut params, &config, seed)?;
        Ok(ScorerModel {
            config,
            tokenizer,
            params,
            layout,
            adapters: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    /// Number of base parameters, i.e. everything except attached adapters.
    pub fn base_param_len(&self) -> usize {
        self.adapters
            .as_ref()
            .map_or(self.params.len(), |a| a.first_param_index())
    }

    /// Every feed-forward block in encoder then decoder order.
    pub(crate) fn ffn_blocks(&self) -> Vec<FeedForward> {
        self.layout
            .encoder
            .iter()
            .map(|l| l.ffn)
            .chain(self.layout.decoder.iter().map(|l| l.ffn))
            .collect()
    }

    fn linear(&self, g: &mut Graph, x: NodeId, lin: Linear) -> Result<NodeId, ScorerError> {
        let w = g.param(lin.w);
        let mut y = g.matmul_t(x, w)?;
        if let Some(adapter) = self.adapters.as_ref().and_then(|a| a.for_host(lin.w)) {
            let a = g.param(adapter.a);
            let h = g.matmul_t(x, a)?;
            let h = g.dropout(h, adapter.dropout)?;
            let b = g.param(adapter.b);
            let delta = g.matmul_t(h, b)?;
            let delta = g.scale(delta, adapter.alpha)?;
            y = g.add(y, delta)?;
        }
        if let Some(b) = lin.b {
            let b = g.param(b);
            y = g.add_row(y, b)?;
        }
        Ok(y)
    }

    fn norm(&self, g: &mut Graph, x: NodeId, n: Norm) -> Result<NodeId, ScorerError> {
        let gain = g.param(n.g);
        let bias = g.param(n.b);
        Ok(g.layer_norm(x, gain, bias)?)
    }

    fn attention(
        &self,
        g: &mut Graph,
        xq: NodeId,
        xkv: NodeId,
        attn: Attention,
        mask: Option<NodeId>,
    ) -> Result<NodeId, ScorerError> {
        let q = self.linear(g, xq, attn.q)?;
        let k = self.linear(g, xkv, attn.k)?;
        let v = self.linear(g, xkv, attn.v)?;
        let dh = self.config.d_model / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let mut s = g.scale(s, scale)?;
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.row_softmax(s)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.linear(g, cat, attn.o)
    }

    fn ffn(&self, g: &mut Graph, x: NodeId, f: FeedForward) -> Result<NodeId, ScorerError> {
        let h = self.linear(g, x, f.up)?;
        let h = g.relu(h)?;
        self.linear(g, h, f.down)
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], pos_table: ParamId, positions: &[usize]) -> Result<NodeId, ScorerError> {
        let tok = g.param(self.layout.tok_emb);
        let pos = g.param(pos_table);
        let t = g.embedding(tok, ids)?;
        let p = g.embedding(pos, positions)?;
        Ok(g.add(t, p)?)
    }

    fn encode(&self, g: &mut Graph, input: &str) -> Result<NodeId, ScorerError> {
        let mut ids = self.tokenizer.encode(input);
        ids.push(EOS);
        if ids.len() > self.config.max_len {
            return Err(ScorerError::TooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut x = self.embed(g, &ids, self.layout.enc_pos, &positions)?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, layer.ln_attn)?;
            let h = self.attention(g, h, h, layer.attn, None)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.ln_ffn)?;
            let h = self.ffn(g, h, layer.ffn)?;
            x = g.add(x, h)?;
        }
        self.norm(g, x, self.layout.enc_norm)
    }

    fn decode(
        &self,
        g: &mut Graph,
        memory: NodeId,
        dec_in: &[usize],
        positions: &[usize],
        mask: Matrix,
    ) -> Result<NodeId, ScorerError> {
        let mask = g.constant(mask);
        let mut x = self.embed(g, dec_in, self.layout.dec_pos, positions)?;
        for layer in &self.layout.decoder {
            let h = self.norm(g, x, layer.ln_self)?;
            let h = self.attention(g, h, h, layer.self_attn, Some(mask))?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.ln_cross)?;
            let h = self.attention(g, h, memory, layer.cross_attn, None)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.ln_ffn)?;
            let h = self.ffn(g, h, layer.ffn)?;
            x = g.add(x, h)?;
        }
        let x = self.norm(g, x, self.layout.dec_norm)?;
        let logits = self.linear(g, x, self.layout.out)?;
        Ok(g.row_log_softmax(logits)?)
    }

    /// Records the forward pass for scoring every target against `input` and
    /// returns a `1 x targets.len()` node of summed token log-probabilities.
    /// The targets share one decoder pass under a block-causal mask; no
    /// end-of-sequence token is scored.
    pub fn score_targets(&self, g: &mut Graph, input: &str, targets: &[&str]) -> Result<NodeId, ScorerError> {
        if targets.is_empty() {
            return Err(ScorerError::EmptyTarget);
        }
        let memory = self.encode(g, input)?;
        let mut dec_in = Vec::new();
        let mut gold = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(targets.len());
        for target in targets {
            let ids = self.tokenizer.encode(target);
            if ids.is_empty() {
                return Err(ScorerError::EmptyTarget);
            }
            if ids.len() > self.config.max_len {
                return Err(ScorerError::TooLong {
                    len: ids.len(),
                    max: self.config.max_len,
                });
            }
            dec_in.push(BOS);
            dec_in.extend_from_slice(&ids[..ids.len() - 1]);
            positions.extend(0..ids.len());
            segments.push(ids.len());
            gold.extend(ids);
        }
        let n = dec_in.len();
        let mut mask = Matrix::filled(n, n, MASKED);
        let mut start = 0;
        for &len in &segments {
            for i in 0..len {
                for j in 0..=i {
                    mask.set(start + i, start + j, 0.0);
                }
            }
            start += len;
        }
        let logp = self.decode(g, memory, &dec_in, &positions, mask)?;
        Ok(g.segment_pick_sum(logp, &gold, &segments)?)
    }

    /// Per-position log-softmax rows of the decoder for a single target, in
    /// evaluation mode. Row `t` is the distribution over the token at `t`.
    pub fn token_log_probs(&self, input: &str, target: &str) -> Result<Matrix, ScorerError> {
        let mut g = Graph::new(&self.params);
        let memory = self.encode(&mut g, input)?;
        let ids = self.tokenizer.encode(target);
        if ids.is_empty() {
            return Err(ScorerError::EmptyTarget);
        }
        let mut dec_in = vec![BOS];
        dec_in.extend_from_slice(&ids[..ids.len() - 1]);
        let positions: Vec<usize> = (0..dec_in.len()).collect();
        let n = dec_in.len();
        let mut mask = Matrix::filled(n, n, MASKED);
        for i in 0..n {
            for j in 0..=i {
                mask.set(i, j, 0.0);
            }
        }
        let logp = self.decode(&mut g, memory, &dec_in, &positions, mask)?;
        Ok(g.value(logp).clone())
    }

    /// Summed log-probabilities of each target given `input`, in evaluation mode.
    pub fn raw_scores(&self, input: &str, targets: &[&str]) -> Result<Vec<f64>, ScorerError> {
        let mut g = Graph::new(&self.params);
        let node = self.score_targets(&mut g, input, targets)?;
        Ok(g.value(node).data().to_vec())
    }

    pub fn sequence_log_prob(&self, input: &str, target: &str) -> Result<f64, ScorerError> {
        Ok(self.raw_scores(input, &[target])?[0])
    }
}
