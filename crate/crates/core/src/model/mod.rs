//! Dual-encoder summarization model.
//!
//! * code encoder: Pre-LN transformer over code subtokens with clipped
//!   relative position keys and values (no absolute positions);
//! * AST encoder: multi-head graph attention over the undirected AST with
//!   self-loops, each layer followed by ReLU, residual and layer norm;
//! * decoder: Pre-LN blocks of masked self-attention, cross-attention over
//!   code states, then cross-attention over AST node states, then an FFN.
//!
//! The final decoder layer's two cross-attention maps, averaged over heads,
//! are exposed per step as the code and node attention vectors.

mod checkpoint;
mod config;
mod search;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::corpus::{code_subtokens, summary_subtokens, CodeSample, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint};
pub use config::ModelConfig;
pub use search::{beam_over, beam_search, beam_search_with, greedy_decode, greedy_decode_with, greedy_over, StepHook};
pub use train::{teacher_forced_accuracy, train_model, train_model_with, validation_bleu, EpochLog, TrainConfig, TrainLog};

const LN_EPS: f64 = 1e-6;
const GAT_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    rel_k: ParamId,
    rel_v: ParamId,
    ln_ffn: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct GatLayer {
    w: ParamId,
    a_src: Vec<ParamId>,
    a_dst: Vec<ParamId>,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_code: Norm,
    code_attn: Attention,
    ln_ast: Norm,
    ast_attn: Attention,
    ln_ffn: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    code_embed: ParamId,
    node_embed: ParamId,
    summary_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    gat: Vec<GatLayer>,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.store.add_xavier(&format!("{name}.w"), fan_in, fan_out, &mut self.rng),
            b: self.store.add_const(&format!("{name}.b"), 1, fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add_const(&format!("{name}.gain"), 1, d, 1.0),
            bias: self.store.add_const(&format!("{name}.bias"), 1, d, 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

impl Layout {
    fn build(cfg: &ModelConfig, code_vocab: usize, summary_vocab: usize, store: &mut ParamStore, seed: u64) -> Self {
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let buckets = 2 * cfg.k_clip + 1;
        let mut b = Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let std = (d as f64).powf(-0.5);
        let code_embed = b.store.add_normal("embed.code", code_vocab, d, std, &mut b.rng);
        let node_embed = b.store.add_normal("embed.node", code_vocab, d, std, &mut b.rng);
        let summary_embed = b.store.add_normal("embed.summary", summary_vocab, d, std, &mut b.rng);

        let encoder = (0..cfg.n_enc_layers)
            .map(|l| {
                let n = format!("enc.{l}");
                EncoderLayer {
                    ln_attn: b.norm(&format!("{n}.ln_attn"), d),
                    attn: b.attention(&format!("{n}.attn"), d),
                    rel_k: b.store.add_xavier(&format!("{n}.rel_k"), buckets, dh, &mut b.rng),
                    rel_v: b.store.add_xavier(&format!("{n}.rel_v"), buckets, dh, &mut b.rng),
                    ln_ffn: b.norm(&format!("{n}.ln_ffn"), d),
                    ffn_in: b.linear(&format!("{n}.ffn_in"), d, cfg.ffn_dim),
                    ffn_out: b.linear(&format!("{n}.ffn_out"), cfg.ffn_dim, d),
                }
            })
            .collect();
        let enc_norm = b.norm("enc.norm", d);

        let gat = (0..cfg.n_gat_layers)
            .map(|l| {
                let n = format!("gat.{l}");
                GatLayer {
                    w: b.store.add_xavier(&format!("{n}.w"), d, d, &mut b.rng),
                    a_src: (0..cfg.n_heads)
                        .map(|h| b.store.add_xavier(&format!("{n}.a_src.{h}"), dh, 1, &mut b.rng))
                        .collect(),
                    a_dst: (0..cfg.n_heads)
                        .map(|h| b.store.add_xavier(&format!("{n}.a_dst.{h}"), dh, 1, &mut b.rng))
                        .collect(),
                    norm: b.norm(&format!("{n}.norm"), d),
                }
            })
            .collect();

        let decoder = (0..cfg.n_dec_layers)
            .map(|l| {
                let n = format!("dec.{l}");
                DecoderLayer {
                    ln_self: b.norm(&format!("{n}.ln_self"), d),
                    self_attn: b.attention(&format!("{n}.self"), d),
                    ln_code: b.norm(&format!("{n}.ln_code"), d),
                    code_attn: b.attention(&format!("{n}.code"), d),
                    ln_ast: b.norm(&format!("{n}.ln_ast"), d),
                    ast_attn: b.attention(&format!("{n}.ast"), d),
                    ln_ffn: b.norm(&format!("{n}.ln_ffn"), d),
                    ffn_in: b.linear(&format!("{n}.ffn_in"), d, cfg.ffn_dim),
                    ffn_out: b.linear(&format!("{n}.ffn_out"), cfg.ffn_dim, d),
                }
            })
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        let out = b.linear("out", d, summary_vocab);

        Layout {
            code_embed,
            node_embed,
            summary_embed,
            encoder,
            enc_norm,
            gat,
            decoder,
            dec_norm,
            out,
        }
    }
}

/// A sample mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub id: String,
    pub code_ids: Vec<usize>,
    pub node_ids: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    /// Summary ids without BOS/EOS.
    pub summary_ids: Vec<usize>,
}

impl EncodedSample {
    /// Decoder input `[BOS, s_1..s_T]`.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.summary_ids.iter().copied()).collect()
    }

    /// Decoder targets `[s_1..s_T, EOS]`.
    pub fn decoder_target(&self) -> Vec<usize> {
        self.summary_ids.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderOutputs {
    /// `p × d_model`
    pub code_states: Tensor,
    /// `q × d_model`
    pub ast_states: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStepOutput {
    /// Final decoder representation of the last prefix token.
    pub d_prev: Vec<f64>,
    /// Attention over code tokens (head mean, final layer).
    pub attend_code: Vec<f64>,
    /// Attention over AST nodes (head mean, final layer).
    pub attend_node: Vec<f64>,
    pub logits: Vec<f64>,
}

struct DecoderPass {
    states: Var,
    logits: Var,
    code_attn: Vec<Var>,
    ast_attn: Vec<Var>,
}

/// Dropout settings for one forward pass.
struct Ctx<'r> {
    dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Ctx<'_> {
    fn eval() -> Ctx<'static> {
        Ctx { dropout: 0.0, rng: None }
    }

    fn drop(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

/// Clipped relative-position bucket for every (query i, key j) pair of a
/// length-`p` sequence: `clamp(j - i, -k, k) + k`, row-major.
pub fn relative_position_index(p: usize, k_clip: usize) -> Vec<usize> {
    let k = k_clip as isize;
    let mut idx = Vec::with_capacity(p * p);
    for i in 0..p as isize {
        for j in 0..p as isize {
            idx.push(((j - i).clamp(-k, k) + k) as usize);
        }
    }
    idx
}

fn sinusoid(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("sinusoid shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub code_vocab: Vocabulary,
    pub summary_vocab: Vocabulary,
    pub params: ParamStore,
    /// Optimizer steps applied so far; zero for a freshly initialized model.
    pub trained_steps: u64,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // Layout is a pure function of config and vocab sizes.
        true
    }
}

impl Model {
    pub fn new(config: ModelConfig, code_vocab: Vocabulary, summary_vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, code_vocab.len(), summary_vocab.len(), &mut params, seed);
        Ok(Self {
            config,
            code_vocab,
            summary_vocab,
            params,
            trained_steps: 0,
            layout,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn summary_vocab_size(&self) -> usize {
        self.summary_vocab.len()
    }

    /// Map a sample to ids, truncating code and summary to the configured maxima.
    pub fn encode_sample(&self, sample: &CodeSample) -> EncodedSample {
        let mut code_ids = self.code_vocab.encode(&code_subtokens(sample));
        code_ids.truncate(self.config.max_code_len);
        let mut summary_ids = self.summary_vocab.encode(&summary_subtokens(sample));
        summary_ids.truncate(self.config.max_summary_len);
        EncodedSample {
            id: sample.id.clone(),
            code_ids,
            node_ids: self.code_vocab.encode(&sample.ast.node_labels),
            edges: sample.ast.edges.clone(),
            summary_ids,
        }
    }

    fn linear(&self, g: &mut Graph, l: &Linear, x: Var) -> Result<Var> {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, n: &Norm, x: Var) -> Result<Var> {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn ffn(&self, g: &mut Graph, fin: &Linear, fout: &Linear, x: Var) -> Result<Var> {
        let h = self.linear(g, fin, x)?;
        let h = g.relu(h);
        self.linear(g, fout, h)
    }

    /// Multi-head attention; returns the merged output and per-head weights.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        a: &Attention,
        xq: Var,
        xkv: Var,
        mask: Option<&[bool]>,
        relative: Option<(ParamId, ParamId, &[usize])>,
    ) -> Result<(Var, Vec<Var>)> {
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.linear(g, &a.q, xq)?;
        let k = self.linear(g, &a.k, xkv)?;
        let v = self.linear(g, &a.v, xkv)?;
        let n_keys = g.value(k).rows();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let mut scores = g.matmul_nt(qh, kh)?;
            if let Some((rel_k, _, idx)) = relative {
                let rk = g.param(rel_k);
                let qr = g.matmul_nt(qh, rk)?;
                let bias = g.rel_gather(qr, idx.to_vec(), n_keys)?;
                scores = g.add(scores, bias)?;
            }
            let scores = g.scale(scores, scale);
            let w = match mask {
                Some(m) => g.masked_softmax(scores, m)?,
                None => g.softmax(scores),
            };
            let mut out = g.matmul(w, vh)?;
            if let Some((_, rel_v, idx)) = relative {
                let buckets = 2 * self.config.k_clip + 1;
                let rv = g.param(rel_v);
                let agg = g.rel_scatter(w, idx.to_vec(), buckets)?;
                let rel_out = g.matmul(agg, rv)?;
                out = g.add(out, rel_out)?;
            }
            outs.push(out);
            weights.push(w);
        }
        let merged = g.concat_cols(&outs)?;
        Ok((self.linear(g, &a.o, merged)?, weights))
    }

    fn sc_encode_graph(&self, g: &mut Graph, code_ids: &[usize], ctx: &mut Ctx) -> Result<Var> {
        let p = code_ids.len();
        if p == 0 {
            return Err(Error::Empty("code tokens"));
        }
        if p > self.config.max_code_len {
            return Err(Error::LengthOverflow {
                len: p,
                max: self.config.max_code_len,
            });
        }
        let idx = relative_position_index(p, self.config.k_clip);
        let table = g.param(self.layout.code_embed);
        let mut x = g.gather(table, code_ids)?;
        x = ctx.drop(g, x);
        for layer in &self.layout.encoder {
            let h = self.norm(g, &layer.ln_attn, x)?;
            let (a, _) = self.attention(g, &layer.attn, h, h, None, Some((layer.rel_k, layer.rel_v, &idx)))?;
            let a = ctx.drop(g, a);
            x = g.add(x, a)?;
            let h = self.norm(g, &layer.ln_ffn, x)?;
            let f = self.ffn(g, &layer.ffn_in, &layer.ffn_out, h)?;
            let f = ctx.drop(g, f);
            x = g.add(x, f)?;
        }
        self.norm(g, &self.layout.enc_norm, x)
    }

    fn ast_encode_graph(&self, g: &mut Graph, node_ids: &[usize], edges: &[(usize, usize)], ctx: &mut Ctx) -> Result<Var> {
        let q = node_ids.len();
        if q == 0 {
            return Err(Error::Empty("AST nodes"));
        }
        let mut adj = vec![false; q * q];
        for i in 0..q {
            adj[i * q + i] = true;
        }
        for &(a, b) in edges {
            if a >= q || b >= q {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) out of range for {q} nodes")));
            }
            adj[a * q + b] = true;
            adj[b * q + a] = true;
        }
        let dh = self.config.head_dim();
        let table = g.param(self.layout.node_embed);
        let mut x = g.gather(table, node_ids)?;
        x = ctx.drop(g, x);
        for layer in &self.layout.gat {
            let w = g.param(layer.w);
            let wh = g.matmul(x, w)?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for (h, (&a_src, &a_dst)) in layer.a_src.iter().zip(&layer.a_dst).enumerate() {
                let whh = g.slice_cols(wh, h * dh, dh)?;
                let asrc = g.param(a_src);
                let adst = g.param(a_dst);
                let s = g.matmul(whh, asrc)?;
                let t = g.matmul(whh, adst)?;
                let e = g.outer_add(s, t)?;
                let e = g.leaky_relu(e, GAT_SLOPE);
                let att = g.masked_softmax(e, &adj)?;
                heads.push(g.matmul(att, whh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let y = g.relu(cat);
            let y = ctx.drop(g, y);
            let res = g.add(x, y)?;
            x = self.norm(g, &layer.norm, res)?;
        }
        Ok(x)
    }

    fn decode_graph(&self, g: &mut Graph, prefix: &[usize], code: Var, ast: Var, ctx: &mut Ctx) -> Result<DecoderPass> {
        let t = prefix.len();
        if t == 0 || prefix[0] != BOS {
            return Err(Error::InvalidArgument("decoder prefix must start with BOS".into()));
        }
        if t > self.config.max_summary_len + 1 {
            return Err(Error::LengthOverflow {
                len: t - 1,
                max: self.config.max_summary_len,
            });
        }
        let mut causal = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                causal[i * t + j] = true;
            }
        }
        let table = g.param(self.layout.summary_embed);
        let emb = g.gather(table, prefix)?;
        let pos = g.leaf(sinusoid(t, self.config.d_model));
        let mut x = g.add(emb, pos)?;
        x = ctx.drop(g, x);
        let mut code_attn = Vec::new();
        let mut ast_attn = Vec::new();
        for layer in &self.layout.decoder {
            let h = self.norm(g, &layer.ln_self, x)?;
            let (a, _) = self.attention(g, &layer.self_attn, h, h, Some(&causal), None)?;
            let a = ctx.drop(g, a);
            x = g.add(x, a)?;

            let h = self.norm(g, &layer.ln_code, x)?;
            let (a, wc) = self.attention(g, &layer.code_attn, h, code, None, None)?;
            let a = ctx.drop(g, a);
            x = g.add(x, a)?;

            let h = self.norm(g, &layer.ln_ast, x)?;
            let (a, wa) = self.attention(g, &layer.ast_attn, h, ast, None, None)?;
            let a = ctx.drop(g, a);
            x = g.add(x, a)?;

            let h = self.norm(g, &layer.ln_ffn, x)?;
            let f = self.ffn(g, &layer.ffn_in, &layer.ffn_out, h)?;
            let f = ctx.drop(g, f);
            x = g.add(x, f)?;
            code_attn = wc;
            ast_attn = wa;
        }
        let states = self.norm(g, &self.layout.dec_norm, x)?;
        let logits = self.linear(g, &self.layout.out, states)?;
        Ok(DecoderPass {
            states,
            logits,
            code_attn,
            ast_attn,
        })
    }

    /// Code encoder states `p × d_model` (dropout off).
    pub fn sc_encode(&self, code_ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let v = self.sc_encode_graph(&mut g, code_ids, &mut Ctx::eval())?;
        Ok(g.value(v).clone())
    }

    /// AST node states `q × d_model` (dropout off).
    pub fn ast_encode(&self, node_ids: &[usize], edges: &[(usize, usize)]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let v = self.ast_encode_graph(&mut g, node_ids, edges, &mut Ctx::eval())?;
        Ok(g.value(v).clone())
    }

    pub fn encode(&self, sample: &EncodedSample) -> Result<EncoderOutputs> {
        Ok(EncoderOutputs {
            code_states: self.sc_encode(&sample.code_ids)?,
            ast_states: self.ast_encode(&sample.node_ids, &sample.edges)?,
        })
    }

    /// Decoder outputs for every position of `prefix` (teacher forcing).
    /// Entry `i` is the step that predicts the token after `prefix[..=i]`.
    pub fn decode_all(&self, prefix: &[usize], enc: &EncoderOutputs) -> Result<Vec<DecodeStepOutput>> {
        let mut g = Graph::new(&self.params);
        let code = g.leaf_ref(&enc.code_states);
        let ast = g.leaf_ref(&enc.ast_states);
        let pass = self.decode_graph(&mut g, prefix, code, ast, &mut Ctx::eval())?;
        (0..prefix.len())
            .map(|row| {
                Ok(DecodeStepOutput {
                    d_prev: g.value(pass.states).row(row).to_vec(),
                    attend_code: head_mean(&g, &pass.code_attn, row),
                    attend_node: head_mean(&g, &pass.ast_attn, row),
                    logits: g.value(pass.logits).row(row).to_vec(),
                })
            })
            .collect()
    }

    /// Outputs for the last position of `prefix`.
    pub fn decode_step(&self, prefix: &[usize], enc: &EncoderOutputs) -> Result<DecodeStepOutput> {
        let mut all = self.decode_all(prefix, enc)?;
        Ok(all.pop().expect("prefix is non-empty"))
    }

    /// Summed token NLL, its gradients and the number of target tokens.
    pub fn sample_gradients(&self, sample: &EncodedSample, dropout_seed: Option<u64>) -> Result<(Gradients, f64, usize)> {
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut ctx = Ctx {
            dropout: if rng.is_some() { self.config.dropout } else { 0.0 },
            rng: rng.as_mut(),
        };
        let mut g = Graph::new(&self.params);
        let loss = self.sample_loss_graph(&mut g, sample, &mut ctx)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        Ok((grads, value, sample.summary_ids.len() + 1))
    }

    fn sample_loss_graph(&self, g: &mut Graph, sample: &EncodedSample, ctx: &mut Ctx) -> Result<Var> {
        let code = self.sc_encode_graph(g, &sample.code_ids, ctx)?;
        let ast = self.ast_encode_graph(g, &sample.node_ids, &sample.edges, ctx)?;
        let pass = self.decode_graph(g, &sample.decoder_input(), code, ast, ctx)?;
        g.cross_entropy_sum(pass.logits, &sample.decoder_target(), PAD)
    }

    /// Summed token NLL without gradients (dropout off).
    pub fn sample_loss(&self, sample: &EncodedSample) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let loss = self.sample_loss_graph(&mut g, sample, &mut Ctx::eval())?;
        Ok(g.value(loss).data()[0])
    }

    /// Teacher-forced logits `(T+1) × V` for a sample (dropout off).
    pub fn teacher_forced_logits(&self, sample: &EncodedSample) -> Result<Tensor> {
        let enc = self.encode(sample)?;
        let steps = self.decode_all(&sample.decoder_input(), &enc)?;
        let v = self.summary_vocab_size();
        let data: Vec<f64> = steps.into_iter().flat_map(|s| s.logits).collect();
        Tensor::new(vec![data.len() / v, v], data)
    }

    /// Mean-pooled, L2-normalized code encoder states.
    pub fn code_embedding(&self, sample: &EncodedSample) -> Result<Vec<f64>> {
        let states = self.sc_encode(&sample.code_ids)?;
        let d = states.cols();
        let mut mean = vec![0.0; d];
        for r in 0..states.rows() {
            for (m, v) in mean.iter_mut().zip(states.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= states.rows() as f64;
        }
        crate::tensor::l2_normalize(&mean)
    }
}

fn head_mean(g: &Graph, heads: &[Var], row: usize) -> Vec<f64> {
    let n = g.value(heads[0]).cols();
    let mut out = vec![0.0; n];
    for &h in heads {
        for (o, v) in out.iter_mut().zip(g.value(h).row(row)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= heads.len() as f64;
    }
    out
}
