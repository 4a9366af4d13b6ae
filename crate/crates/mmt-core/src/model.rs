//! The multimodal translation model: a shared visual projector, an encoder
//! whose self-attention queries are the text positions plus one visual token
//! (keys/values stay text-only), and a standard autoregressive decoder whose
//! cross-attention sees all encoder outputs including the visual token.
//!
//! One parameter set serves both visual streams; nothing is stream-specific.
//! Parameters live as persistent nodes on the model's own tape; forwards
//! append ephemeral nodes that the caller drops with [`MultimodalTransformer::reset`].

use serde::{Deserialize, Serialize};

use crate::data::batch::Batch;
use crate::data::vocab::BOS;
use crate::error::{Error, Result};
use crate::rng::{RngBundle, RngStream};
use crate::tensor::{Tape, Var};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f32,
    pub d_feat: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 128,
            ffn_dim: 256,
            heads: 4,
            dropout: 0.3,
            d_feat: 512,
            max_positions: 512,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.d_model == 0
            || self.ffn_dim == 0
            || self.heads == 0
            || self.d_feat == 0
            || self.max_positions == 0
            || self.vocab_size == 0
        {
            return Err(Error::Shape("model config extents must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Shape(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Shape(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearP {
    w: Var,
    b: Var,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    gamma: Var,
    beta: Var,
}

#[derive(Debug, Clone, Copy)]
struct AttentionP {
    q: LinearP,
    k: LinearP,
    v: LinearP,
    out: LinearP,
    norm: NormP,
}

#[derive(Debug, Clone, Copy)]
struct FfnP {
    lin1: LinearP,
    lin2: LinearP,
    norm: NormP,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayerP {
    attn: AttentionP,
    ffn: FfnP,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayerP {
    self_attn: AttentionP,
    cross_attn: AttentionP,
    ffn: FfnP,
}

/// Output of a dual-stream forward over one batch, per example.
pub struct PairForward {
    pub logits_syn: Vec<Var>,
    pub logits_aut: Vec<Var>,
    /// Post-projector visual representations, one `[1, d_model]` row each.
    pub h_syn: Vec<Var>,
    pub h_aut: Vec<Var>,
    pub gold: Vec<Vec<u32>>,
    pub gold_mask: Vec<Vec<bool>>,
}

pub struct MultimodalTransformer {
    cfg: ModelConfig,
    tape: Tape,
    names: Vec<(String, Var)>,
    embedding: Var,
    positions: Var,
    visual_query: Var,
    proj_in: LinearP,
    proj_out: LinearP,
    enc: Vec<EncoderLayerP>,
    dec: Vec<DecoderLayerP>,
}

impl MultimodalTransformer {
    pub fn new(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut tape = Tape::new();
        let mut names: Vec<(String, Var)> = Vec::new();
        let d = cfg.d_model;

        let param = |tape: &mut Tape,
                         names: &mut Vec<(String, Var)>,
                         name: String,
                         data: Vec<f32>,
                         shape: Vec<usize>|
         -> Var {
            let v = tape.leaf(data, shape, true).expect("param leaf");
            names.push((name, v));
            v
        };
        let embed_std = 1.0 / (d as f64).sqrt();
        let embedding = param(
            &mut tape,
            &mut names,
            "embedding".into(),
            (0..cfg.vocab_size * d).map(|_| (rng.normal() * embed_std) as f32).collect(),
            vec![cfg.vocab_size, d],
        );
        let linear = |tape: &mut Tape,
                          names: &mut Vec<(String, Var)>,
                          rng: &mut RngStream,
                          name: &str,
                          fan_in: usize,
                          fan_out: usize|
         -> LinearP {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = param(
                tape,
                names,
                format!("{name}.w"),
                (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound) as f32).collect(),
                vec![fan_in, fan_out],
            );
            let b = param(tape, names, format!("{name}.b"), vec![0.0; fan_out], vec![fan_out]);
            LinearP { w, b }
        };
        let norm = |tape: &mut Tape, names: &mut Vec<(String, Var)>, name: &str| -> NormP {
            let gamma = param(tape, names, format!("{name}.gamma"), vec![1.0; d], vec![d]);
            let beta = param(tape, names, format!("{name}.beta"), vec![0.0; d], vec![d]);
            NormP { gamma, beta }
        };
        let attention =
            |tape: &mut Tape, names: &mut Vec<(String, Var)>, rng: &mut RngStream, name: &str| {
                AttentionP {
                    q: linear(tape, names, rng, &format!("{name}.q"), d, d),
                    k: linear(tape, names, rng, &format!("{name}.k"), d, d),
                    v: linear(tape, names, rng, &format!("{name}.v"), d, d),
                    out: linear(tape, names, rng, &format!("{name}.out"), d, d),
                    norm: norm(tape, names, &format!("{name}.norm")),
                }
            };
        let ffn =
            |tape: &mut Tape, names: &mut Vec<(String, Var)>, rng: &mut RngStream, name: &str| {
                FfnP {
                    lin1: linear(tape, names, rng, &format!("{name}.lin1"), d, cfg.ffn_dim),
                    lin2: linear(tape, names, rng, &format!("{name}.lin2"), cfg.ffn_dim, d),
                    norm: norm(tape, names, &format!("{name}.norm")),
                }
            };

        let bound = 1.0 / (d as f64).sqrt();
        let visual_query = param(
            &mut tape,
            &mut names,
            "visual_query".into(),
            (0..d * d).map(|_| rng.uniform(-bound, bound) as f32).collect(),
            vec![d, d],
        );
        let proj_in = linear(&mut tape, &mut names, rng, "projector.lin1", cfg.d_feat, cfg.ffn_dim);
        let proj_out = linear(&mut tape, &mut names, rng, "projector.lin2", cfg.ffn_dim, d);

        let mut enc = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            enc.push(EncoderLayerP {
                attn: attention(&mut tape, &mut names, rng, &format!("enc.{l}.attn")),
                ffn: ffn(&mut tape, &mut names, rng, &format!("enc.{l}.ffn")),
            });
        }
        let mut dec = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            dec.push(DecoderLayerP {
                self_attn: attention(&mut tape, &mut names, rng, &format!("dec.{l}.self_attn")),
                cross_attn: attention(&mut tape, &mut names, rng, &format!("dec.{l}.cross_attn")),
                ffn: ffn(&mut tape, &mut names, rng, &format!("dec.{l}.ffn")),
            });
        }

        let positions = tape
            .constant(sinusoid_table(cfg.max_positions, d), vec![cfg.max_positions, d])
            .expect("position table");
        tape.seal();

        Ok(MultimodalTransformer {
            cfg,
            tape,
            names,
            embedding,
            positions,
            visual_query,
            proj_in,
            proj_out,
            enc,
            dec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    /// Drop all forward state; parameters and their gradients survive.
    pub fn reset(&mut self) {
        self.tape.reset();
    }

    pub fn named_params(&self) -> &[(String, Var)] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.names.iter().map(|(_, v)| self.tape.data(*v).len()).sum()
    }

    pub fn param_by_name(&self, name: &str) -> Option<Var> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    // ── Building blocks ─────────────────────────────────────────────

    fn linear(&mut self, x: Var, p: LinearP) -> Result<Var> {
        let y = self.tape.matmul(x, p.w)?;
        self.tape.add_bias(y, p.b)
    }

    /// Residual + dropout + post-norm around a sublayer output.
    fn residual_norm(
        &mut self,
        x: Var,
        sub: Var,
        norm: NormP,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        let sub = self.tape.dropout(sub, self.cfg.dropout, rng, train)?;
        let added = self.tape.add(x, sub)?;
        self.tape.layer_norm(added, norm.gamma, norm.beta, LAYER_NORM_EPS)
    }

    /// Multi-head attention. Queries come from `q_in` (M rows), keys/values
    /// from `kv_in` (K rows); `key_mask` marks attendable key positions and
    /// `causal` additionally restricts row i to keys j <= i.
    /// Returns the output rows and the per-head attention matrices.
    fn attention(
        &mut self,
        p: AttentionP,
        q_in: Var,
        kv_in: Var,
        key_mask: &[bool],
        causal: bool,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let m = self.tape.shape(q_in)[0];
        let k_rows = self.tape.shape(kv_in)[0];
        debug_assert_eq!(key_mask.len(), k_rows);
        let q = self.linear(q_in, p.q)?;
        let k = self.linear(kv_in, p.k)?;
        let v = self.linear(kv_in, p.v)?;

        let mut mask = vec![false; m * k_rows];
        for i in 0..m {
            for (j, &keep) in key_mask.iter().enumerate() {
                mask[i * k_rows + j] = keep && (!causal || j <= i);
            }
        }

        let dk = self.cfg.d_model / self.cfg.heads;
        let inv_sqrt_dk = 1.0 / (dk as f32).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut alphas = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = self.tape.slice_cols(q, lo, hi)?;
            let kh = self.tape.slice_cols(k, lo, hi)?;
            let vh = self.tape.slice_cols(v, lo, hi)?;
            let scores = self.tape.matmul_nt(qh, kh)?;
            let scaled = self.tape.scale(scores, inv_sqrt_dk);
            let alpha = self.tape.masked_softmax(scaled, &mask)?;
            let alpha = self.tape.dropout(alpha, self.cfg.dropout, rng, train)?;
            alphas.push(alpha);
            heads.push(self.tape.matmul(alpha, vh)?);
        }
        let ctx = self.tape.concat_cols(&heads)?;
        let out = self.linear(ctx, p.out)?;
        Ok((out, alphas))
    }

    fn ffn_block(&mut self, x: Var, p: FfnP, rng: &mut RngStream, train: bool) -> Result<Var> {
        let h = self.linear(x, p.lin1)?;
        let h = self.tape.relu(h);
        let out = self.linear(h, p.lin2)?;
        self.residual_norm(x, out, p.norm, rng, train)
    }

    /// Token embedding (scaled by sqrt(d)) plus sinusoidal positions.
    fn embed_tokens(&mut self, ids: &[u32]) -> Result<Var> {
        if ids.len() > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max positions {}",
                ids.len(),
                self.cfg.max_positions
            )));
        }
        let emb = self.tape.embedding_lookup(self.embedding, ids)?;
        let emb = self.tape.scale(emb, (self.cfg.d_model as f32).sqrt());
        let pos = self.tape.slice_rows(self.positions, 0, ids.len())?;
        self.tape.add(emb, pos)
    }

    // ── Public forward surface ──────────────────────────────────────

    /// Project one raw feature vector into model space: `[1, d_model]`.
    /// Both streams share these weights.
    pub fn project_features(&mut self, feature: &[f32]) -> Result<Var> {
        if feature.len() != self.cfg.d_feat {
            return Err(Error::Shape(format!(
                "feature dimension {} against configured {}",
                feature.len(),
                self.cfg.d_feat
            )));
        }
        let f = self.tape.constant(feature.to_vec(), vec![1, self.cfg.d_feat])?;
        self.project_var(f)
    }

    /// Project `rows` feature vectors at once: `[rows, d_model]`.
    pub fn project_features_batch(&mut self, features: &[f32], rows: usize) -> Result<Var> {
        if features.len() != rows * self.cfg.d_feat {
            return Err(Error::Shape(format!(
                "{} feature values for {rows} rows of {}",
                features.len(),
                self.cfg.d_feat
            )));
        }
        let f = self.tape.constant(features.to_vec(), vec![rows, self.cfg.d_feat])?;
        self.project_var(f)
    }

    fn project_var(&mut self, f: Var) -> Result<Var> {
        let h = self.linear(f, self.proj_in)?;
        let h = self.tape.relu(h);
        self.linear(h, self.proj_out)
    }

    /// Encode a source sentence with its projected visual token.
    /// Returns `[(N+1), d_model]`; the visual token is the last row.
    pub fn encode(
        &mut self,
        src_ids: &[u32],
        src_mask: &[bool],
        visual: Var,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        let n = src_ids.len();
        if n == 0 || src_mask.len() != n {
            return Err(Error::Shape(format!(
                "encode with {n} ids and {} mask entries",
                src_mask.len()
            )));
        }
        if !src_mask.iter().any(|&m| m) {
            return Err(Error::Mask("all-pad source sentence".into()));
        }
        if self.tape.shape(visual) != [1, self.cfg.d_model] {
            return Err(Error::Shape(format!(
                "visual token shape {:?}, expected [1, {}]",
                self.tape.shape(visual),
                self.cfg.d_model
            )));
        }
        let text = self.embed_tokens(src_ids)?;
        let vis = self.tape.matmul(visual, self.visual_query)?;
        let state = self.tape.concat_rows(text, vis)?;
        let mut state = self.tape.dropout(state, self.cfg.dropout, rng, train)?;

        for l in 0..self.cfg.layers {
            let layer = self.enc[l];
            // keys/values restricted to the N text positions
            let text_part = self.tape.slice_rows(state, 0, n)?;
            let (attn, _) =
                self.attention(layer.attn, state, text_part, src_mask, false, rng, train)?;
            state = self.residual_norm(state, attn, layer.attn.norm, rng, train)?;
            state = self.ffn_block(state, layer.ffn, rng, train)?;
        }
        Ok(state)
    }

    /// Teacher-forced decode of a target prefix against encoder output.
    /// `src_mask` is the text mask (length N); the visual token is always
    /// attendable. Returns logits `[T, vocab]`.
    pub fn decode(
        &mut self,
        tgt_input: &[u32],
        tgt_input_mask: &[bool],
        enc_out: Var,
        src_mask: &[bool],
        rng: &mut RngStream,
        train: bool,
    ) -> Result<Var> {
        let t = tgt_input.len();
        if t == 0 || tgt_input_mask.len() != t {
            return Err(Error::Shape(format!(
                "decode with {t} ids and {} mask entries",
                tgt_input_mask.len()
            )));
        }
        if tgt_input[0] != BOS {
            return Err(Error::Data("decoder prefix must begin with bos".into()));
        }
        let enc_rows = self.tape.shape(enc_out)[0];
        if enc_rows != src_mask.len() + 1 {
            return Err(Error::Shape(format!(
                "encoder output rows {enc_rows} against text mask of {}",
                src_mask.len()
            )));
        }
        let mut cross_mask = src_mask.to_vec();
        cross_mask.push(true);

        let emb = self.embed_tokens(tgt_input)?;
        let mut state = self.tape.dropout(emb, self.cfg.dropout, rng, train)?;
        for l in 0..self.cfg.layers {
            let layer = self.dec[l];
            let (self_attn, _) =
                self.attention(layer.self_attn, state, state, tgt_input_mask, true, rng, train)?;
            state = self.residual_norm(state, self_attn, layer.self_attn.norm, rng, train)?;
            let (cross, _) =
                self.attention(layer.cross_attn, state, enc_out, &cross_mask, false, rng, train)?;
            state = self.residual_norm(state, cross, layer.cross_attn.norm, rng, train)?;
            state = self.ffn_block(state, layer.ffn, rng, train)?;
        }
        // output projection tied to the embedding table
        self.tape.matmul_nt(state, self.embedding)
    }

    /// Two full forwards over a batch sharing all parameters, one per visual
    /// stream. Each stream consumes its own dropout stream.
    pub fn forward_pair(
        &mut self,
        batch: &Batch,
        rngs: &mut RngBundle,
        train: bool,
    ) -> Result<PairForward> {
        if batch.d_feat != self.cfg.d_feat {
            return Err(Error::Shape(format!(
                "batch feature dim {} against configured {}",
                batch.d_feat, self.cfg.d_feat
            )));
        }
        let h_syn_all = self.project_features_batch(&batch.syn_feats, batch.size)?;
        let h_aut_all = self.project_features_batch(&batch.aut_feats, batch.size)?;

        let mut out = PairForward {
            logits_syn: Vec::with_capacity(batch.size),
            logits_aut: Vec::with_capacity(batch.size),
            h_syn: Vec::with_capacity(batch.size),
            h_aut: Vec::with_capacity(batch.size),
            gold: Vec::with_capacity(batch.size),
            gold_mask: Vec::with_capacity(batch.size),
        };
        for b in 0..batch.size {
            let (src_ids, src_mask) = batch.src_row(b);
            let (tgt_ids, tgt_mask) = batch.tgt_row(b);
            let t = batch.tgt_len;
            let input = &tgt_ids[..t - 1];
            let input_mask = &tgt_mask[1..];
            let gold: Vec<u32> = tgt_ids[1..].to_vec();
            let gold_mask: Vec<bool> = tgt_mask[1..].to_vec();

            let h_syn = self.tape.slice_rows(h_syn_all, b, b + 1)?;
            let h_aut = self.tape.slice_rows(h_aut_all, b, b + 1)?;

            let enc_syn = self.encode(src_ids, src_mask, h_syn, &mut rngs.dropout_syn, train)?;
            let logits_syn =
                self.decode(input, input_mask, enc_syn, src_mask, &mut rngs.dropout_syn, train)?;
            let enc_aut = self.encode(src_ids, src_mask, h_aut, &mut rngs.dropout_aut, train)?;
            let logits_aut =
                self.decode(input, input_mask, enc_aut, src_mask, &mut rngs.dropout_aut, train)?;

            out.h_syn.push(h_syn);
            out.h_aut.push(h_aut);
            out.logits_syn.push(logits_syn);
            out.logits_aut.push(logits_aut);
            out.gold.push(gold);
            out.gold_mask.push(gold_mask);
        }
        Ok(out)
    }
}

fn sinusoid_table(max_positions: usize, d: usize) -> Vec<f32> {
    let mut table = vec![0.0f32; max_positions * d];
    for pos in 0..max_positions {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            table[pos * d + 2 * i] = angle.sin() as f32;
            if 2 * i + 1 < d {
                table[pos * d + 2 * i + 1] = angle.cos() as f32;
            }
        }
    }
    table
}
