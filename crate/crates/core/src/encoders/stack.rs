//! Feed-forward Transformer blocks with relative position attention.
//!
//! Each block is post-norm: self-attention, residual, layer norm, then a 1-D
//! convolution feed-forward (kernel `conv_kernel`, width `ffn_mult·d_model`), residual,
//! layer norm. Attention logits add a learned bias per clipped relative offset on the
//! key side, and outputs add a per-offset value embedding; no absolute positions are
//! used anywhere.

use rand::Rng;

use crate::numerics::{filled, lit, normal, xavier, ParamId, ParamStore, Real, Tape, TensorError, Var};

use super::EncoderConfig;

#[derive(Debug, Clone)]
struct AttentionParams {
    query: Vec<ParamId>,
    key: Vec<ParamId>,
    value: Vec<ParamId>,
    rel_key: ParamId,
    rel_value: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    attn: AttentionParams,
    norm1: (ParamId, ParamId),
    conv_w: ParamId,
    conv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    blocks: Vec<Block>,
    head_dim: usize,
    clip: usize,
    kernel: usize,
}

impl EncoderStack {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        layers: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let dh = d / cfg.heads;
        let ffn = d * cfg.ffn_mult;
        let rel_rows = 2 * cfg.rel_clip + 1;
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                let per_head = |store: &mut ParamStore<F>, rng: &mut R, what: &str| -> Vec<ParamId> {
                    (0..cfg.heads)
                        .map(|h| store.add(format!("{p}.attn.{what}.{h}"), xavier(rng, d, dh)))
                        .collect()
                };
                let query = per_head(store, rng, "query");
                let key = per_head(store, rng, "key");
                let value = per_head(store, rng, "value");
                let attn = AttentionParams {
                    query,
                    key,
                    value,
                    rel_key: store.add(format!("{p}.attn.rel_key"), normal(rng, vec![rel_rows, dh], (dh as f64).powf(-0.5))),
                    rel_value: store.add(format!("{p}.attn.rel_value"), normal(rng, vec![rel_rows, dh], (dh as f64).powf(-0.5))),
                    out_w: store.add(format!("{p}.attn.out.weight"), xavier(rng, d, d)),
                    out_b: store.add(format!("{p}.attn.out.bias"), filled(vec![d], 0.0)),
                };
                Block {
                    attn,
                    norm1: (
                        store.add(format!("{p}.norm1.gamma"), filled(vec![d], 1.0)),
                        store.add(format!("{p}.norm1.beta"), filled(vec![d], 0.0)),
                    ),
                    conv_w: store.add(format!("{p}.ffn.conv.weight"), xavier(rng, cfg.conv_kernel * d, ffn)),
                    conv_b: store.add(format!("{p}.ffn.conv.bias"), filled(vec![ffn], 0.0)),
                    proj_w: store.add(format!("{p}.ffn.proj.weight"), xavier(rng, ffn, d)),
                    proj_b: store.add(format!("{p}.ffn.proj.bias"), filled(vec![d], 0.0)),
                    norm2: (
                        store.add(format!("{p}.norm2.gamma"), filled(vec![d], 1.0)),
                        store.add(format!("{p}.norm2.beta"), filled(vec![d], 0.0)),
                    ),
                }
            })
            .collect();
        Self {
            blocks,
            head_dim: dh,
            clip: cfg.rel_clip,
            kernel: cfg.conv_kernel,
        }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    fn head_logits<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        pv: &[Var],
        a: &AttentionParams,
        h: usize,
        x: Var,
    ) -> Result<Var, TensorError> {
        let q = tape.matmul(x, pv[a.query[h].0])?;
        let k = tape.matmul(x, pv[a.key[h].0])?;
        let content = tape.matmul_bt(q, k)?;
        let by_offset = tape.matmul_bt(q, pv[a.rel_key.0])?;
        let positional = tape.rel_gather(by_offset, self.clip)?;
        let logits = tape.add(content, positional)?;
        Ok(tape.scale(logits, lit((self.head_dim as f64).powf(-0.5))))
    }

    /// Scaled pre-softmax attention logits of every head in block `layer`, whose input
    /// is `x`.
    pub fn attention_logits<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        pv: &[Var],
        layer: usize,
        x: Var,
    ) -> Result<Vec<Var>, TensorError> {
        let a = &self.blocks[layer].attn;
        (0..a.query.len()).map(|h| self.head_logits(tape, pv, a, h, x)).collect()
    }

    fn attention<F: Real>(&self, tape: &mut Tape<'_, F>, pv: &[Var], a: &AttentionParams, x: Var) -> Result<Var, TensorError> {
        let mut heads = Vec::with_capacity(a.query.len());
        for h in 0..a.query.len() {
            let logits = self.head_logits(tape, pv, a, h, x)?;
            let probs = tape.softmax_lastdim(logits)?;
            let v = tape.matmul(x, pv[a.value[h].0])?;
            let content = tape.matmul(probs, v)?;
            let per_offset = tape.rel_scatter(probs, self.clip)?;
            let positional = tape.matmul(per_offset, pv[a.rel_value.0])?;
            heads.push(tape.add(content, positional)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let out = tape.matmul(cat, pv[a.out_w.0])?;
        tape.add_row(out, pv[a.out_b.0])
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, pv: &[Var], mut x: Var) -> Result<Var, TensorError> {
        for b in &self.blocks {
            let att = self.attention(tape, pv, &b.attn, x)?;
            let res = tape.add(x, att)?;
            x = tape.layer_norm(res, pv[b.norm1.0 .0], pv[b.norm1.1 .0])?;

            let win = tape.unfold(x, self.kernel)?;
            let hid = tape.matmul(win, pv[b.conv_w.0])?;
            let hid = tape.add_row(hid, pv[b.conv_b.0])?;
            let hid = tape.relu(hid);
            let ff = tape.matmul(hid, pv[b.proj_w.0])?;
            let ff = tape.add_row(ff, pv[b.proj_b.0])?;
            let res = tape.add(x, ff)?;
            x = tape.layer_norm(res, pv[b.norm2.0 .0], pv[b.norm2.1 .0])?;
        }
        Ok(x)
    }
}
