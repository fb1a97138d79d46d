//! A small pre-norm Transformer encoder-decoder with hand-written
//! reverse-mode gradients, Adam, greedy decoding and checkpoints.

mod checkpoint;
mod ops;
mod optim;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::rng::stage_rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use ops::{softmax_with_temperature, ProbDist};
pub use optim::{optimizer_step, LrSchedule, OptimState};

pub(crate) use ops::{log_softmax, softmax_in_place};

use ops::{
    add_assign, add_at_b, attention, attention_back, ffn, ffn_back, layer_norm, layer_norm_back,
    matmul, matmul_bt, AttnCache, AttnGrads, AttnWeights, FfnCache, FfnGrads, NormCache,
};

pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Longest source or decoder input the positional tables cover.
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            d_model: 64,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 64,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.src_vocab <= EOS || self.tgt_vocab <= EOS {
            return bad("vocabularies must include the reserved tokens");
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        Ok(())
    }

    fn norm_size(&self) -> usize {
        2 * self.d_model
    }

    fn attn_size(&self) -> usize {
        4 * self.d_model * self.d_model
    }

    fn ffn_size(&self) -> usize {
        2 * self.d_model * self.d_ff + self.d_ff + self.d_model
    }
}

#[derive(Clone, Copy, Debug)]
struct EncLayout {
    ln1: usize,
    attn: usize,
    ln2: usize,
    ffn: usize,
}

#[derive(Clone, Copy, Debug)]
struct DecLayout {
    ln1: usize,
    self_attn: usize,
    ln2: usize,
    cross: usize,
    ln3: usize,
    ffn: usize,
}

/// Offsets of every tensor block inside the flat parameter vector.
#[derive(Clone, Debug)]
struct Layout {
    src_emb: usize,
    src_pos: usize,
    tgt_emb: usize,
    tgt_pos: usize,
    enc: Vec<EncLayout>,
    enc_norm: usize,
    dec: Vec<DecLayout>,
    dec_norm: usize,
    out_w: usize,
    out_b: usize,
    norms: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(s: &ModelShape) -> Self {
        let d = s.d_model;
        let mut next = 0;
        let mut take = |len: usize| {
            let off = next;
            next += len;
            off
        };
        let mut norms = Vec::new();
        let src_emb = take(s.src_vocab * d);
        let src_pos = take(s.max_len * d);
        let tgt_emb = take(s.tgt_vocab * d);
        let tgt_pos = take(s.max_len * d);
        let mut enc = Vec::new();
        for _ in 0..s.enc_layers {
            let l = EncLayout {
                ln1: take(s.norm_size()),
                attn: take(s.attn_size()),
                ln2: take(s.norm_size()),
                ffn: take(s.ffn_size()),
            };
            norms.extend([l.ln1, l.ln2]);
            enc.push(l);
        }
        let enc_norm = take(s.norm_size());
        let mut dec = Vec::new();
        for _ in 0..s.dec_layers {
            let l = DecLayout {
                ln1: take(s.norm_size()),
                self_attn: take(s.attn_size()),
                ln2: take(s.norm_size()),
                cross: take(s.attn_size()),
                ln3: take(s.norm_size()),
                ffn: take(s.ffn_size()),
            };
            norms.extend([l.ln1, l.ln2, l.ln3]);
            dec.push(l);
        }
        let dec_norm = take(s.norm_size());
        norms.extend([enc_norm, dec_norm]);
        let out_w = take(d * s.tgt_vocab);
        let out_b = take(s.tgt_vocab);
        Self {
            src_emb,
            src_pos,
            tgt_emb,
            tgt_pos,
            enc,
            enc_norm,
            dec,
            dec_norm,
            out_w,
            out_b,
            norms,
            total: next,
        }
    }
}

/// Per-position logits, `positions × vocab`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub positions: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.vocab)
    }
}

struct EncLayerCache {
    ln1: NormCache,
    attn: AttnCache,
    ln2: NormCache,
    ffn: FfnCache,
}

struct DecLayerCache {
    ln1: NormCache,
    self_attn: AttnCache,
    ln2: NormCache,
    cross: AttnCache,
    ln3: NormCache,
    ffn: FfnCache,
}

/// Activations kept from a forward pass for the matching backward pass.
pub struct ForwardCache {
    src: Vec<TokenId>,
    dec_in: Vec<TokenId>,
    enc: Vec<EncLayerCache>,
    enc_norm: NormCache,
    dec: Vec<DecLayerCache>,
    dec_norm: NormCache,
    dec_out: Vec<f64>,
}

/// All trainable weights, stored flat.
#[derive(Clone, Debug)]
pub struct ModelParams {
    shape: ModelShape,
    layout: Layout,
    values: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl ModelParams {
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(&shape);
        let mut rng = stage_rng(seed, "model/init");
        let mut values: Vec<f64> = (0..layout.total)
            .map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE))
            .collect();
        let d = shape.d_model;
        for &off in &layout.norms {
            values[off..off + d].fill(1.0);
            values[off + d..off + 2 * d].fill(0.0);
        }
        Ok(Self {
            shape,
            layout,
            values,
        })
    }

    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(&shape);
        if values.len() != layout.total {
            return Err(Error::LengthMismatch {
                left: layout.total,
                right: values.len(),
            });
        }
        Ok(Self {
            shape,
            layout,
            values,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// Zeroes the output projection and bias so every position predicts
    /// the uniform distribution.
    pub fn zero_output_projection(&mut self) {
        let l = &self.layout;
        let end = l.out_b + self.shape.tgt_vocab;
        self.values[l.out_w..end].fill(0.0);
    }

    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.shape.tgt_vocab {
            return Err(Error::LengthMismatch {
                left: self.shape.tgt_vocab,
                right: bias.len(),
            });
        }
        let off = self.layout.out_b;
        self.values[off..off + bias.len()].copy_from_slice(bias);
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId], vocab: usize, what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!("empty {what} sequence")));
        }
        if ids.len() > self.shape.max_len {
            return Err(Error::InvalidArgument(format!(
                "{what} length {} exceeds max_len {}",
                ids.len(),
                self.shape.max_len
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::OutOfVocab {
                id: id,
                vocab_size: vocab,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], emb: usize, pos: usize) -> Vec<f64> {
        let d = self.shape.d_model;
        let v = &self.values;
        let mut x = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            let e = emb + id * d;
            let p = pos + i * d;
            for j in 0..d {
                row[j] = v[e + j] + v[p + j];
            }
        }
        x
    }

    fn norm(&self, off: usize) -> (&[f64], &[f64]) {
        let d = self.shape.d_model;
        (&self.values[off..off + d], &self.values[off + d..off + 2 * d])
    }

    fn attn(&self, off: usize) -> AttnWeights<'_> {
        let dd = self.shape.d_model * self.shape.d_model;
        let b = &self.values[off..off + 4 * dd];
        AttnWeights {
            wq: &b[..dd],
            wk: &b[dd..2 * dd],
            wv: &b[2 * dd..3 * dd],
            wo: &b[3 * dd..],
        }
    }

    fn ffn_weights(&self, off: usize) -> [&[f64]; 4] {
        let (d, f) = (self.shape.d_model, self.shape.d_ff);
        let b = &self.values[off..off + self.shape.ffn_size()];
        let (w1, rest) = b.split_at(d * f);
        let (b1, rest) = rest.split_at(f);
        let (w2, b2) = rest.split_at(f * d);
        [w1, b1, w2, b2]
    }

    fn run_norm(&self, x: &[f64], off: usize) -> (Vec<f64>, NormCache) {
        let (g, b) = self.norm(off);
        layer_norm(x, self.shape.d_model, g, b)
    }

    fn run_ffn(&self, x: &[f64], off: usize) -> (Vec<f64>, FfnCache) {
        let [w1, b1, w2, b2] = self.ffn_weights(off);
        ffn(x, self.shape.d_model, self.shape.d_ff, w1, b1, w2, b2)
    }

    fn encode(&self, src: &[TokenId]) -> (Vec<f64>, Vec<EncLayerCache>, NormCache) {
        let d = self.shape.d_model;
        let l = &self.layout;
        let mut x = self.embed(src, l.src_emb, l.src_pos);
        let mut caches = Vec::with_capacity(l.enc.len());
        for layer in &l.enc {
            let (n1, ln1) = self.run_norm(&x, layer.ln1);
            let (a, attn) = attention(&n1, &n1, d, &self.attn(layer.attn), false);
            add_assign(&mut x, &a);
            let (n2, ln2) = self.run_norm(&x, layer.ln2);
            let (f, ffn) = self.run_ffn(&n2, layer.ffn);
            add_assign(&mut x, &f);
            caches.push(EncLayerCache {
                ln1,
                attn,
                ln2,
                ffn,
            });
        }
        let (memory, enc_norm) = self.run_norm(&x, l.enc_norm);
        (memory, caches, enc_norm)
    }

    fn decode_states(
        &self,
        memory: &[f64],
        dec_in: &[TokenId],
    ) -> (Vec<f64>, Vec<DecLayerCache>, NormCache) {
        let d = self.shape.d_model;
        let l = &self.layout;
        let mut x = self.embed(dec_in, l.tgt_emb, l.tgt_pos);
        let mut caches = Vec::with_capacity(l.dec.len());
        for layer in &l.dec {
            let (n1, ln1) = self.run_norm(&x, layer.ln1);
            let (a, self_attn) = attention(&n1, &n1, d, &self.attn(layer.self_attn), true);
            add_assign(&mut x, &a);
            let (n2, ln2) = self.run_norm(&x, layer.ln2);
            let (c, cross) = attention(&n2, memory, d, &self.attn(layer.cross), false);
            add_assign(&mut x, &c);
            let (n3, ln3) = self.run_norm(&x, layer.ln3);
            let (f, ffn) = self.run_ffn(&n3, layer.ffn);
            add_assign(&mut x, &f);
            caches.push(DecLayerCache {
                ln1,
                self_attn,
                ln2,
                cross,
                ln3,
                ffn,
            });
        }
        let (out, dec_norm) = self.run_norm(&x, l.dec_norm);
        (out, caches, dec_norm)
    }

    fn project(&self, states: &[f64]) -> Logits {
        let (d, v) = (self.shape.d_model, self.shape.tgt_vocab);
        let l = &self.layout;
        let m = states.len() / d;
        let mut data = matmul(states, &self.values[l.out_w..l.out_w + d * v], m, d, v);
        let bias = &self.values[l.out_b..l.out_b + v];
        for row in data.chunks_mut(v) {
            add_assign(row, bias);
        }
        Logits {
            positions: m,
            vocab: v,
            data,
        }
    }

    /// Logits for every position of `tgt`. The decoder sees `BOS` followed
    /// by `tgt` without its last token, so row `i` depends only on `src` and
    /// `tgt[..i]`.
    pub fn forward(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<Logits> {
        Ok(self.forward_train(src, tgt)?.0)
    }

    pub fn forward_train(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<(Logits, ForwardCache)> {
        self.check_ids(src, self.shape.src_vocab, "source")?;
        self.check_ids(tgt, self.shape.tgt_vocab, "target")?;
        let dec_in: Vec<TokenId> = std::iter::once(BOS)
            .chain(tgt[..tgt.len() - 1].iter().copied())
            .collect();
        let (memory, enc, enc_norm) = self.encode(src);
        let (dec_out, dec, dec_norm) = self.decode_states(&memory, &dec_in);
        let logits = self.project(&dec_out);
        let cache = ForwardCache {
            src: src.to_vec(),
            dec_in,
            enc,
            enc_norm,
            dec,
            dec_norm,
            dec_out,
        };
        Ok((logits, cache))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) -> Result<()> {
        let (d, v) = (self.shape.d_model, self.shape.tgt_vocab);
        let n = cache.dec_in.len();
        if dlogits.len() != n * v {
            return Err(Error::LengthMismatch {
                left: n * v,
                right: dlogits.len(),
            });
        }
        if grad.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                left: self.values.len(),
                right: grad.len(),
            });
        }
        if let Some(position) = dlogits.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "logit gradient",
                position,
            });
        }
        let l = &self.layout;
        add_at_b(&mut grad[l.out_w..l.out_w + d * v], &cache.dec_out, dlogits, n, d, v);
        for row in dlogits.chunks(v) {
            add_assign(&mut grad[l.out_b..l.out_b + v], row);
        }
        let dy = matmul_bt(dlogits, &self.values[l.out_w..l.out_w + d * v], n, v, d);
        let mut dx = self.norm_back(&dy, &cache.dec_norm, l.dec_norm, grad);

        let s = cache.src.len();
        let mut dmem = vec![0.0; s * d];
        for (layer, c) in l.dec.iter().zip(&cache.dec).rev() {
            let dn3 = self.ffn_back(&dx, &c.ffn, layer.ffn, grad);
            add_assign(&mut dx, &self.norm_back(&dn3, &c.ln3, layer.ln3, grad));
            let (dq, dkv) = self.attn_back(&dx, &c.cross, layer.cross, grad);
            add_assign(&mut dmem, &dkv);
            add_assign(&mut dx, &self.norm_back(&dq, &c.ln2, layer.ln2, grad));
            let (mut dn1, dkv) = self.attn_back(&dx, &c.self_attn, layer.self_attn, grad);
            add_assign(&mut dn1, &dkv);
            add_assign(&mut dx, &self.norm_back(&dn1, &c.ln1, layer.ln1, grad));
        }
        self.embed_back(&dx, &cache.dec_in, l.tgt_emb, l.tgt_pos, grad);

        let mut dx = self.norm_back(&dmem, &cache.enc_norm, l.enc_norm, grad);
        for (layer, c) in l.enc.iter().zip(&cache.enc).rev() {
            let dn2 = self.ffn_back(&dx, &c.ffn, layer.ffn, grad);
            add_assign(&mut dx, &self.norm_back(&dn2, &c.ln2, layer.ln2, grad));
            let (mut dn1, dkv) = self.attn_back(&dx, &c.attn, layer.attn, grad);
            add_assign(&mut dn1, &dkv);
            add_assign(&mut dx, &self.norm_back(&dn1, &c.ln1, layer.ln1, grad));
        }
        self.embed_back(&dx, &cache.src, l.src_emb, l.src_pos, grad);
        Ok(())
    }

    fn norm_back(&self, dy: &[f64], c: &NormCache, off: usize, grad: &mut [f64]) -> Vec<f64> {
        let d = self.shape.d_model;
        let (g, _) = self.norm(off);
        let (dg, db) = grad[off..off + 2 * d].split_at_mut(d);
        layer_norm_back(dy, c, d, g, dg, db)
    }

    fn attn_back(
        &self,
        dout: &[f64],
        c: &AttnCache,
        off: usize,
        grad: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let dd = self.shape.d_model * self.shape.d_model;
        let block = &mut grad[off..off + 4 * dd];
        let (wq, rest) = block.split_at_mut(dd);
        let (wk, rest) = rest.split_at_mut(dd);
        let (wv, wo) = rest.split_at_mut(dd);
        attention_back(
            dout,
            c,
            self.shape.d_model,
            &self.attn(off),
            AttnGrads { wq, wk, wv, wo },
        )
    }

    fn ffn_back(&self, dout: &[f64], c: &FfnCache, off: usize, grad: &mut [f64]) -> Vec<f64> {
        let (d, f) = (self.shape.d_model, self.shape.d_ff);
        let [w1, _, w2, _] = self.ffn_weights(off);
        let block = &mut grad[off..off + self.shape.ffn_size()];
        let (gw1, rest) = block.split_at_mut(d * f);
        let (gb1, rest) = rest.split_at_mut(f);
        let (gw2, gb2) = rest.split_at_mut(f * d);
        ffn_back(
            dout,
            c,
            d,
            f,
            w1,
            w2,
            FfnGrads {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
        )
    }

    fn embed_back(&self, dx: &[f64], ids: &[TokenId], emb: usize, pos: usize, grad: &mut [f64]) {
        let d = self.shape.d_model;
        for (i, &id) in ids.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            add_assign(&mut grad[emb + id * d..emb + (id + 1) * d], row);
            add_assign(&mut grad[pos + i * d..pos + (i + 1) * d], row);
        }
    }

    /// Greedy decoding: appends the argmax token (lowest id on ties) until
    /// `EOS` or `max_len` tokens. The returned ids exclude `EOS`.
    pub fn decode_greedy(&self, src: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        self.check_ids(src, self.shape.src_vocab, "source")?;
        let max_len = max_len.min(self.shape.max_len);
        let (memory, _, _) = self.encode(src);
        let mut out: Vec<TokenId> = Vec::new();
        while out.len() < max_len {
            let dec_in: Vec<TokenId> = std::iter::once(BOS).chain(out.iter().copied()).collect();
            let (states, _, _) = self.decode_states(&memory, &dec_in);
            let d = self.shape.d_model;
            let logits = self.project(&states[(dec_in.len() - 1) * d..]);
            let next = argmax(logits.row(0));
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
