use aesvl_autograd::{Graph, Real, Tensor, Var};

use super::{Bound, ModelConfig};
use crate::error::{Error, Result};
use crate::tokenizer::{BOS, EOS, PAD};

/// Splits `[B, H, W, C]` images into `[B, K, P*P*C]` patch rows, patches in
/// row-major order, each patch flattened as (row, column, channel).
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Invalid(format!("patchify expects [B, H, W, C], got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Invalid(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let row = patch * patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..patch {
                    let start = ((bi * h + py * patch + y) * w + px * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Ok(Tensor::new(&[b, ph * pw, row], out)?)
}

/// Right-padded token batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `batch * len` ids, row-major.
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    /// Unpadded length of each sequence.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("token batch needs nonempty sequences".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + len - s.len(), PAD);
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            len,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }
}

/// Forward passes over parameters bound into a graph.
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a Bound,
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a ModelConfig, p: &'a Bound) -> Self {
        Self { cfg, p }
    }

    fn linear<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let w = self.p.get(&format!("{name}.weight"));
        let b = self.p.get(&format!("{name}.bias"));
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn ln<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p.get(&format!("{name}.gamma"));
        let beta = self.p.get(&format!("{name}.beta"));
        Ok(g.layer_norm(x, gamma, beta)?)
    }

    /// `[B, T, D] -> [B*H, T, D/H]`
    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let x = g.reshape(x, &[s[0], s[1], h, dh])?;
        let x = g.swap_axes12(x)?;
        Ok(g.reshape(x, &[s[0] * h, s[1], dh])?)
    }

    /// Multi-head attention of `xq` (`[B, Tq, D]`) over `xkv` (`[B, Tk, D]`).
    pub fn attention<T: Real>(&self, g: &mut Graph<T>, name: &str, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
        let (b, tq) = (g.shape(xq)[0], g.shape(xq)[1]);
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let q = self.linear(g, xq, &format!("{name}.q"))?;
        let k = self.linear(g, xkv, &format!("{name}.k"))?;
        let v = self.linear(g, xkv, &format!("{name}.v"))?;
        let (q, k, v) = (
            self.split_heads(g, q)?,
            self.split_heads(g, k)?,
            self.split_heads(g, v)?,
        );
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        let w = g.masked_softmax(scores, causal)?;
        let o = g.bmm(w, v, false)?;
        let o = g.reshape(o, &[b, h, tq, dh])?;
        let o = g.swap_axes12(o)?;
        let o = g.reshape(o, &[b, tq, h * dh])?;
        self.linear(g, o, &format!("{name}.o"))
    }

    fn mlp<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{name}.fc1"))?;
        let h = g.gelu(h)?;
        self.linear(g, h, &format!("{name}.fc2"))
    }

    /// Pre-norm transformer block.
    fn block<T: Real>(&self, g: &mut Graph<T>, x: Var, name: &str, causal: bool) -> Result<Var> {
        let h = self.ln(g, x, &format!("{name}.ln1"))?;
        let a = self.attention(g, &format!("{name}.attn"), h, h, causal)?;
        let x = g.add(x, a)?;
        let h = self.ln(g, x, &format!("{name}.ln2"))?;
        let m = self.mlp(g, h, &format!("{name}.mlp"))?;
        Ok(g.add(x, m)?)
    }

    /// `[B, H, W, C]` images to visual embeddings `[B, K, D]`.
    pub fn encode_image<T: Real>(&self, g: &mut Graph<T>, images: &Tensor<T>) -> Result<Var> {
        let c = self.cfg;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.image_size || s[2] != c.image_size || s[3] != c.channels {
            return Err(Error::Invalid(format!(
                "image batch {s:?} does not match {0}x{0}x{1}",
                c.image_size, c.channels
            )));
        }
        let patches = g.constant(patchify(images, c.patch_size)?);
        let x = self.linear(g, patches, "image.patch")?;
        let mut x = g.add(x, self.p.get("image.pos"))?;
        for i in 0..c.encoder_layers {
            x = self.block(g, x, &format!("image.layer{i}"), false)?;
        }
        self.ln(g, x, "image.ln_final")
    }

    /// Learned-query attention pooling: `[B, K, D] -> [B, n_q, D]`.
    pub fn attentional_pool<T: Real>(&self, g: &mut Graph<T>, v: Var, pooler: &str) -> Result<Var> {
        let b = g.shape(v)[0];
        let q = g.expand_leading(self.p.get(&format!("pool.{pooler}.query")), b)?;
        self.attention(g, &format!("pool.{pooler}.attn"), q, v, false)
    }

    /// Unnormalized contrastive image embedding `[B, D]`.
    pub fn image_embedding<T: Real>(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let b = g.shape(v)[0];
        let pooled = self.attentional_pool(g, v, "con")?;
        Ok(g.reshape(pooled, &[b, self.cfg.dim])?)
    }

    /// Causal unimodal text stack: `[B, T, D]`.
    pub fn encode_text_unimodal<T: Real>(&self, g: &mut Graph<T>, tokens: &TokenBatch) -> Result<Var> {
        let c = self.cfg;
        if tokens.len > c.max_text_length {
            return Err(Error::Invalid(format!(
                "token sequence of length {} exceeds max_text_length {}",
                tokens.len, c.max_text_length
            )));
        }
        let e = g.embedding(self.p.get("text.token_emb"), &tokens.ids)?;
        let e = g.reshape(e, &[tokens.batch, tokens.len, c.dim])?;
        let positions: Vec<usize> = (0..tokens.len).collect();
        let pos = g.select_rows(self.p.get("text.pos"), &positions)?;
        let mut x = g.add(e, pos)?;
        for i in 0..c.unimodal_layers {
            x = self.block(g, x, &format!("text.uni{i}"), true)?;
        }
        Ok(x)
    }

    /// Unnormalized contrastive text embedding `[B, D]` read at each
    /// sequence's final (`<cls>`) position.
    pub fn text_embedding<T: Real>(&self, g: &mut Graph<T>, w: Var, tokens: &TokenBatch) -> Result<Var> {
        let flat = g.reshape(w, &[tokens.batch * tokens.len, self.cfg.dim])?;
        let idx: Vec<usize> = tokens
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &l)| b * tokens.len + l - 1)
            .collect();
        let cls = g.select_rows(flat, &idx)?;
        let h = self.ln(g, cls, "text.cls_ln")?;
        self.linear(g, h, "text.proj")
    }

    /// Caption logits `[B, T, vocab]` for generative inputs, cross-attending
    /// to the generative pooler output `pooled` (`[B, n_q, D]`).
    pub fn decode_multimodal<T: Real>(&self, g: &mut Graph<T>, tokens: &TokenBatch, pooled: Var) -> Result<Var> {
        let ps = g.shape(pooled);
        if ps.len() != 3 || ps[0] != tokens.batch || ps[2] != self.cfg.dim {
            return Err(Error::Invalid(format!(
                "pooled image features {ps:?} do not match a batch of {}",
                tokens.batch
            )));
        }
        let mut x = self.encode_text_unimodal(g, tokens)?;
        for i in 0..self.cfg.multimodal_layers {
            let p = format!("text.multi{i}");
            let h = self.ln(g, x, &format!("{p}.ln1"))?;
            let a = self.attention(g, &format!("{p}.self_attn"), h, h, true)?;
            x = g.add(x, a)?;
            let h = self.ln(g, x, &format!("{p}.ln2"))?;
            let a = self.attention(g, &format!("{p}.cross_attn"), h, pooled, false)?;
            x = g.add(x, a)?;
            let h = self.ln(g, x, &format!("{p}.ln3"))?;
            let m = self.mlp(g, h, &format!("{p}.mlp"))?;
            x = g.add(x, m)?;
        }
        let h = self.ln(g, x, "text.ln_final")?;
        self.linear(g, h, "text.head")
    }
}

/// Normalized contrastive image embeddings `x` for a batch, plus the
/// unnormalized pooler output.
pub fn image_embeddings<T: Real>(
    cfg: &ModelConfig,
    params: &super::ParamStore<T>,
    images: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let net = Net::new(cfg, &bound);
    let v = net.encode_image(&mut g, images)?;
    let raw = net.image_embedding(&mut g, v)?;
    let x = g.l2_normalize(raw)?;
    Ok((g.value(x).clone(), g.value(raw).clone()))
}

/// Normalized contrastive text embeddings `y` for contrastive-mode sequences.
pub fn text_embeddings<T: Real>(
    cfg: &ModelConfig,
    params: &super::ParamStore<T>,
    seqs: &[Vec<usize>],
) -> Result<Tensor<T>> {
    let tokens = TokenBatch::from_sequences(seqs)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let net = Net::new(cfg, &bound);
    let w = net.encode_text_unimodal(&mut g, &tokens)?;
    let t = net.text_embedding(&mut g, w, &tokens)?;
    let y = g.l2_normalize(t)?;
    Ok(g.value(y).clone())
}

/// Greedy decoding from `<bos>` for one `[1, H, W, C]` image. Stops at
/// `<eos>` or after `max_len` generated tokens; returns the generated ids
/// without `<bos>`/`<eos>`. Only ids below `vocab_len` are candidates, since
/// the embedding table may be larger than the vocabulary.
pub fn generate_caption<T: Real>(
    cfg: &ModelConfig,
    params: &super::ParamStore<T>,
    image: &Tensor<T>,
    max_len: usize,
    vocab_len: usize,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let net = Net::new(cfg, &bound);
    let v = net.encode_image(&mut g, image)?;
    let pooled = net.attentional_pool(&mut g, v, "gen")?;
    let limit = max_len.min(cfg.max_text_length - 1);
    let mut seq = vec![BOS];
    let mut out = Vec::new();
    while out.len() < limit {
        let tokens = TokenBatch::from_sequences(std::slice::from_ref(&seq))?;
        let logits = net.decode_multimodal(&mut g, &tokens, pooled)?;
        let vocab = cfg.vocab_size;
        let row = &g.value(logits).data()[(seq.len() - 1) * vocab..seq.len() * vocab];
        let last = &row[..vocab_len.min(vocab)];
        let mut best = 0;
        for (i, &z) in last.iter().enumerate() {
            if z > last[best] {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
        seq.push(best);
    }
    Ok(out)
}
