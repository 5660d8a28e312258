use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::{keep_branch, ModelParams};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::tokenizer::{embed_in, select_rows, sinusoidal_pos_embed};

pub const LN_EPS: f64 = 1e-6;

/// Which attention produced a recorded map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Encoder,
    SelfDecoder,
    CrossDecoder,
}

/// Post-softmax attention weights of one layer, `[heads, queries, keys]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub kind: AttentionKind,
    pub layer: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f64>,
}

/// Stochastic-depth coins for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropPath {
    pub rate: f64,
    pub seed: u64,
    pub sample: u64,
    pub epoch: u64,
}

impl DropPath {
    /// Residual multiplier for block `i` of `depth`: 0 when dropped,
    /// `1/keep` otherwise. The rate ramps linearly from 0 at the first block.
    pub fn multiplier(&self, i: usize, depth: usize) -> f64 {
        if self.rate <= 0.0 || depth < 2 {
            return 1.0;
        }
        let rate = self.rate * i as f64 / (depth - 1) as f64;
        let keep = 1.0 - rate;
        if keep_branch(self.seed, self.sample, self.epoch, i as u64, keep) {
            1.0 / keep
        } else {
            0.0
        }
    }
}

/// One forward pass recorded on a graph. Parameters are bound lazily, so
/// tensors a pass never touches receive no gradient.
pub struct Forward<'p, T: Scalar> {
    pub g: Graph<T>,
    pub cfg: ModelConfig,
    params: &'p ModelParams<T>,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
    record: bool,
    pub attention: Vec<AttentionMap>,
}

impl<'p, T: Scalar> Forward<'p, T> {
    pub fn new(cfg: ModelConfig, params: &'p ModelParams<T>) -> Self {
        Forward {
            g: Graph::new(),
            cfg,
            params,
            bound: BTreeMap::new(),
            frozen: Vec::new(),
            record: false,
            attention: Vec::new(),
        }
    }

    /// Parameters under these prefixes enter the graph as constants.
    pub fn freeze(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn record_attention(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn bind(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            self.g.constant(t)
        } else {
            self.g.param(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bound parameter variables, by name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of `loss` for every bound, trainable parameter.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter(|(_, &v)| self.g.requires_grad(v))
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect())
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.bind(&format!("{prefix}.weight"))?;
        let b = self.bind(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.bind(&format!("{prefix}.gain"))?;
        let bias = self.bind(&format!("{prefix}.bias"))?;
        self.g.layer_norm(x, gain, bias, T::from_f64(LN_EPS))
    }

    fn split_heads(&mut self, x: Var, heads: usize, transpose: bool) -> Result<Var> {
        let (n, d) = (self.g.shape(x)[0], self.g.shape(x)[1]);
        let x = self.g.reshape(x, &[n, heads, d / heads])?;
        let axes: &[usize] = if transpose { &[1, 2, 0] } else { &[1, 0, 2] };
        self.g.permute(x, axes)
    }

    /// Multi-head attention of `q_in` rows over `kv_in` rows.
    pub fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        prefix: &str,
        heads: usize,
        tag: Option<(AttentionKind, usize)>,
    ) -> Result<Var> {
        let d = self.g.shape(q_in)[1];
        if !d.is_multiple_of(heads) {
            return Err(Error::config("heads", format!("{heads} heads do not divide {d}")));
        }
        let (nq, nk) = (self.g.shape(q_in)[0], self.g.shape(kv_in)[0]);
        if nk == 0 {
            return Err(Error::invalid("attention", "no key/value tokens"));
        }
        let q = self.linear(q_in, &format!("{prefix}.q"))?;
        let k = self.linear(kv_in, &format!("{prefix}.k"))?;
        let v = self.linear(kv_in, &format!("{prefix}.v"))?;
        let q = self.split_heads(q, heads, false)?;
        let k = self.split_heads(k, heads, true)?;
        let v = self.split_heads(v, heads, false)?;
        let scores = self.g.matmul(q, k)?;
        let scores = self.g.scale(scores, T::from_f64(1.0 / ((d / heads) as f64).sqrt()));
        let attn = self.g.softmax(scores, 2)?;
        if self.record {
            if let Some((kind, layer)) = tag {
                self.attention.push(AttentionMap {
                    kind,
                    layer,
                    heads,
                    queries: nq,
                    keys: nk,
                    weights: self.g.value(attn).to_f64_vec(),
                });
            }
        }
        let out = self.g.matmul(attn, v)?;
        let out = self.g.permute(out, &[1, 0, 2])?;
        let out = self.g.reshape(out, &[nq, d])?;
        self.linear(out, &format!("{prefix}.o"))
    }

    pub fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}.fc2"))
    }

    fn residual(&mut self, x: Var, branch: Var, mult: f64) -> Result<Var> {
        let branch = if mult == 1.0 {
            branch
        } else {
            self.g.scale(branch, T::from_f64(mult))
        };
        self.g.add(x, branch)
    }

    /// Pre-norm self-attention block. A zero multiplier skips both branches.
    pub fn block(
        &mut self,
        x: Var,
        prefix: &str,
        heads: usize,
        mult: f64,
        tag: Option<(AttentionKind, usize)>,
    ) -> Result<Var> {
        if mult == 0.0 {
            return Ok(x);
        }
        let h = self.layer_norm(x, &format!("{prefix}.norm1"))?;
        let a = self.attention(h, h, &format!("{prefix}.attn"), heads, tag)?;
        let x = self.residual(x, a, mult)?;
        let h = self.layer_norm(x, &format!("{prefix}.norm2"))?;
        let m = self.mlp(h, &format!("{prefix}.mlp"))?;
        self.residual(x, m, mult)
    }

    /// Cross-attention to `src`, then self-attention, then MLP.
    pub fn cross_block(&mut self, x: Var, src: Var, prefix: &str, heads: usize, layer: usize) -> Result<Var> {
        let q = self.layer_norm(x, &format!("{prefix}.norm_q"))?;
        let kv = self.layer_norm(src, &format!("{prefix}.norm_kv"))?;
        let a = self.attention(
            q,
            kv,
            &format!("{prefix}.xattn"),
            heads,
            Some((AttentionKind::CrossDecoder, layer)),
        )?;
        let x = self.g.add(x, a)?;
        self.block(x, prefix, heads, 1.0, Some((AttentionKind::SelfDecoder, layer)))
    }

    /// Embeds standardized patch rows whose original indices are `token_index`.
    pub fn embed(&mut self, patches: &Tensor<T>, token_index: &[usize]) -> Result<Var> {
        let n = self.cfg.patch.num_tokens();
        if patches.shape() != [token_index.len(), self.cfg.patch.patch_dim()] {
            return Err(Error::shape(
                "embed",
                patches.shape(),
                &[token_index.len(), self.cfg.patch.patch_dim()],
            ));
        }
        if token_index.iter().any(|&i| i >= n) {
            return Err(Error::invalid("embed", "token index out of range"));
        }
        let pos = select_rows(&sinusoidal_pos_embed::<T>(n, self.cfg.d_enc)?, token_index);
        let p = self.g.constant(patches.clone());
        let w = self.bind("embed.weight")?;
        let b = self.bind("embed.bias")?;
        embed_in(&mut self.g, p, w, b, pos)
    }

    /// Joint space-time encoder over the given tokens.
    pub fn encoder(&mut self, x: Var, drop: Option<&DropPath>) -> Result<Var> {
        let cfg = self.cfg;
        let mut x = x;
        for i in 0..cfg.enc_depth {
            let mult = drop.map_or(1.0, |d| d.multiplier(i, cfg.enc_depth));
            x = self.block(
                x,
                &format!("enc.{i}"),
                cfg.enc_heads,
                mult,
                Some((AttentionKind::Encoder, i)),
            )?;
        }
        Ok(x)
    }

    fn dec_pos(&self, token_index: &[usize]) -> Result<Tensor<T>> {
        let n = self.cfg.patch.num_tokens();
        Ok(select_rows(&sinusoidal_pos_embed::<T>(n, self.cfg.d_dec)?, token_index))
    }

    /// Projects encoded visible tokens, scatters them with mask tokens into
    /// all N positions, and adds decoder positional embeddings.
    pub fn assemble_decoder_input(&mut self, encoded: Var, plan: &MaskPlan) -> Result<Var> {
        let n = self.cfg.patch.num_tokens();
        if plan.n_tokens != n || self.g.shape(encoded)[0] != plan.visible.len() {
            return Err(Error::shape(
                "assemble_decoder_input",
                &[self.g.shape(encoded)[0], n],
                &[plan.visible.len(), plan.n_tokens],
            ));
        }
        let d = self.cfg.d_dec;
        let proj = self.linear(encoded, "proj")?;
        let mask = self.bind("mask_token")?;
        let mask = self.g.reshape(mask, &[1, d])?;
        let rows = self.g.concat(&[proj, mask], 0)?;
        let full = self.g.gather_rows(rows, &plan.assembly_index())?;
        let all: Vec<usize> = (0..n).collect();
        let pos = self.g.constant(self.dec_pos(&all)?);
        self.g.add(full, pos)
    }

    /// Projects encoded source tokens into decoder width with their own
    /// decoder positional embeddings.
    pub fn project_source(&mut self, encoded: Var, token_index: &[usize]) -> Result<Var> {
        let proj = self.linear(encoded, "proj")?;
        let pos = self.g.constant(self.dec_pos(token_index)?);
        self.g.add(proj, pos)
    }

    fn output(&mut self, x: Var, norm: &str, rows: Option<&[usize]>) -> Result<Var> {
        let x = self.layer_norm(x, norm)?;
        let x = match rows {
            Some(r) => self.g.gather_rows(x, r)?,
            None => x,
        };
        self.linear(x, "out")
    }

    /// Self-view decoder. Returns per-patch pixel predictions for `rows`
    /// (all N when `None`).
    pub fn self_view_decoder(&mut self, full: Var, rows: Option<&[usize]>) -> Result<Var> {
        let cfg = self.cfg;
        let mut x = full;
        for i in 0..cfg.dec_depth {
            x = self.block(
                x,
                &format!("self_dec.{i}"),
                cfg.dec_heads,
                1.0,
                Some((AttentionKind::SelfDecoder, i)),
            )?;
        }
        self.output(x, "self_dec.norm", rows)
    }

    /// Cross-view decoder: target queries attend to the concatenated
    /// projected source tokens of one or more views.
    pub fn cross_view_decoder(&mut self, full_tv: Var, sources: &[Var], rows: Option<&[usize]>) -> Result<Var> {
        let cfg = self.cfg;
        if sources.is_empty() || sources.iter().all(|&s| self.g.shape(s)[0] == 0) {
            return Err(Error::invalid("cross_view_decoder", "no source tokens"));
        }
        let src = if sources.len() == 1 {
            sources[0]
        } else {
            self.g.concat(sources, 0)?
        };
        let mut x = full_tv;
        for i in 0..cfg.dec_depth {
            x = self.cross_block(x, src, &format!("cross_dec.{i}"), cfg.dec_heads, i)?;
        }
        self.output(x, "cross_dec.norm", rows)
    }

    /// Mean-pooled tokens, LayerNorm, linear. Returns `[n_classes]`.
    pub fn classifier(&mut self, encoded: Var) -> Result<Var> {
        if self.cfg.n_classes == 0 {
            return Err(Error::config("n_classes", "classifier head is not configured"));
        }
        let d = self.cfg.d_enc;
        let pooled = self.g.mean_axis(encoded, 0)?;
        let pooled = self.g.reshape(pooled, &[1, d])?;
        let h = self.layer_norm(pooled, "head.norm")?;
        let logits = self.linear(h, "head.fc")?;
        self.g.reshape(logits, &[self.cfg.n_classes])
    }
}

/// Post-softmax attention row of one query, from a recorded pass.
pub fn attention_map_extract(
    maps: &[AttentionMap],
    kind: AttentionKind,
    layer: usize,
    head: usize,
    query: usize,
) -> Result<Vec<f64>> {
    let m = maps
        .iter()
        .find(|m| m.kind == kind && m.layer == layer)
        .ok_or_else(|| {
            Error::invalid(
                "attention_map_extract",
                "no recorded map for this layer (recording disabled?)",
            )
        })?;
    if head >= m.heads || query >= m.queries {
        return Err(Error::invalid(
            "attention_map_extract",
            format!("head {head} / query {query} out of range"),
        ));
    }
    let start = (head * m.queries + query) * m.keys;
    Ok(m.weights[start..start + m.keys].to_vec())
}
