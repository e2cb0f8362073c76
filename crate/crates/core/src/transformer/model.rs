use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TransformerConfig, TransformerError};
use crate::autodiff::{Graph, ParamSet, Scalar, Tensor, TensorError, Var};
use crate::bpe::PAD_ID;
use crate::seed;

/// Additive attention mask value for blocked positions.
pub const MASK_VALUE: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Which halves of the encoder–decoder a parameter set carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parts {
    pub encoder: bool,
    pub decoder: bool,
}

impl Parts {
    pub const FULL: Self = Self {
        encoder: true,
        decoder: true,
    };
    pub const ENCODER: Self = Self {
        encoder: true,
        decoder: false,
    };
    pub const DECODER: Self = Self {
        encoder: false,
        decoder: true,
    };
}

/// What a checkpoint records about the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: TransformerConfig,
    pub parts: Parts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<F> {
    pub config: TransformerConfig,
    pub parts: Parts,
    pub params: ParamSet<F>,
}

fn xavier<F: Scalar>(shape: &[usize], seed: u64) -> Tensor<F> {
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..fan_in * fan_out).map(|_| F::of(rng.random_range(-a..a))).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

/// Attention projections of one attention block.
pub const ATTN_PROJ: [&str; 4] = ["q", "k", "v", "o"];

/// Parameter names and shapes in construction order.
pub fn param_shapes(c: &TransformerConfig, parts: Parts) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![("emb".to_string(), vec![c.vocab_size, d])];
    let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.g"), vec![d]));
        out.push((format!("{p}.b"), vec![d]));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        for m in ATTN_PROJ {
            out.push((format!("{p}.{m}.w"), vec![d, d]));
            out.push((format!("{p}.{m}.b"), vec![d]));
        }
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.ff1.w"), vec![d, f]));
        out.push((format!("{p}.ff1.b"), vec![f]));
        out.push((format!("{p}.ff2.w"), vec![f, d]));
        out.push((format!("{p}.ff2.b"), vec![d]));
    };
    if parts.encoder {
        for l in 0..c.num_layers {
            let p = format!("enc.{l}");
            ln(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.self"));
            ln(&mut out, &format!("{p}.ln2"));
            ffn(&mut out, &p);
        }
        ln(&mut out, "enc.ln");
    }
    if parts.decoder {
        for l in 0..c.num_layers {
            let p = format!("dec.{l}");
            ln(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.self"));
            ln(&mut out, &format!("{p}.ln2"));
            attn(&mut out, &format!("{p}.cross"));
            ln(&mut out, &format!("{p}.ln3"));
            ffn(&mut out, &p);
        }
        ln(&mut out, "dec.ln");
        if !c.tie_softmax {
            out.push(("out.w".to_string(), vec![d, c.vocab_size]));
        }
    }
    out
}

/// Full encoder–decoder model.
pub fn build_model<F: Scalar>(config: &TransformerConfig, seed: u64) -> Result<TransformerModel<F>, TransformerError> {
    build_parts(config, Parts::FULL, seed)
}

/// Xavier-uniform matrices, unit layer-norm gains, zero biases. Each
/// tensor draws from its own stream keyed by name, so shared names get
/// identical values across part selections.
pub fn build_parts<F: Scalar>(
    config: &TransformerConfig,
    parts: Parts,
    seed: u64,
) -> Result<TransformerModel<F>, TransformerError> {
    config.validate()?;
    let mut params = ParamSet::new();
    for (name, shape) in param_shapes(config, parts) {
        let t = if shape.len() == 2 {
            xavier(&shape, seed::derive(seed, &format!("init/{name}"), 0))
        } else if name.ends_with(".g") {
            Tensor::ones(&shape)
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t);
    }
    Ok(TransformerModel {
        config: config.clone(),
        parts,
        params,
    })
}

impl<F: Scalar> TransformerModel<F> {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            config: self.config.clone(),
            parts: self.parts,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn from_params(spec: ModelSpec, params: ParamSet<F>) -> Result<Self, TransformerError> {
        spec.config.validate()?;
        for (name, shape) in param_shapes(&spec.config, spec.parts) {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(TransformerError::Integrity(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(TransformerError::Integrity(format!("missing parameter {name}"))),
            }
        }
        Ok(Self {
            config: spec.config,
            parts: spec.parts,
            params,
        })
    }

    pub fn cast<G: Scalar>(&self) -> TransformerModel<G> {
        TransformerModel {
            config: self.config.clone(),
            parts: self.parts,
            params: self.params.cast(),
        }
    }
}

/// Binds named parameters from one or more parameter sets onto a graph.
///
/// Each name is bound once per graph. Parameters from trainable sources
/// become graph parameters, the rest constants. When `{name}.lora_a` and
/// `{name}.lora_b` exist, projections through `{name}` gain the low-rank
/// path `scale·(x·A)·B`.
pub struct Binder<'a, F> {
    sources: Vec<(&'a ParamSet<F>, bool)>,
    vars: BTreeMap<String, (Var, bool)>,
    lora_scale: F,
}

impl<'a, F: Scalar> Binder<'a, F> {
    pub fn new() -> Self {
        Self {
            sources: Vec::new(),
            vars: BTreeMap::new(),
            lora_scale: F::one(),
        }
    }

    pub fn source(mut self, params: &'a ParamSet<F>, trainable: bool) -> Self {
        self.sources.push((params, trainable));
        self
    }

    pub fn lora_scale(mut self, scale: f64) -> Self {
        self.lora_scale = F::of(scale);
        self
    }

    pub fn has(&self, name: &str) -> bool {
        self.sources.iter().any(|(p, _)| p.contains(name))
    }

    pub fn var(&mut self, g: &mut Graph<F>, name: &str) -> Result<Var, TransformerError> {
        if let Some(&(v, _)) = self.vars.get(name) {
            return Ok(v);
        }
        let (src, trainable) = self
            .sources
            .iter()
            .find(|(p, _)| p.contains(name))
            .ok_or_else(|| TransformerError::Integrity(format!("missing parameter {name}")))?;
        let t = src.get(name).expect("checked").clone();
        let v = if *trainable { g.param(t) } else { g.constant(t) };
        self.vars.insert(name.to_string(), (v, *trainable));
        Ok(v)
    }

    /// Gradients of every bound trainable parameter (zeros where backward
    /// did not reach).
    pub fn grads(&self, g: &Graph<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .filter(|(_, (_, t))| *t)
            .map(|(n, &(v, _))| (n.clone(), g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)))))
            .collect()
    }

    /// `x·W + b` for the projection named `prefix`, plus its adapter.
    pub fn linear(&mut self, g: &mut Graph<F>, x: Var, prefix: &str) -> Result<Var, TransformerError> {
        let w = self.var(g, &format!("{prefix}.w"))?;
        let b = self.var(g, &format!("{prefix}.b"))?;
        let y = g.matmul(x, w)?;
        let mut y = g.add(y, b)?;
        let (an, bn) = (format!("{prefix}.lora_a"), format!("{prefix}.lora_b"));
        if self.has(&an) && self.has(&bn) {
            let a = self.var(g, &an)?;
            let bb = self.var(g, &bn)?;
            let xa = g.matmul(x, a)?;
            let xab = g.matmul(xa, bb)?;
            let delta = g.scale(xab, self.lora_scale);
            y = g.add(y, delta)?;
        }
        Ok(y)
    }
}

impl<F: Scalar> Default for Binder<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-forward state: dropout seeding and optional attention capture.
pub struct Ctx {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
    site: u64,
    pub record_attention: bool,
    pub attention: Vec<Var>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self::train(0, 0, false)
    }

    pub fn train(seed: u64, step: u64, training: bool) -> Self {
        Self {
            training,
            seed,
            step,
            site: 0,
            record_attention: false,
            attention: Vec::new(),
        }
    }

    fn dropout<F: Scalar>(&mut self, g: &mut Graph<F>, x: Var, p: f64) -> Result<Var, TensorError> {
        self.site += 1;
        g.dropout(x, p, seed::dropout_seed(self.seed, self.site, self.step), self.training)
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding<F: Scalar>(len: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            data.push(F::of(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(&[len, d], data).expect("pe shape")
}

/// Pads `seqs` to a rectangular batch; returns ids and the time length.
pub fn pad_batch(seqs: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * t);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(PAD_ID, t - s.len()));
    }
    (ids, t)
}

/// `[B, 1, 1, S]` additive mask blocking pad keys.
pub fn key_pad_mask<F: Scalar>(seqs: &[Vec<usize>]) -> Tensor<F> {
    let (ids, s) = pad_batch(seqs);
    let data = ids
        .iter()
        .map(|&i| if i == PAD_ID { F::of(MASK_VALUE) } else { F::zero() })
        .collect();
    Tensor::new(&[seqs.len(), 1, 1, s], data).expect("mask shape")
}

/// `[1, 1, T, T]` additive causal mask.
pub fn causal_mask<F: Scalar>(t: usize) -> Tensor<F> {
    let data = (0..t * t)
        .map(|k| if k % t > k / t { F::of(MASK_VALUE) } else { F::zero() })
        .collect();
    Tensor::new(&[1, 1, t, t], data).expect("mask shape")
}

/// Runs the transformer layers of `model` on a graph.
pub struct Net<'m> {
    pub config: &'m TransformerConfig,
}

impl<'m> Net<'m> {
    pub fn new(config: &'m TransformerConfig) -> Self {
        Self { config }
    }

    fn check_len(&self, seqs: &[Vec<usize>]) -> Result<(), TransformerError> {
        if seqs.is_empty() {
            return Err(TransformerError::Config("empty batch".into()));
        }
        for s in seqs {
            if s.len() > self.config.max_len {
                return Err(TransformerError::Length {
                    len: s.len(),
                    max: self.config.max_len,
                });
            }
            if s.is_empty() {
                return Err(TransformerError::Config("empty sequence in batch".into()));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= self.config.vocab_size) {
                return Err(TransformerError::Config(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Scaled embeddings plus positions, `[B, T, D]`.
    fn embed<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<F>,
        ctx: &mut Ctx,
        seqs: &[Vec<usize>],
    ) -> Result<Var, TransformerError> {
        let (ids, t) = pad_batch(seqs);
        let d = self.config.d_model;
        let emb = b.var(g, "emb")?;
        let x = g.embedding(emb, &ids, &[seqs.len(), t])?;
        let x = g.scale(x, F::of((d as f64).sqrt()));
        let pe = g.constant(positional_encoding(t, d));
        let x = g.add(x, pe)?;
        Ok(ctx.dropout(g, x, self.config.dropout)?)
    }

    fn layer_norm<F: Scalar>(&self, g: &mut Graph<F>, b: &mut Binder<F>, x: Var, p: &str) -> Result<Var, TransformerError> {
        let gain = b.var(g, &format!("{p}.g"))?;
        let bias = b.var(g, &format!("{p}.b"))?;
        Ok(g.layer_norm(x, gain, bias, F::of(LN_EPS))?)
    }

    /// `[B, T, D]` → `[B, H, T, dk]`
    fn split_heads<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var, TensorError> {
        let s = g.shape(x).to_vec();
        let h = self.config.num_heads;
        let x = g.reshape(x, &[s[0], s[1], h, s[2] / h])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<F>,
        ctx: &mut Ctx,
        xq: Var,
        xkv: Var,
        mask: Var,
        p: &str,
    ) -> Result<Var, TransformerError> {
        let q = b.linear(g, xq, &format!("{p}.q"))?;
        let k = b.linear(g, xkv, &format!("{p}.k"))?;
        let v = b.linear(g, xkv, &format!("{p}.v"))?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let kt = g.transpose(k, 2, 3)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, F::of(1.0 / (self.config.d_head() as f64).sqrt()));
        let scores = g.add(scores, mask)?;
        let w = g.softmax(scores, 3)?;
        if ctx.record_attention {
            ctx.attention.push(w);
        }
        let w = ctx.dropout(g, w, self.config.dropout)?;
        let o = g.matmul(w, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let s = g.shape(o).to_vec();
        let o = g.reshape(o, &[s[0], s[1], s[2] * s[3]])?;
        b.linear(g, o, &format!("{p}.o"))
    }

    fn ffn<F: Scalar>(&self, g: &mut Graph<F>, b: &mut Binder<F>, ctx: &mut Ctx, x: Var, p: &str) -> Result<Var, TransformerError> {
        let h = b.linear(g, x, &format!("{p}.ff1"))?;
        let h = g.relu(h);
        let h = ctx.dropout(g, h, self.config.dropout)?;
        b.linear(g, h, &format!("{p}.ff2"))
    }

    fn residual<F: Scalar>(&self, g: &mut Graph<F>, ctx: &mut Ctx, x: Var, h: Var) -> Result<Var, TransformerError> {
        let h = ctx.dropout(g, h, self.config.dropout)?;
        Ok(g.add(x, h)?)
    }

    /// Encoder states `[B, S, D]` and the source key mask.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<F>,
        ctx: &mut Ctx,
        src: &[Vec<usize>],
    ) -> Result<(Var, Var), TransformerError> {
        self.check_len(src)?;
        let mask = g.constant(key_pad_mask(src));
        let mut x = self.embed(g, b, ctx, src)?;
        for l in 0..self.config.num_layers {
            let p = format!("enc.{l}");
            let h = self.layer_norm(g, b, x, &format!("{p}.ln1"))?;
            let h = self.attention(g, b, ctx, h, h, mask, &format!("{p}.self"))?;
            x = self.residual(g, ctx, x, h)?;
            let h = self.layer_norm(g, b, x, &format!("{p}.ln2"))?;
            let h = self.ffn(g, b, ctx, h, &p)?;
            x = self.residual(g, ctx, x, h)?;
        }
        Ok((self.layer_norm(g, b, x, "enc.ln")?, mask))
    }

    /// Decoder logits `[B, T, V]` over `memory` with key mask `mem_mask`.
    pub fn decode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<F>,
        ctx: &mut Ctx,
        memory: Var,
        mem_mask: Var,
        tgt_in: &[Vec<usize>],
    ) -> Result<Var, TransformerError> {
        self.check_len(tgt_in)?;
        let t = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
        let causal = g.constant(causal_mask(t));
        let mut y = self.embed(g, b, ctx, tgt_in)?;
        for l in 0..self.config.num_layers {
            let p = format!("dec.{l}");
            let h = self.layer_norm(g, b, y, &format!("{p}.ln1"))?;
            let h = self.attention(g, b, ctx, h, h, causal, &format!("{p}.self"))?;
            y = self.residual(g, ctx, y, h)?;
            let h = self.layer_norm(g, b, y, &format!("{p}.ln2"))?;
            let h = self.attention(g, b, ctx, h, memory, mem_mask, &format!("{p}.cross"))?;
            y = self.residual(g, ctx, y, h)?;
            let h = self.layer_norm(g, b, y, &format!("{p}.ln3"))?;
            let h = self.ffn(g, b, ctx, h, &p)?;
            y = self.residual(g, ctx, y, h)?;
        }
        let y = self.layer_norm(g, b, y, "dec.ln")?;
        let out = if self.config.tie_softmax {
            let emb = b.var(g, "emb")?;
            g.transpose(emb, 0, 1)?
        } else {
            b.var(g, "out.w")?
        };
        Ok(g.matmul(y, out)?)
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &mut Binder<F>,
        ctx: &mut Ctx,
        src: &[Vec<usize>],
        tgt_in: &[Vec<usize>],
    ) -> Result<Var, TransformerError> {
        if src.len() != tgt_in.len() {
            return Err(TransformerError::Config(format!(
                "{} source sequences but {} target sequences",
                src.len(),
                tgt_in.len()
            )));
        }
        let (memory, mask) = self.encode(g, b, ctx, src)?;
        self.decode(g, b, ctx, memory, mask, tgt_in)
    }
}

/// Inference-mode logits for a batch, `[B, T, V]`.
pub fn forward<F: Scalar>(
    model: &TransformerModel<F>,
    src: &[Vec<usize>],
    tgt_in: &[Vec<usize>],
) -> Result<Tensor<F>, TransformerError> {
    let mut g = Graph::inference();
    let mut b = Binder::new().source(&model.params, false);
    let logits = Net::new(&model.config).forward(&mut g, &mut b, &mut Ctx::eval(), src, tgt_in)?;
    Ok(g.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_layout() {
        let m: Tensor<f64> = causal_mask(3);
        let d = m.data();
        assert_eq!(d[1], MASK_VALUE);
        assert_eq!(d[3], 0.0);
        assert_eq!(d[5], MASK_VALUE);
        assert_eq!(d[8], 0.0);
    }

    #[test]
    fn tied_has_fewer_params() {
        let c = TransformerConfig::t1_quarter(50);
        let tied = build_model::<f32>(&c, 1).unwrap();
        let untied = build_model::<f32>(&TransformerConfig { tie_softmax: false, ..c.clone() }, 1).unwrap();
        assert_eq!(untied.num_params() - tied.num_params(), 50 * c.d_model);
    }

    #[test]
    fn deterministic_init() {
        let c = TransformerConfig::t1_quarter(30);
        assert_eq!(build_model::<f32>(&c, 7).unwrap(), build_model::<f32>(&c, 7).unwrap());
        assert_ne!(build_model::<f32>(&c, 7).unwrap(), build_model::<f32>(&c, 8).unwrap());
    }

    #[test]
    fn length_error() {
        let c = TransformerConfig {
            max_len: 4,
            ..TransformerConfig::t1_quarter(30)
        };
        let m = build_model::<f32>(&c, 1).unwrap();
        let r = forward(&m, &[vec![5; 5]], &[vec![2]]);
        assert!(matches!(r, Err(TransformerError::Length { len: 5, max: 4 })));
    }
}
