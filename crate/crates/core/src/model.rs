//! Pre-LN transformer in encoder-decoder or decoder-only form.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ParallelBatch;
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    EncoderDecoder,
    DecoderOnly,
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder-decoder" => Ok(Self::EncoderDecoder),
            "decoder-only" => Ok(Self::DecoderOnly),
            other => Err(config_err!("unknown model mode {other:?}")),
        }
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::EncoderDecoder => "encoder-decoder",
            Self::DecoderOnly => "decoder-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
    pub max_positions: usize,
    pub mode: ModelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            max_positions: 64,
            mode: ModelMode::EncoderDecoder,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(config_err!("model sizes must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_positions == 0 {
            return Err(config_err!("max_positions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    self_norm: Norm,
    self_attn: Attention,
    cross: Option<(Norm, Attention)>,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Stack {
    positions: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
}

/// Encoder output kept for the decoder's cross-attention.
#[derive(Clone, Copy, Debug)]
pub struct Memory<'a> {
    pub states: Var,
    pub mask: &'a [bool],
    pub len: usize,
}

/// Parameter layout plus the forward computation.
///
/// The layout is fixed by the configuration, so any [`ParamStore`] created by
/// [`Model::init_params`] or loaded from a checkpoint of the same
/// configuration can be used with the same `Model`.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Vec<(String, Vec<usize>)>,
    embed: ParamId,
    encoder: Option<Stack>,
    decoder: Stack,
    output: Linear,
}

struct LayoutBuilder {
    entries: Vec<(String, Vec<usize>)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.entries.push((name, shape.to_vec()));
        ParamId(self.entries.len() - 1)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), &[d]),
            bias: self.add(format!("{prefix}.bias"), &[d]),
        }
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.add(format!("{prefix}.weight"), &[fan_in, fan_out]),
            bias: self.add(format!("{prefix}.bias"), &[fan_out]),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            out: self.linear(&format!("{prefix}.out"), d, d),
        }
    }

    fn stack(&mut self, prefix: &str, cfg: &ModelConfig, cross: bool) -> Stack {
        let d = cfg.d_model;
        let positions = self.add(format!("{prefix}.positions"), &[cfg.max_positions, d]);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                Block {
                    self_norm: self.norm(&format!("{p}.self_norm"), d),
                    self_attn: self.attention(&format!("{p}.self_attn"), d),
                    cross: cross.then(|| {
                        (
                            self.norm(&format!("{p}.cross_norm"), d),
                            self.attention(&format!("{p}.cross_attn"), d),
                        )
                    }),
                    ffn_norm: self.norm(&format!("{p}.ffn_norm"), d),
                    ffn_in: self.linear(&format!("{p}.ffn_in"), d, cfg.ffn_dim),
                    ffn_out: self.linear(&format!("{p}.ffn_out"), cfg.ffn_dim, d),
                }
            })
            .collect();
        let final_norm = self.norm(&format!("{prefix}.final_norm"), d);
        Stack {
            positions,
            blocks,
            final_norm,
        }
    }
}

/// Dropout settings of one forward pass; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut (dyn RngCore + 'static)>;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder { entries: Vec::new() };
        let embed = b.add("embed".into(), &[config.vocab_size, config.d_model]);
        let encoder = match config.mode {
            ModelMode::EncoderDecoder => Some(b.stack("encoder", &config, false)),
            ModelMode::DecoderOnly => None,
        };
        let decoder = b.stack("decoder", &config, config.mode == ModelMode::EncoderDecoder);
        let output = b.linear("output", config.d_model, config.vocab_size);
        Ok(Self {
            config,
            layout: b.entries,
            embed,
            encoder,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> &[(String, Vec<usize>)] {
        &self.layout
    }

    /// Fresh parameters: uniform Glorot weights, small embeddings, unit gains
    /// and zero biases.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in &self.layout {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let limit = if name == "embed" || name.ends_with(".positions") {
                    (1.0 / shape[1] as f32).sqrt()
                } else {
                    (6.0 / (shape[0] + shape[1]) as f32).sqrt()
                };
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            };
            store
                .insert(name.clone(), Tensor::new(shape.clone(), data).expect("layout shape"))
                .expect("unique layout names");
        }
        store
    }

    /// Checks that `params` follows this model's layout.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(shape_err!(
                "model expects {} parameter tensors, got {}",
                self.layout.len(),
                params.len()
            ));
        }
        for ((name, shape), (pname, t)) in self.layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(shape_err!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn output_weight(&self) -> ParamId {
        self.output.weight
    }

    pub fn output_bias(&self) -> ParamId {
        self.output.bias
    }

    /// True when the parameter belongs to the decoder stack or output layer.
    pub fn is_decoder_param(&self, name: &str) -> bool {
        name.starts_with("decoder.") || name.starts_with("output.")
    }

    fn linear<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>, l: &Linear, x: Var) -> Result<Var> {
        let w = g.param(params, l.weight);
        let b = g.param(params, l.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn norm<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>, n: &Norm, x: Var) -> Result<Var> {
        let gain = g.param(params, n.gain);
        let bias = g.param(params, n.bias);
        g.layer_norm(x, gain, bias)
    }

    fn dropout<T: Scalar>(&self, g: &mut Graph<T>, x: Var, drop: &mut DropoutRng<'_>) -> Var {
        match drop {
            Some(rng) => g.dropout(x, self.config.dropout, &mut **rng),
            None => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        a: &Attention,
        query: Var,
        keys: Var,
        batch: usize,
        (q_len, k_len): (usize, usize),
        causal: bool,
        key_mask: &[bool],
        drop: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let head_dim = self.config.d_model / h;
        let q = Self::linear(g, params, &a.q, query)?;
        let k = Self::linear(g, params, &a.k, keys)?;
        let v = Self::linear(g, params, &a.v, keys)?;
        let q = g.split_heads(q, batch, q_len, h)?;
        let k = g.split_heads(k, batch, k_len, h)?;
        let v = g.split_heads(v, batch, k_len, h)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::of(1.0 / (head_dim as f64).sqrt()));
        let weights = g.attention_softmax(scores, h, causal, Some(key_mask))?;
        let weights = self.dropout(g, weights, drop);
        let ctx = g.batch_matmul(weights, v, false)?;
        let ctx = g.merge_heads(ctx, batch, h)?;
        Self::linear(g, params, &a.out, ctx)
    }

    fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        stack: &Stack,
        ids: &[u32],
        len: usize,
    ) -> Result<Var> {
        if len > self.config.max_positions {
            return Err(shape_err!(
                "sequence length {len} exceeds max_positions {}",
                self.config.max_positions
            ));
        }
        let table = g.param(params, self.embed);
        let tok = g.embedding(table, ids)?;
        let pos_table = g.param(params, stack.positions);
        let pos_ids: Vec<u32> = (0..ids.len()).map(|i| (i % len) as u32).collect();
        let pos = g.embedding(pos_table, &pos_ids)?;
        g.add(tok, pos)
    }

    /// Encoder states `[B·S × d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        source: &[u32],
        batch: usize,
        src_len: usize,
        src_mask: &[bool],
        mut drop: DropoutRng<'_>,
    ) -> Result<Var> {
        let stack = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config("decoder-only model has no encoder".into()))?;
        if src_len == 0 || source.len() != batch * src_len || src_mask.len() != source.len() {
            return Err(shape_err!(
                "source of {} ids does not form a {batch}x{src_len} batch",
                source.len()
            ));
        }
        let mut x = self.embed(g, params, stack, source, src_len)?;
        x = self.dropout(g, x, &mut drop);
        for block in &stack.blocks {
            let h = Self::norm(g, params, &block.self_norm, x)?;
            let h = self.attention(
                g,
                params,
                &block.self_attn,
                h,
                h,
                batch,
                (src_len, src_len),
                false,
                src_mask,
                &mut drop,
            )?;
            let h = self.dropout(g, h, &mut drop);
            x = g.add(x, h)?;
            x = self.feed_forward(g, params, block, x, &mut drop)?;
        }
        Self::norm(g, params, &stack.final_norm, x)
    }

    fn feed_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        block: &Block,
        x: Var,
        drop: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let h = Self::norm(g, params, &block.ffn_norm, x)?;
        let h = Self::linear(g, params, &block.ffn_in, h)?;
        let h = g.gelu(h);
        let h = self.dropout(g, h, drop);
        let h = Self::linear(g, params, &block.ffn_out, h)?;
        let h = self.dropout(g, h, drop);
        g.add(x, h)
    }

    /// Next-token logits `[B·T × V]` for decoder inputs `ids[B·T]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        memory: Option<Memory<'_>>,
        ids: &[u32],
        batch: usize,
        len: usize,
        mask: &[bool],
        mut drop: DropoutRng<'_>,
    ) -> Result<Var> {
        if len == 0 || ids.len() != batch * len || mask.len() != ids.len() {
            return Err(shape_err!(
                "decoder input of {} ids does not form a {batch}x{len} batch",
                ids.len()
            ));
        }
        if memory.is_none() && self.encoder.is_some() {
            return Err(Error::Config("encoder-decoder model needs encoder states".into()));
        }
        let stack = &self.decoder;
        let mut x = self.embed(g, params, stack, ids, len)?;
        x = self.dropout(g, x, &mut drop);
        for block in &stack.blocks {
            let h = Self::norm(g, params, &block.self_norm, x)?;
            let h = self.attention(
                g,
                params,
                &block.self_attn,
                h,
                h,
                batch,
                (len, len),
                true,
                mask,
                &mut drop,
            )?;
            let h = self.dropout(g, h, &mut drop);
            x = g.add(x, h)?;
            if let (Some((norm, attn)), Some(mem)) = (&block.cross, memory) {
                let h = Self::norm(g, params, norm, x)?;
                let h = self.attention(
                    g,
                    params,
                    attn,
                    h,
                    mem.states,
                    batch,
                    (len, mem.len),
                    false,
                    mem.mask,
                    &mut drop,
                )?;
                let h = self.dropout(g, h, &mut drop);
                x = g.add(x, h)?;
            }
            x = self.feed_forward(g, params, block, x, &mut drop)?;
        }
        let x = Self::norm(g, params, &stack.final_norm, x)?;
        Self::linear(g, params, &self.output, x)
    }

    /// Full pass over a batch with `decoder_input` in place of the batch's
    /// own target input. Returns log-probabilities `[B·T × V]`.
    ///
    /// The encoder and decoder draw dropout masks from `drop` when given.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        batch: &ParallelBatch,
        decoder_input: &[u32],
        mut drop: DropoutRng<'_>,
    ) -> Result<Var> {
        let states = match self.config.mode {
            ModelMode::EncoderDecoder => Some(self.encode(
                g,
                params,
                &batch.source,
                batch.size,
                batch.src_len,
                &batch.source_mask,
                drop.as_deref_mut(),
            )?),
            ModelMode::DecoderOnly => None,
        };
        let memory = states.map(|states| Memory {
            states,
            mask: &batch.source_mask,
            len: batch.src_len,
        });
        let logits = self.decode(
            g,
            params,
            memory,
            decoder_input,
            batch.size,
            batch.tgt_len,
            &batch.target_mask,
            drop,
        )?;
        g.log_softmax(logits, 1)
    }

    /// Teacher-forced distributions with dropout disabled.
    pub fn forward_teacher_forced(&self, params: &ParamStore, batch: &ParallelBatch) -> Result<StepDistributions> {
        self.forward_operative(params, batch, &batch.target_input, None)
    }

    /// Distributions over a (possibly mixed) decoder input.
    pub fn forward_operative(
        &self,
        params: &ParamStore,
        batch: &ParallelBatch,
        decoder_input: &[u32],
        drop: DropoutRng<'_>,
    ) -> Result<StepDistributions> {
        let mut g = Graph::new();
        let lp = self.forward(&mut g, params, batch, decoder_input, drop)?;
        Ok(StepDistributions::from_log_probs(
            g.value(lp).clone(),
            batch.target_mask.clone(),
        ))
    }
}

/// Per-step next-token distributions of a batch, rows in `[B·T]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDistributions {
    pub log_probs: Tensor,
    pub mask: Vec<bool>,
}

impl StepDistributions {
    pub fn from_log_probs(log_probs: Tensor, mask: Vec<bool>) -> Self {
        Self { log_probs, mask }
    }

    pub fn rows(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.shape()[1]
    }

    pub fn log_row(&self, r: usize) -> &[f32] {
        let v = self.vocab();
        &self.log_probs.data()[r * v..(r + 1) * v]
    }

    pub fn prob_row(&self, r: usize) -> Vec<f32> {
        self.log_row(r).iter().map(|lp| lp.exp()).collect()
    }

    pub fn greedy_predictions(&self) -> Vec<u32> {
        greedy_predictions(self.log_probs.data(), self.vocab())
    }
}

/// Row-wise argmax of `[N × V]` scores, ties going to the lowest id.
pub fn greedy_predictions<T: Scalar>(rows: &[T], vocab: usize) -> Vec<u32> {
    rows.chunks_exact(vocab)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_copy_task, make_batches};

    fn small(mode: ModelMode) -> Model {
        Model::new(ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 24,
            dropout: 0.0,
            max_positions: 16,
            mode,
        })
        .unwrap()
    }

    fn batch() -> ParallelBatch {
        let pairs = gen_copy_task(3, (3, 6), 11, 4).unwrap();
        make_batches(&pairs, 1000, 0, true).unwrap().remove(0)
    }

    #[test]
    fn rows_are_distributions() {
        for mode in [ModelMode::EncoderDecoder, ModelMode::DecoderOnly] {
            let m = small(mode);
            let p = m.init_params(1);
            let d = m.forward_teacher_forced(&p, &batch()).unwrap();
            for r in 0..d.rows() {
                let s: f32 = d.prob_row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        for mode in [ModelMode::EncoderDecoder, ModelMode::DecoderOnly] {
            let m = small(mode);
            let p = m.init_params(2);
            let b = batch();
            let base = m.forward_teacher_forced(&p, &b).unwrap();
            for j in 1..b.tgt_len {
                let mut edited = b.target_input.clone();
                for i in 0..b.size {
                    edited[i * b.tgt_len + j] = 10;
                }
                let d = m.forward_operative(&p, &b, &edited, None).unwrap();
                for i in 0..b.size {
                    for t in 0..j {
                        let r = i * b.tgt_len + t;
                        assert_eq!(d.log_row(r), base.log_row(r), "edit {j} leaked into row {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_uniform_rows() {
        let m = small(ModelMode::EncoderDecoder);
        let mut p = m.init_params(3);
        p.get_mut(m.output_weight()).data_mut().fill(0.0);
        let d = m.forward_teacher_forced(&p, &batch()).unwrap();
        for r in 0..d.rows() {
            for &q in &d.prob_row(r) {
                assert!((q - 1.0 / 11.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn operative_pass_on_ground_truth_matches_teacher_forcing() {
        let m = small(ModelMode::EncoderDecoder);
        let p = m.init_params(4);
        let b = batch();
        let a = m.forward_teacher_forced(&p, &b).unwrap();
        let o = m.forward_operative(&p, &b, &b.target_input, None).unwrap();
        assert_eq!(a, o);
    }

    #[test]
    fn greedy_tie_rule() {
        assert_eq!(greedy_predictions(&[0.0f32, 1.0, 0.0, 0.0, 0.0, 1.0], 3), vec![1, 2]);
        assert_eq!(greedy_predictions(&[0.25f32; 4], 4), vec![0]);
        assert_eq!(greedy_predictions(&[0.1f32, 0.7, 0.2], 3), vec![1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = small(ModelMode::EncoderDecoder);
        let p = m.init_params(5);
        let mut b = batch();
        b.target_input[1] = 11;
        assert_eq!(m.forward_teacher_forced(&p, &b).unwrap_err().code(), "E_INDEX");
        let long = gen_copy_task(1, (20, 20), 11, 0).unwrap();
        let b = make_batches(&long, 1000, 0, true).unwrap().remove(0);
        assert_eq!(m.forward_teacher_forced(&p, &b).unwrap_err().code(), "E_SHAPE");
        assert!(Model::new(ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::default()
        })
        .is_err());
    }

    #[test]
    fn layout_matches_init() {
        let m = small(ModelMode::DecoderOnly);
        let p = m.init_params(0);
        m.check_params(&p).unwrap();
        assert!(p.find("decoder.0.cross_attn.q.weight").is_none());
        let e = small(ModelMode::EncoderDecoder);
        assert!(e.check_params(&p).is_err());
    }
}
