//! The full model: sliding-window feature embedder, initialisation module
//! (encoder `e1`, decoder `d1`) and the weight-shared refinement module
//! (encoder `e2`, decoder `d2`) applied for `iterations` passes.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::nn::{self, Builder, DecoderLayerParams, EncoderLayerParams, LinearParams, Pass};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{AttnMask, Tape, Var};
use crate::tensor::{Float, Result, Tensor, TensorError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Parameter group names, in registration order.
pub const GROUPS: [&str; 7] = ["embedder", "token_embedding", "e1", "d1", "e2", "d2", "output"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model width `C`.
    pub width: usize,
    pub heads: usize,
    /// Layers per encoder and per decoder.
    pub layers: usize,
    pub ffn_dim: usize,
    /// Refinement iterations `K`.
    pub iterations: usize,
    /// Drop-net weight of the self-attention branch.
    pub beta: f64,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Sliding window size in frames.
    pub window: usize,
    pub stride: usize,
    pub frame_dim: usize,
    /// Let `d2` attend to the features as well as the prototype.
    pub decoder_reads_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 128,
            iterations: 3,
            beta: 0.5,
            dropout: 0.1,
            vocab_size: 20,
            window: 4,
            stride: 2,
            frame_dim: 16,
            decoder_reads_features: false,
        }
    }
}

impl ModelConfig {
    /// The published full-size setting (3 layers, 8 heads, 2048-wide FFN).
    pub fn paper_scale(width: usize, vocab_size: usize, frame_dim: usize) -> Self {
        Self {
            width,
            heads: 8,
            layers: 3,
            ffn_dim: 2048,
            vocab_size,
            frame_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let fail = |m: String| Err(m);
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return fail(format!("width must be positive and even, got {}", self.width));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!("heads ({}) must divide width ({})", self.heads, self.width));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return fail("layers and ffn_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size <= EOS + 1 {
            return fail(format!("vocab_size must exceed {}, got {}", EOS + 1, self.vocab_size));
        }
        if self.stride == 0 || self.window < self.stride {
            return fail(format!(
                "need stride >= 1 and window >= stride, got window {} stride {}",
                self.window, self.stride
            ));
        }
        if self.frame_dim == 0 {
            return fail("frame_dim must be positive".into());
        }
        Ok(())
    }

    /// Number of clips `ceil(T_x / stride)`.
    pub fn clips(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }
}

/// Which decoder to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    D1,
    D2,
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub embedder: LinearParams,
    pub token_embedding: ParamId,
    pub e1: Vec<EncoderLayerParams>,
    pub d1: Vec<DecoderLayerParams>,
    pub e2: Vec<EncoderLayerParams>,
    pub d2: Vec<DecoderLayerParams>,
    pub output: ParamId,
}

/// Counts decoder activity; used to show that inference decodes once and
/// never touches `d1`.
#[derive(Debug, Default)]
pub struct CallCounters {
    pub d1_passes: AtomicUsize,
    pub d2_passes: AtomicUsize,
    pub autoregressive_decodes: AtomicUsize,
}

impl CallCounters {
    pub fn reset(&self) {
        self.d1_passes.store(0, Ordering::Relaxed);
        self.d2_passes.store(0, Ordering::Relaxed);
        self.autoregressive_decodes.store(0, Ordering::Relaxed);
    }

    pub fn get(c: &AtomicUsize) -> usize {
        c.load(Ordering::Relaxed)
    }
}

pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub layout: ModelLayout,
    pub counters: CallCounters,
}

impl<F: Float> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            layout: self.layout.clone(),
            counters: CallCounters::default(),
        }
    }
}

/// A batch of sequences stored as `[batch * len, width]` with per-item
/// real lengths; rows past an item's length are padding.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn key_mask(&self) -> AttnMask {
        AttnMask::keys(self.lens.clone())
    }
}

/// Visual features `F`, one row per clip.
pub type FeatureSequence = SeqBatch;

/// Prototype `E^k`.
#[derive(Clone, Debug)]
pub struct Prototype {
    pub seq: SeqBatch,
    pub iteration: usize,
}

/// Decoder input tokens, `[batch * len]` padded with [`PAD`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 {
            return Err(TensorError::Usage("token batch needs a non-empty sequence".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            len,
            lens: seqs.iter().map(Vec::len).collect(),
        })
    }
}

impl<F: Float> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> std::result::Result<Self, String> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let mut store = ParamStore::new();
        let c = config.width;
        let layout = {
            let mut b = Builder {
                store: &mut store,
                rng: &mut rng,
            };
            let embedder = b.linear("embedder.proj", config.window * config.frame_dim, c, true);
            let token_embedding = b.matrix("token_embedding.weight", config.vocab_size, c);
            let e1 = (0..config.layers)
                .map(|l| b.encoder_layer(&format!("e1.layers.{l}"), c, config.heads, config.ffn_dim, false))
                .collect();
            let d1 = (0..config.layers)
                .map(|l| b.decoder_layer(&format!("d1.layers.{l}"), c, config.heads, config.ffn_dim))
                .collect();
            let e2 = (0..config.layers)
                .map(|l| b.encoder_layer(&format!("e2.layers.{l}"), c, config.heads, config.ffn_dim, true))
                .collect();
            let d2 = (0..config.layers)
                .map(|l| b.decoder_layer(&format!("d2.layers.{l}"), c, config.heads, config.ffn_dim))
                .collect();
            let output = b.matrix("output.weight", c, config.vocab_size);
            ModelLayout {
                embedder,
                token_embedding,
                e1,
                d1,
                e2,
                d2,
                output,
            }
        };
        Ok(Self {
            config,
            store,
            layout,
            counters: CallCounters::default(),
        })
    }

    /// Same architecture and values in another float type.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
            counters: CallCounters::default(),
        }
    }

    /// Parameters belonging to the given groups.
    pub fn params_in(&self, groups: &[&str]) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| groups.contains(&self.store.group(id)))
            .collect()
    }

    /// The decoder used at inference: `d1` for a baseline trained without
    /// refinement, `d2` otherwise.
    pub fn inference_branch(&self) -> Branch {
        if self.config.iterations == 0 {
            Branch::D1
        } else {
            Branch::D2
        }
    }

    /// Splits each item's frames into `ceil(T_x / stride)` windows of
    /// `window` frames (zero-padded past the end), flattens and projects them
    /// to the model width, then adds positions.
    pub fn embed_frames(
        &self,
        tape: &mut Tape<F>,
        frames: &[&Tensor<F>],
        pass: &mut Pass<'_>,
    ) -> Result<FeatureSequence> {
        let cfg = &self.config;
        if frames.is_empty() {
            return Err(TensorError::Usage("embed_frames needs at least one item".into()));
        }
        let mut lens = Vec::with_capacity(frames.len());
        for f in frames {
            if f.shape().len() != 2 || f.cols() != cfg.frame_dim {
                return Err(TensorError::Shape {
                    op: "embed_frames",
                    lhs: f.shape().to_vec(),
                    rhs: vec![cfg.frame_dim],
                });
            }
            lens.push(cfg.clips(f.rows()));
        }
        let len = *lens.iter().max().expect("non-empty");
        let batch = frames.len();
        let span = cfg.window * cfg.frame_dim;
        let mut windows = vec![F::zero(); batch * len * span];
        for (b, f) in frames.iter().enumerate() {
            for t in 0..lens[b] {
                let dst = &mut windows[(b * len + t) * span..][..span];
                for o in 0..cfg.window {
                    let src = t * cfg.stride + o;
                    if src < f.rows() {
                        dst[o * cfg.frame_dim..(o + 1) * cfg.frame_dim].copy_from_slice(f.row(src));
                    }
                }
            }
        }
        let x = tape.constant(Tensor::new(vec![batch * len, span], windows)?);
        let h = nn::linear(tape, &self.store, &self.layout.embedder, x)?;
        let pe = tape.constant(nn::batched_positions(batch, len, cfg.width)?);
        let h = tape.add(h, pe)?;
        let var = maybe_dropout(tape, h, pass)?;
        Ok(SeqBatch {
            var,
            batch,
            len,
            lens,
        })
    }

    /// `E^0 = E1(F)`.
    pub fn initialize_prototype(
        &self,
        tape: &mut Tape<F>,
        features: &FeatureSequence,
        pass: &mut Pass<'_>,
    ) -> Result<Prototype> {
        let mask = features.key_mask();
        let mut x = features.var;
        for layer in &self.layout.e1 {
            x = nn::encoder_layer(tape, &self.store, layer, x, features.batch, &mask, pass)?;
        }
        Ok(Prototype {
            seq: SeqBatch {
                var: x,
                ..features.clone()
            },
            iteration: 0,
        })
    }

    /// `E^k = E2(F; E^{k-1})`: the first layer's state is `F`, and every layer
    /// cross-attends to the whole previous prototype.
    pub fn refine_prototype(
        &self,
        tape: &mut Tape<F>,
        features: &FeatureSequence,
        previous: &Prototype,
        pass: &mut Pass<'_>,
    ) -> Result<Prototype> {
        if tape.shape(features.var) != tape.shape(previous.seq.var) {
            return Err(TensorError::Shape {
                op: "refine_prototype",
                lhs: tape.shape(features.var).to_vec(),
                rhs: tape.shape(previous.seq.var).to_vec(),
            });
        }
        let mask = features.key_mask();
        let mut x = features.var;
        for (i, layer) in self.layout.e2.iter().enumerate() {
            x = nn::refinement_encoder_layer(
                tape,
                &self.store,
                layer,
                i,
                x,
                previous.seq.var,
                features.batch,
                &mask,
                self.config.beta,
                pass,
            )?;
        }
        Ok(Prototype {
            seq: SeqBatch {
                var: x,
                ..features.clone()
            },
            iteration: previous.iteration + 1,
        })
    }

    /// Teacher-forced logits `[batch * len, vocab]` for decoder inputs that
    /// start with [`BOS`].
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape<F>,
        memory: &SeqBatch,
        features: Option<&FeatureSequence>,
        tokens: &TokenBatch,
        branch: Branch,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        if tokens.batch != memory.batch {
            return Err(TensorError::Shape {
                op: "decode",
                lhs: vec![tokens.batch],
                rhs: vec![memory.batch],
            });
        }
        let (layers, counter) = match branch {
            Branch::D1 => (&self.layout.d1, &self.counters.d1_passes),
            Branch::D2 => (&self.layout.d2, &self.counters.d2_passes),
        };
        counter.fetch_add(1, Ordering::Relaxed);
        let memory = match (branch, features) {
            (Branch::D2, Some(f)) if self.config.decoder_reads_features => {
                concat_time(tape, memory, f)?
            }
            _ => memory.clone(),
        };
        let c = self.config.width;
        let table = tape.param(&self.store, self.layout.token_embedding);
        let emb = tape.gather_rows(table, &tokens.ids)?;
        let emb = tape.scale(emb, F::lit((c as f64).sqrt()));
        let pe = tape.constant(nn::batched_positions(tokens.batch, tokens.len, c)?);
        let h = tape.add(emb, pe)?;
        let mut h = maybe_dropout(tape, h, pass)?;
        let mem_mask = memory.key_mask();
        let causal = AttnMask::causal();
        for layer in layers {
            h = nn::decoder_layer(
                tape,
                &self.store,
                layer,
                h,
                memory.var,
                tokens.batch,
                &causal,
                &mem_mask,
                pass,
            )?;
        }
        let w = tape.param(&self.store, self.layout.output);
        tape.matmul(h, w)
    }

    /// Training forward pass: logits `U^0` (from `d1` over `E^0`) followed by
    /// `U^1..U^K` (from `d2` over each refined prototype), all teacher-forced
    /// on the same decoder inputs.
    pub fn forward_train(
        &self,
        tape: &mut Tape<F>,
        frames: &[&Tensor<F>],
        tokens: &TokenBatch,
        pass: &mut Pass<'_>,
    ) -> Result<Vec<Var>> {
        self.forward_branches(tape, frames, tokens, self.config.iterations, pass)
    }

    /// [`forward_train`](Self::forward_train) with an explicit iteration count.
    pub fn forward_branches(
        &self,
        tape: &mut Tape<F>,
        frames: &[&Tensor<F>],
        tokens: &TokenBatch,
        iterations: usize,
        pass: &mut Pass<'_>,
    ) -> Result<Vec<Var>> {
        let features = self.embed_frames(tape, frames, pass)?;
        let mut proto = self.initialize_prototype(tape, &features, pass)?;
        let mut logits = vec![self.decode_teacher_forced(
            tape,
            &proto.seq,
            Some(&features),
            tokens,
            Branch::D1,
            pass,
        )?];
        for _ in 0..iterations {
            proto = self.refine_prototype(tape, &features, &proto, pass)?;
            logits.push(self.decode_teacher_forced(
                tape,
                &proto.seq,
                Some(&features),
                tokens,
                Branch::D2,
                pass,
            )?);
        }
        Ok(logits)
    }

    /// Inference encoder path: embed, `E1`, then `iterations` refinement
    /// passes in inference-mix mode. Returns the features and `E^K`.
    pub fn forward_infer(
        &self,
        tape: &mut Tape<F>,
        frames: &[&Tensor<F>],
        iterations: usize,
    ) -> Result<(FeatureSequence, Prototype)> {
        let mut pass = Pass::eval();
        let features = self.embed_frames(tape, frames, &mut pass)?;
        let mut proto = self.initialize_prototype(tape, &features, &mut pass)?;
        for _ in 0..iterations {
            proto = self.refine_prototype(tape, &features, &proto, &mut pass)?;
        }
        Ok((features, proto))
    }
}

fn maybe_dropout<F: Float>(tape: &mut Tape<F>, x: Var, pass: &mut Pass<'_>) -> Result<Var> {
    if pass.dropout == 0.0 {
        return Ok(x);
    }
    let rng: &mut Rng = pass
        .rng
        .as_deref_mut()
        .ok_or_else(|| TensorError::Usage("dropout requires an rng".into()))?;
    tape.dropout(x, pass.dropout, true, rng)
}

/// Per item, `[a real rows, b real rows, a padding, b padding]`.
fn concat_time<F: Float>(tape: &mut Tape<F>, a: &SeqBatch, b: &SeqBatch) -> Result<SeqBatch> {
    if a.batch != b.batch || a.len != b.len {
        return Err(TensorError::Shape {
            op: "concat_time",
            lhs: vec![a.batch, a.len],
            rhs: vec![b.batch, b.len],
        });
    }
    let both = tape.concat(&[a.var, b.var], 0)?;
    let offset = a.batch * a.len;
    let mut idx = Vec::with_capacity(2 * offset);
    for item in 0..a.batch {
        let base = item * a.len;
        let (la, lb) = (a.lens[item], b.lens[item]);
        idx.extend((0..la).map(|t| base + t));
        idx.extend((0..lb).map(|t| offset + base + t));
        idx.extend((la..a.len).map(|t| base + t));
        idx.extend((lb..b.len).map(|t| offset + base + t));
    }
    let var = tape.gather_rows(both, &idx)?;
    Ok(SeqBatch {
        var,
        batch: a.batch,
        len: 2 * a.len,
        lens: a.lens.iter().zip(&b.lens).map(|(x, y)| x + y).collect(),
    })
}
