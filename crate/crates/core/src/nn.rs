//! Transformer building blocks: multi-head attention, post-norm encoder and
//! decoder layers, and the refinement layer that mixes self-attention over
//! its running state with cross-attention to the previous prototype.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{AttnMask, Tape, Var};
use crate::tensor::{Float, Result, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

/// How the refinement layer combines its two attention branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropNetMode {
    /// One Bernoulli(beta) draw per layer per forward pass picks a branch.
    TrainSample,
    /// Deterministic `beta * self + (1 - beta) * cross`.
    InferenceMix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropNetConfig {
    pub beta: f64,
    pub mode: DropNetMode,
}

/// Per-forward-pass settings shared by every layer.
pub struct Pass<'a> {
    /// Dropout rate applied to sub-layer outputs; 0 disables it.
    pub dropout: f64,
    pub dropnet_mode: DropNetMode,
    pub rng: Option<&'a mut Rng>,
    /// Drop-net branch of each refinement layer for this pass (`true` picks
    /// self-attention). Drawn on first use and reused by every iteration,
    /// since the iterations share the layers.
    dropnet_draws: Vec<bool>,
}

impl<'a> Pass<'a> {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            dropnet_mode: DropNetMode::InferenceMix,
            rng: None,
            dropnet_draws: Vec::new(),
        }
    }

    pub fn train(dropout: f64, rng: &'a mut Rng) -> Self {
        Self {
            dropout,
            dropnet_mode: DropNetMode::TrainSample,
            rng: Some(rng),
            dropnet_draws: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.dropout > 0.0 || self.dropnet_mode == DropNetMode::TrainSample
    }

    fn dropout<F: Float>(&mut self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        if self.dropout == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| TensorError::Usage("dropout requires an rng".into()))?;
        tape.dropout(x, self.dropout, true, rng)
    }

    fn dropnet_draw(&mut self, layer: usize, beta: f64) -> Result<bool> {
        while self.dropnet_draws.len() <= layer {
            let rng = self
                .rng
                .as_deref_mut()
                .ok_or_else(|| TensorError::Usage("drop-net train-sample mode requires an rng".into()))?;
            self.dropnet_draws.push(rng.gen::<f64>() < beta);
        }
        Ok(self.dropnet_draws[layer])
    }
}

// ----- parameter layouts -----------------------------------------------------

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub input: LinearParams,
    pub output: LinearParams,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    /// Present only on refinement-encoder layers.
    pub cross_attn: Option<AttentionParams>,
    pub ffn: FeedForwardParams,
    pub norm_attn: LayerNormParams,
    pub norm_ffn: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForwardParams,
    pub norm_self: LayerNormParams,
    pub norm_cross: LayerNormParams,
    pub norm_ffn: LayerNormParams,
}

/// Xavier-uniform initialised `[fan_in, fan_out]` matrix.
pub fn xavier<F: Float>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..fan_in * fan_out)
        .map(|_| F::lit(dist.sample(rng)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

/// Registers parameters under a common dotted prefix.
pub struct Builder<'s, F> {
    pub store: &'s mut ParamStore<F>,
    pub rng: &'s mut Rng,
}

impl<F: Float> Builder<'_, F> {
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = xavier(rows, cols, self.rng);
        self.store.insert(name, t)
    }

    pub fn vector(&mut self, name: &str, len: usize, value: f64) -> ParamId {
        self.store.insert(name, Tensor::full(vec![len], F::lit(value)))
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> LinearParams {
        LinearParams {
            weight: self.matrix(&format!("{prefix}.weight"), fan_in, fan_out),
            bias: bias.then(|| self.vector(&format!("{prefix}.bias"), fan_out, 0.0)),
        }
    }

    pub fn attention(&mut self, prefix: &str, width: usize, heads: usize) -> AttentionParams {
        AttentionParams {
            w_q: self.matrix(&format!("{prefix}.w_q"), width, width),
            w_k: self.matrix(&format!("{prefix}.w_k"), width, width),
            w_v: self.matrix(&format!("{prefix}.w_v"), width, width),
            w_o: self.matrix(&format!("{prefix}.w_o"), width, width),
            heads,
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) -> LayerNormParams {
        LayerNormParams {
            gain: self.vector(&format!("{prefix}.gain"), width, 1.0),
            bias: self.vector(&format!("{prefix}.bias"), width, 0.0),
        }
    }

    pub fn ffn(&mut self, prefix: &str, width: usize, hidden: usize) -> FeedForwardParams {
        FeedForwardParams {
            input: self.linear(&format!("{prefix}.in"), width, hidden, true),
            output: self.linear(&format!("{prefix}.out"), hidden, width, true),
        }
    }

    pub fn encoder_layer(
        &mut self,
        prefix: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        cross: bool,
    ) -> EncoderLayerParams {
        EncoderLayerParams {
            self_attn: self.attention(&format!("{prefix}.self_attn"), width, heads),
            cross_attn: cross.then(|| self.attention(&format!("{prefix}.cross_attn"), width, heads)),
            ffn: self.ffn(&format!("{prefix}.ffn"), width, hidden),
            norm_attn: self.layer_norm(&format!("{prefix}.norm_attn"), width),
            norm_ffn: self.layer_norm(&format!("{prefix}.norm_ffn"), width),
        }
    }

    pub fn decoder_layer(
        &mut self,
        prefix: &str,
        width: usize,
        heads: usize,
        hidden: usize,
    ) -> DecoderLayerParams {
        DecoderLayerParams {
            self_attn: self.attention(&format!("{prefix}.self_attn"), width, heads),
            cross_attn: self.attention(&format!("{prefix}.cross_attn"), width, heads),
            ffn: self.ffn(&format!("{prefix}.ffn"), width, hidden),
            norm_self: self.layer_norm(&format!("{prefix}.norm_self"), width),
            norm_cross: self.layer_norm(&format!("{prefix}.norm_cross"), width),
            norm_ffn: self.layer_norm(&format!("{prefix}.norm_ffn"), width),
        }
    }
}

// ----- forward functions ------------------------------------------------------

pub fn linear<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &LinearParams,
    x: Var,
) -> Result<Var> {
    let w = tape.param(store, p.weight);
    let y = tape.matmul(x, w)?;
    match p.bias {
        Some(b) => {
            let b = tape.param(store, b);
            tape.add_row(y, b)
        }
        None => Ok(y),
    }
}

pub fn layer_norm<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &LayerNormParams,
    x: Var,
) -> Result<Var> {
    let g = tape.param(store, p.gain);
    let b = tape.param(store, p.bias);
    tape.layer_norm(x, g, b, LN_EPS)
}

pub fn feed_forward<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &FeedForwardParams,
    x: Var,
) -> Result<Var> {
    let h = linear(tape, store, &p.input, x)?;
    let h = tape.relu(h);
    linear(tape, store, &p.output, h)
}

/// Multi-head attention. `query` is `[batch * tq, C]`, `memory` (keys and
/// values) is `[batch * tk, C]`. Scores are divided by `sqrt(C / heads)`
/// unless `scale` overrides the factor.
#[allow(clippy::too_many_arguments)]
pub fn attention<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &AttentionParams,
    query: Var,
    memory: Var,
    batch: usize,
    mask: &AttnMask,
    scale: Option<F>,
) -> Result<Var> {
    let width = tape.value(query).cols();
    if !width.is_multiple_of(p.heads) {
        return Err(TensorError::Usage(format!(
            "width {width} is not divisible by {} heads",
            p.heads
        )));
    }
    let scale = scale.unwrap_or_else(|| F::lit(1.0 / ((width / p.heads) as f64).sqrt()));
    let (wq, wk, wv, wo) = (
        tape.param(store, p.w_q),
        tape.param(store, p.w_k),
        tape.param(store, p.w_v),
        tape.param(store, p.w_o),
    );
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(memory, wk)?;
    let v = tape.matmul(memory, wv)?;
    let ctx = tape.attention_core(q, k, v, batch, p.heads, scale, mask)?;
    tape.matmul(ctx, wo)
}

/// Standard post-norm self-attention encoder layer (initialisation encoder).
pub fn encoder_layer<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderLayerParams,
    x: Var,
    batch: usize,
    mask: &AttnMask,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let a = attention(tape, store, &p.self_attn, x, x, batch, mask, None)?;
    let a = pass.dropout(tape, a)?;
    let h = tape.add(a, x)?;
    let h = layer_norm(tape, store, &p.norm_attn, h)?;
    ffn_block(tape, store, p, h, pass)
}

/// `LN(FFN(h) + h)` where `h` is the already-normalised attention residual.
fn ffn_block<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderLayerParams,
    h: Var,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let f = feed_forward(tape, store, &p.ffn, h)?;
    let f = pass.dropout(tape, f)?;
    let s = tape.add(f, h)?;
    layer_norm(tape, store, &p.norm_ffn, s)
}

/// The mixed hidden state of a refinement layer:
/// `beta * attn_s(state) + (1 - beta) * attn_c(state, memory)` in
/// inference-mix mode, or one branch chosen with probability `beta` (self) /
/// `1 - beta` (cross) in train-sample mode.
#[allow(clippy::too_many_arguments)]
pub fn refinement_mix<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderLayerParams,
    state: Var,
    memory: Var,
    batch: usize,
    mask: &AttnMask,
    dropnet: DropNetConfig,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let cross = p.cross_attn.as_ref().ok_or_else(|| {
        TensorError::Usage("refinement layer is missing its cross-attention".into())
    })?;
    if !(0.0..=1.0).contains(&dropnet.beta) {
        return Err(TensorError::Usage(format!(
            "drop-net beta must lie in [0, 1], got {}",
            dropnet.beta
        )));
    }
    if tape.shape(state) != tape.shape(memory) {
        return Err(TensorError::Shape {
            op: "refinement_mix",
            lhs: tape.shape(state).to_vec(),
            rhs: tape.shape(memory).to_vec(),
        });
    }
    let self_branch = |tape: &mut Tape<F>| attention(tape, store, &p.self_attn, state, state, batch, mask, None);
    let cross_branch = |tape: &mut Tape<F>| attention(tape, store, cross, state, memory, batch, mask, None);
    match dropnet.mode {
        DropNetMode::TrainSample => {
            let rng = rng.ok_or_else(|| {
                TensorError::Usage("drop-net train-sample mode requires an rng".into())
            })?;
            if rng.gen::<f64>() < dropnet.beta {
                self_branch(tape)
            } else {
                cross_branch(tape)
            }
        }
        DropNetMode::InferenceMix => {
            if dropnet.beta == 1.0 {
                return self_branch(tape);
            }
            if dropnet.beta == 0.0 {
                return cross_branch(tape);
            }
            let s = self_branch(tape)?;
            let c = cross_branch(tape)?;
            let s = tape.scale(s, F::lit(dropnet.beta));
            let c = tape.scale(c, F::lit(1.0 - dropnet.beta));
            tape.add(s, c)
        }
    }
}

/// One refinement-encoder layer: `h = LN(mix + state)`, output `LN(FFN(h) + h)`.
/// `memory` is the previous prototype, fixed for every layer of an iteration.
/// In train-sample mode the branch is drawn once per `layer` index per pass.
#[allow(clippy::too_many_arguments)]
pub fn refinement_encoder_layer<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderLayerParams,
    layer: usize,
    state: Var,
    memory: Var,
    batch: usize,
    mask: &AttnMask,
    beta: f64,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let mixed = match pass.dropnet_mode {
        DropNetMode::TrainSample => {
            // a degenerate beta selects the only branch with weight
            let beta = if pass.dropnet_draw(layer, beta)? { 1.0 } else { 0.0 };
            let fixed = DropNetConfig {
                beta,
                mode: DropNetMode::InferenceMix,
            };
            refinement_mix(tape, store, p, state, memory, batch, mask, fixed, None)?
        }
        DropNetMode::InferenceMix => {
            let mix = DropNetConfig {
                beta,
                mode: DropNetMode::InferenceMix,
            };
            refinement_mix(tape, store, p, state, memory, batch, mask, mix, None)?
        }
    };
    let mixed = pass.dropout(tape, mixed)?;
    let h = tape.add(mixed, state)?;
    let h = layer_norm(tape, store, &p.norm_attn, h)?;
    ffn_block(tape, store, p, h, pass)
}

/// Post-norm decoder layer: causal self-attention, cross-attention to
/// `memory`, feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &DecoderLayerParams,
    x: Var,
    memory: Var,
    batch: usize,
    self_mask: &AttnMask,
    memory_mask: &AttnMask,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    if !self_mask.causal {
        return Err(TensorError::Usage(
            "decoder self-attention requires a causal mask".into(),
        ));
    }
    let a = attention(tape, store, &p.self_attn, x, x, batch, self_mask, None)?;
    let a = pass.dropout(tape, a)?;
    let h = tape.add(a, x)?;
    let h = layer_norm(tape, store, &p.norm_self, h)?;
    let c = attention(tape, store, &p.cross_attn, h, memory, batch, memory_mask, None)?;
    let c = pass.dropout(tape, c)?;
    let h2 = tape.add(c, h)?;
    let h2 = layer_norm(tape, store, &p.norm_cross, h2)?;
    let f = feed_forward(tape, store, &p.ffn, h2)?;
    let f = pass.dropout(tape, f)?;
    let s = tape.add(f, h2)?;
    layer_norm(tape, store, &p.norm_ffn, s)
}

/// Sinusoidal position table: `pe[t, 2i] = sin(t / 10000^(2i/C))`,
/// `pe[t, 2i+1] = cos(t / 10000^(2i/C))`.
pub fn positional_encoding<F: Float>(len: usize, width: usize) -> Result<Tensor<F>> {
    if len == 0 || width == 0 || !width.is_multiple_of(2) {
        return Err(TensorError::Usage(format!(
            "positional encoding needs len >= 1 and an even width, got {len}x{width}"
        )));
    }
    let mut data = Vec::with_capacity(len * width);
    for t in 0..len {
        for i in 0..width / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            data.push(F::lit(angle.sin()));
            data.push(F::lit(angle.cos()));
        }
    }
    Tensor::new(vec![len, width], data)
}

/// Positional table repeated for every item of a `[batch * len, width]` batch.
pub fn batched_positions<F: Float>(batch: usize, len: usize, width: usize) -> Result<Tensor<F>> {
    let pe = positional_encoding::<F>(len, width)?;
    let mut data = Vec::with_capacity(batch * len * width);
    for _ in 0..batch {
        data.extend_from_slice(pe.data());
    }
    Tensor::new(vec![batch * len, width], data)
}

/// Largest element-wise `|mean - mix| / standard error` between `draws`
/// train-sample evaluations of a random refinement layer's mixed state and
/// its inference-mix value. Elements where every draw agrees with the mix
/// exactly count as 0.
pub fn dropnet_expectation_z(beta: f64, draws: usize, seed: u64) -> Result<f64> {
    if draws < 2 {
        return Err(TensorError::Usage("need at least two draws".into()));
    }
    let (width, rows) = (8, 4);
    let mut store = ParamStore::<f64>::new();
    let mut rng = crate::rng::stream(seed, crate::rng::STREAM_INIT);
    let p = Builder {
        store: &mut store,
        rng: &mut rng,
    }
    .encoder_layer("e2.layers.0", width, 2, 2 * width, true);
    let dist = Uniform::new(-1.0, 1.0);
    let state_t = Tensor::new(vec![rows, width], (0..rows * width).map(|_| dist.sample(&mut rng)).collect())?;
    let memory_t = Tensor::new(vec![rows, width], (0..rows * width).map(|_| dist.sample(&mut rng)).collect())?;
    let mask = AttnMask::none();
    let eval = |mode: DropNetMode, rng: Option<&mut Rng>| -> Result<Vec<f64>> {
        let mut tape = Tape::<f64>::inference();
        let s = tape.input(state_t.clone(), false);
        let m = tape.input(memory_t.clone(), false);
        let y = refinement_mix(&mut tape, &store, &p, s, m, 1, &mask, DropNetConfig { beta, mode }, rng)?;
        Ok(tape.value(y).data().to_vec())
    };
    let target = eval(DropNetMode::InferenceMix, None)?;
    let n = target.len();
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    let mut draw_rng = crate::rng::stream(seed, 1);
    for _ in 0..draws {
        for (i, v) in eval(DropNetMode::TrainSample, Some(&mut draw_rng))?.into_iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let d = draws as f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mean = sum[i] / d;
        let var = (sq[i] / d - mean * mean).max(0.0) * d / (d - 1.0);
        let se = (var / d).sqrt();
        let gap = (mean - target[i]).abs();
        let z = if se > 0.0 {
            gap / se
        } else if gap < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropnet_draws_are_shared_by_every_use_of_a_layer_in_one_pass() {
        let mut rng = crate::rng::stream(1, 1);
        let mut pass = Pass::train(0.0, &mut rng);
        let first: Vec<bool> = (0..3).map(|l| pass.dropnet_draw(l, 0.5).unwrap()).collect();
        for _ in 0..4 {
            let again: Vec<bool> = (0..3).map(|l| pass.dropnet_draw(l, 0.5).unwrap()).collect();
            assert_eq!(again, first);
        }
        let mut reference = crate::rng::stream(1, 1);
        let expected: Vec<bool> = (0..3).map(|_| reference.gen::<f64>() < 0.5).collect();
        assert_eq!(first, expected);
    }

    #[test]
    fn dropnet_draw_needs_an_rng() {
        let mut pass = Pass::eval();
        assert!(matches!(pass.dropnet_draw(0, 0.5), Err(TensorError::Usage(_))));
    }
}
