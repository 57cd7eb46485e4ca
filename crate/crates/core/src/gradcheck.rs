//! Central finite-difference gradient checks in `f64`.
//!
//! The numeric side only ever evaluates forward passes on an inference tape,
//! so it shares no code with the gradient rules it checks.

use std::collections::HashMap;

use crate::loss::compute_loss_with_teacher;
use crate::model::{Model, ModelConfig, TokenBatch, BOS, EOS, PAD};
use crate::nn::Pass;
use crate::params::ParamId;
use crate::tape::{OpKind, Tape};
use crate::tensor::{Result, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so entries whose true gradient
/// is essentially zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Model dimensions for the full-model check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckDims {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub iterations: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            width: 8,
            heads: 2,
            layers: 1,
            iterations: 2,
        }
    }
}

impl std::str::FromStr for GradCheckDims {
    type Err = String;

    /// Parses `C,heads,L_e,K`, e.g. `8,2,1,2`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad dims `{s}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match parts[..] {
            [width, heads, layers, iterations] => Ok(Self {
                width,
                heads,
                layers,
                iterations,
            }),
            _ => Err(format!("dims must be `C,heads,L_e,K`, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// A small two-item batch with different lengths so padding masks are live.
pub fn probe_batch(config: &ModelConfig, seed: u64) -> (Vec<Tensor<f64>>, TokenBatch, Vec<usize>) {
    use rand::Rng as _;
    let mut rng = crate::rng::stream(seed, 77);
    let mut frames = Vec::new();
    for t_x in [5usize, 3] {
        let data = (0..t_x * config.frame_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        frames.push(Tensor::new(vec![t_x, config.frame_dim], data).expect("dims"));
    }
    let sym = |rng: &mut crate::rng::Rng| rng.gen_range(EOS + 1..config.vocab_size);
    let a: Vec<usize> = (0..3).map(|_| sym(&mut rng)).collect();
    let b: Vec<usize> = (0..1).map(|_| sym(&mut rng)).collect();
    let inputs: Vec<Vec<usize>> = [&a, &b]
        .iter()
        .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
        .collect();
    let tokens = TokenBatch::from_sequences(&inputs).expect("non-empty");
    let mut gold = Vec::new();
    for t in [&a, &b] {
        let mut out: Vec<usize> = t.clone();
        out.push(EOS);
        out.resize(tokens.len, PAD);
        gold.extend(out);
    }
    (frames, tokens, gold)
}

pub fn gradcheck_config(dims: &GradCheckDims) -> ModelConfig {
    ModelConfig {
        width: dims.width,
        heads: dims.heads,
        layers: dims.layers,
        ffn_dim: 2 * dims.width,
        iterations: dims.iterations,
        beta: 0.5,
        dropout: 0.0,
        vocab_size: 7,
        window: 3,
        stride: 2,
        frame_dim: 4,
        decoder_reads_features: false,
    }
}

const LAMBDA: f64 = 1.5;

fn total_loss(
    model: &Model<f64>,
    tape: &mut Tape<f64>,
    frames: &[Tensor<f64>],
    tokens: &TokenBatch,
    gold: &[usize],
    teacher: Option<&Tensor<f64>>,
) -> Result<(crate::tape::Var, Tensor<f64>)> {
    let refs: Vec<&Tensor<f64>> = frames.iter().collect();
    let mut pass = Pass::eval();
    let logits = model.forward_train(tape, &refs, tokens, &mut pass)?;
    let k = model.config.iterations;
    let last = tape.value(logits[k]).clone();
    let loss = compute_loss_with_teacher(tape, &logits, gold, k, LAMBDA, PAD, teacher)?;
    Ok((loss.total, last))
}

/// Checks every scalar parameter of a randomly initialised model against
/// central differences of the full training objective (drop-net in
/// inference-mix mode so both attention branches carry gradient). The
/// distillation teacher is held at its unperturbed logits on the numeric side.
/// Returns one report per parameter group.
pub fn check_model(dims: &GradCheckDims, seed: u64, fault: Option<OpKind>) -> Result<Vec<GroupReport>> {
    let config = gradcheck_config(dims);
    let mut model = Model::<f64>::new(config.clone(), seed).map_err(crate::TensorError::Usage)?;
    let (frames, tokens, gold) = probe_batch(&config, seed);

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let (loss, teacher) = total_loss(&model, &mut tape, &frames, &tokens, &gold, None)?;
    tape.backward(loss)?;
    let analytic: HashMap<ParamId, Vec<f64>> = tape
        .param_grads()
        .into_iter()
        .map(|(id, g)| (id, g.to_vec()))
        .collect();
    drop(tape);

    let mut reports: Vec<GroupReport> = model
        .store
        .groups()
        .into_iter()
        .map(|group| GroupReport {
            group,
            max_rel_error: 0.0,
            checked: 0,
        })
        .collect();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let group = model.store.group(id).to_string();
        let n = model.store.get(id).numel();
        let zeros = vec![0.0; n];
        let a = analytic.get(&id).unwrap_or(&zeros).clone();
        let x0 = model.store.get(id).data().to_vec();
        let numeric = numeric_gradient(
            |x| {
                model.store.get_mut(id).data_mut().copy_from_slice(x);
                let mut t = Tape::inference();
                let (l, _) = total_loss(&model, &mut t, &frames, &tokens, &gold, Some(&teacher))
                    .expect("forward");
                t.value(l).item()
            },
            &x0,
            DEFAULT_STEP,
        );
        model.store.get_mut(id).data_mut().copy_from_slice(&x0);
        let err = max_relative_error(&a, &numeric);
        let r = reports
            .iter_mut()
            .find(|r| r.group == group)
            .expect("group registered");
        r.max_rel_error = r.max_rel_error.max(err);
        r.checked += n;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_cubic() {
        let g = numeric_gradient(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for dims in [
            GradCheckDims::default(),
            GradCheckDims { iterations: 0, ..Default::default() },
            GradCheckDims { iterations: 3, ..Default::default() },
        ] {
            for r in check_model(&dims, 11, None).unwrap() {
                assert!(r.passed(), "{dims:?} {} {:e}", r.group, r.max_rel_error);
            }
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let reports = check_model(&GradCheckDims::default(), 11, Some(OpKind::LayerNorm)).unwrap();
        assert!(reports.iter().any(|r| !r.passed()));
    }

    #[test]
    fn dims_parse() {
        let d: GradCheckDims = "8,2,1,2".parse().unwrap();
        assert_eq!(d, GradCheckDims::default());
        assert!("8,2".parse::<GradCheckDims>().is_err());
    }
}
