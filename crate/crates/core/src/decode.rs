//! Greedy and beam-search decoding from the final prototype.
//!
//! Scores accumulate in `f64`. A hypothesis of `n` generated tokens (EOS
//! included) is ranked by `log_prob / ((5 + n) / 6)^alpha`.

use std::cmp::Ordering;
use std::sync::atomic::Ordering as AtomicOrdering;

use serde::{Deserialize, Serialize};

use crate::model::{Branch, Model, SeqBatch, TokenBatch, BOS, EOS, PAD};
use crate::nn::Pass;
use crate::tape::Tape;
use crate::tensor::{log_softmax_row, Float, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub width: usize,
    pub length_penalty: f64,
    /// Cap on generated tokens (EOS included); `None` means `2 * T_f + 5`.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 3,
            length_penalty: 1.0,
            max_len: None,
        }
    }
}

pub fn default_max_len(clips: usize) -> usize {
    2 * clips + 5
}

/// GNMT length normaliser `((5 + n) / 6)^alpha`.
pub fn length_penalty(n: usize, alpha: f64) -> f64 {
    ((5.0 + n as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with [`BOS`]; ends with [`EOS`] when finished normally.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.generated(), alpha)
    }

    /// Tokens without BOS/EOS.
    pub fn output(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .copied()
            .filter(|&t| t != BOS && t != EOS)
            .collect()
    }
}

/// Next-token log-probabilities for a set of equal-length prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

fn selectable(token: usize) -> bool {
    token != BOS && token != PAD
}

/// Repeatedly takes the most likely token (lowest id on ties) until EOS or
/// `max_len` tokens.
pub fn greedy_decode(scorer: &mut dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(TensorError::Usage("max_len must be at least 1".into()));
    }
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    };
    while hyp.generated() < max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&hyp.tokens))?.remove(0);
        let mut best: Option<(usize, f64)> = None;
        for (t, &v) in lp.iter().enumerate() {
            if selectable(t) && best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        let (t, v) = best.ok_or_else(|| TensorError::Usage("no selectable token".into()))?;
        hyp.tokens.push(t);
        hyp.log_prob += v;
        if t == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Best-first comparison: higher score, then lexicographically smaller tokens.
fn better(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search. Each step ranks every one-token extension of the live
/// hypotheses and keeps the best `width`; those ending in EOS leave the beam,
/// so the beam shrinks as hypotheses finish. Hypotheses still live after
/// `max_len` tokens are finished as they stand. Returns the best finished
/// hypothesis by length-normalised score.
pub fn beam_decode(scorer: &mut dyn StepScorer, config: &BeamConfig, max_len: usize) -> Result<Hypothesis> {
    Ok(beam_search(scorer, config, max_len)?.remove(0))
}

/// All finished hypotheses of a beam search, best first.
pub fn beam_search(scorer: &mut dyn StepScorer, config: &BeamConfig, max_len: usize) -> Result<Vec<Hypothesis>> {
    if config.width == 0 {
        return Err(TensorError::Usage("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(TensorError::Usage("max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished = Vec::new();
    for step in 1..=max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        // (score, token, parent)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, lp) in lps.iter().enumerate() {
            for (t, &v) in lp.iter().enumerate() {
                if selectable(t) {
                    cands.push((live[parent].log_prob + v, t, parent));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(config.width);
        for &(score, t, parent) in cands.iter().take(config.width) {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(t);
            let h = Hypothesis {
                tokens,
                log_prob: score,
                finished: t == EOS,
            };
            if h.finished || step == max_len {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    finished.sort_by(|a, b| better(a, b, config.length_penalty));
    Ok(finished)
}

/// Brute-force oracle: scores every token sequence a beam search could return
/// (EOS-terminated within `max_len`, or `max_len` tokens without EOS) with
/// `log_prob` and returns the best under the same ranking.
pub fn exhaustive_search(
    mut log_prob: impl FnMut(&[usize]) -> Result<f64>,
    vocab_size: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    let symbols: Vec<usize> = (0..vocab_size).filter(|&t| selectable(t) && t != EOS).collect();
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![vec![BOS]];
    while let Some(prefix) = stack.pop() {
        let generated = prefix.len() - 1;
        let mut complete = Vec::new();
        if generated == max_len {
            complete.push(prefix);
        } else {
            let mut ended = prefix.clone();
            ended.push(EOS);
            complete.push(ended);
            for &t in &symbols {
                let mut p = prefix.clone();
                p.push(t);
                stack.push(p);
            }
        }
        for tokens in complete {
            let h = Hypothesis {
                log_prob: log_prob(&tokens)?,
                finished: true,
                tokens,
            };
            if best.as_ref().is_none_or(|b| better(&h, b, alpha) == Ordering::Less) {
                best = Some(h);
            }
        }
    }
    best.ok_or_else(|| TensorError::Usage("nothing to enumerate".into()))
}

/// Decoder-backed scorer over one input's prototype.
pub struct ModelScorer<'m, F> {
    model: &'m Model<F>,
    memory: Tensor<F>,
    features: Option<Tensor<F>>,
    branch: Branch,
}

impl<'m, F: Float> ModelScorer<'m, F> {
    /// `memory` (and `features`, when the decoder reads them) are
    /// `[T_f, C]` matrices for a single input.
    pub fn new(model: &'m Model<F>, memory: Tensor<F>, features: Option<Tensor<F>>, branch: Branch) -> Self {
        Self {
            model,
            memory,
            features,
            branch,
        }
    }

    /// Log-probability of `tokens[1..]` given `tokens[0] = BOS`, from a single
    /// teacher-forced pass.
    pub fn sequence_log_prob(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.len() < 2 || tokens[0] != BOS {
            return Err(TensorError::Usage("sequence must start with BOS and extend it".into()));
        }
        let mut tape = Tape::inference();
        let memory = Self::repeat(&mut tape, &self.memory, 1)?;
        let features = match &self.features {
            Some(f) => Some(Self::repeat(&mut tape, f, 1)?),
            None => None,
        };
        let n = tokens.len() - 1;
        let input = TokenBatch::from_sequences(&[tokens[..n].to_vec()])?;
        let logits = self.model.decode_teacher_forced(
            &mut tape,
            &memory,
            features.as_ref(),
            &input,
            self.branch,
            &mut Pass::eval(),
        )?;
        let u = tape.value(logits);
        Ok((0..n)
            .map(|t| log_softmax_row(u.row(t))[tokens[t + 1]].as_f64())
            .sum())
    }

    fn repeat(tape: &mut Tape<F>, t: &Tensor<F>, n: usize) -> Result<SeqBatch> {
        let rows = t.rows();
        let mut data = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let var = tape.constant(Tensor::new(vec![n * rows, t.cols()], data)?);
        Ok(SeqBatch {
            var,
            batch: n,
            len: rows,
            lens: vec![rows; n],
        })
    }
}

impl<F: Float> StepScorer for ModelScorer<'_, F> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let mut tape = Tape::inference();
        let memory = Self::repeat(&mut tape, &self.memory, n)?;
        let features = match &self.features {
            Some(f) => Some(Self::repeat(&mut tape, f, n)?),
            None => None,
        };
        let tokens = TokenBatch::from_sequences(prefixes)?;
        if tokens.lens.iter().any(|&l| l != tokens.len) {
            return Err(TensorError::Usage("prefixes must share a length".into()));
        }
        let logits = self.model.decode_teacher_forced(
            &mut tape,
            &memory,
            features.as_ref(),
            &tokens,
            self.branch,
            &mut Pass::eval(),
        )?;
        let u = tape.value(logits);
        Ok((0..n)
            .map(|i| {
                log_softmax_row(u.row(i * tokens.len + tokens.len - 1))
                    .into_iter()
                    .map(|v| v.as_f64())
                    .collect()
            })
            .collect())
    }
}

/// Result of translating one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub tokens: Vec<usize>,
    pub hypothesis: Hypothesis,
    /// Autoregressive decodes run for this input.
    pub decoder_calls: usize,
}

/// Encodes `frames` with `iterations` refinement passes (the trained count
/// when `None`) and runs one beam search. A model trained without refinement
/// decodes with `d1`; otherwise `d2` reads the final prototype, even when
/// `iterations` is overridden to 0.
pub fn translate<F: Float>(
    model: &Model<F>,
    frames: &Tensor<F>,
    beam: &BeamConfig,
    iterations: Option<usize>,
) -> Result<Translation> {
    decode_once(model, frames, beam.max_len, iterations, |scorer, max_len| {
        beam_decode(scorer, beam, max_len)
    })
}

/// As [`translate`] with greedy search.
pub fn translate_greedy<F: Float>(
    model: &Model<F>,
    frames: &Tensor<F>,
    max_len: Option<usize>,
    iterations: Option<usize>,
) -> Result<Translation> {
    decode_once(model, frames, max_len, iterations, |scorer, max_len| {
        greedy_decode(scorer, max_len)
    })
}

fn decode_once<F: Float>(
    model: &Model<F>,
    frames: &Tensor<F>,
    max_len: Option<usize>,
    iterations: Option<usize>,
    search: impl FnOnce(&mut dyn StepScorer, usize) -> Result<Hypothesis>,
) -> Result<Translation> {
    let trained = model.config.iterations;
    let k = iterations.unwrap_or(trained);
    if k > trained {
        return Err(TensorError::Usage(format!(
            "cannot decode with {k} refinement iterations; the model was trained with {trained}"
        )));
    }
    let mut tape = Tape::inference();
    let (features, proto) = model.forward_infer(&mut tape, &[frames], k)?;
    let memory = tape.value(proto.seq.var).clone();
    let features = model
        .config
        .decoder_reads_features
        .then(|| tape.value(features.var).clone());
    drop(tape);
    let clips = memory.rows();
    let max_len = max_len.unwrap_or_else(|| default_max_len(clips));
    let before = model.counters.autoregressive_decodes.fetch_add(1, AtomicOrdering::Relaxed);
    let mut scorer = ModelScorer::new(model, memory, features, model.inference_branch());
    let hypothesis = search(&mut scorer, max_len)?;
    let after = model.counters.autoregressive_decodes.load(AtomicOrdering::Relaxed);
    Ok(Translation {
        tokens: hypothesis.output(),
        hypothesis,
        decoder_calls: after - before,
    })
}
