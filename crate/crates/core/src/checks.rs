//! Oracle comparisons for the decoders on small random models.

use rand::Rng as _;

use crate::decode::{beam_decode, exhaustive_search, greedy_decode, BeamConfig, ModelScorer};
use crate::model::{Branch, Model, ModelConfig};
use crate::rng;
use crate::tensor::{Float, Result, Tensor};

fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        layers: 1,
        ffn_dim: 16,
        iterations: 1,
        dropout: 0.0,
        vocab_size,
        window: 2,
        stride: 1,
        frame_dim: 3,
        ..ModelConfig::default()
    }
}

/// A random model and a random prototype of `clips` rows.
pub fn random_instance<F: Float>(vocab_size: usize, clips: usize, seed: u64) -> (Model<F>, Tensor<F>) {
    let model = Model::new(tiny_config(vocab_size), seed).expect("valid config");
    let mut r = rng::stream(seed, 31);
    let c = model.config.width;
    // spread the prototype so the decoder's distributions are far from uniform
    let data = (0..clips * c).map(|_| F::lit(r.gen_range(-3.0..3.0))).collect();
    (model, Tensor::new(vec![clips, c], data).expect("positive dims"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyReport {
    pub instances: usize,
    pub mismatches: usize,
}

/// Width-1 beam search against greedy decoding on random `f32` models.
pub fn beam_one_matches_greedy(instances: usize, seed: u64) -> Result<GreedyReport> {
    let mut mismatches = 0;
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let vocab = 5 + (s % 8) as usize;
        let (model, memory) = random_instance::<f32>(vocab, 2 + (s % 5) as usize, s);
        let mut scorer = ModelScorer::new(&model, memory, None, Branch::D2);
        let max_len = 3 + (s % 6) as usize;
        let alpha = if i % 2 == 0 { 1.0 } else { 0.0 };
        let greedy = greedy_decode(&mut scorer, max_len)?;
        let cfg = BeamConfig {
            width: 1,
            length_penalty: alpha,
            max_len: Some(max_len),
        };
        let beam = beam_decode(&mut scorer, &cfg, max_len)?;
        if beam.tokens != greedy.tokens {
            mismatches += 1;
        }
    }
    Ok(GreedyReport {
        instances,
        mismatches,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExhaustiveReport {
    pub instances: usize,
    pub sequence_mismatches: usize,
    pub max_score_gap: f64,
}

/// Beam search wide enough never to prune, against brute-force enumeration
/// scored by whole-sequence teacher-forced passes, on `f64` models.
pub fn beam_matches_exhaustive(
    instances: usize,
    vocab_size: usize,
    max_len: usize,
    alpha: f64,
    seed: u64,
) -> Result<ExhaustiveReport> {
    let width = (vocab_size - 2).pow(max_len as u32);
    let mut report = ExhaustiveReport {
        instances,
        sequence_mismatches: 0,
        max_score_gap: 0.0,
    };
    for i in 0..instances {
        let (model, memory) = random_instance::<f64>(vocab_size, 3, seed.wrapping_add(i as u64));
        let mut scorer = ModelScorer::new(&model, memory, None, Branch::D2);
        let cfg = BeamConfig {
            width,
            length_penalty: alpha,
            max_len: Some(max_len),
        };
        let beam = beam_decode(&mut scorer, &cfg, max_len)?;
        let oracle = exhaustive_search(|t| scorer.sequence_log_prob(t), vocab_size, max_len, alpha)?;
        if beam.tokens != oracle.tokens {
            report.sequence_mismatches += 1;
        }
        report.max_score_gap = report.max_score_gap.max((beam.score(alpha) - oracle.score(alpha)).abs());
    }
    Ok(report)
}
