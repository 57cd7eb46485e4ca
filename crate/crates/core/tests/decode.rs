use ipslt::checks::{beam_matches_exhaustive, beam_one_matches_greedy, random_instance};
use ipslt::decode::{beam_decode, beam_search, translate, BeamConfig, ModelScorer, StepScorer};
use ipslt::model::CallCounters;
use ipslt::{Branch, Model, ModelConfig, Tensor, TensorError, BOS, EOS};
use rand::Rng as _;

#[test]
fn width_one_beam_equals_greedy_on_random_models() {
    let r = beam_one_matches_greedy(100, 1).unwrap();
    assert_eq!(r.mismatches, 0);
}

#[test]
fn wide_beam_equals_exhaustive_enumeration() {
    for (vocab, alpha) in [(4, 1.0), (4, 0.0), (6, 1.0), (6, 0.0)] {
        let r = beam_matches_exhaustive(5, vocab, 4, alpha, 40).unwrap();
        assert_eq!(r.sequence_mismatches, 0, "vocab {vocab} alpha {alpha}");
        assert!(r.max_score_gap < 1e-9, "{r:?}");
    }
}

#[test]
fn zero_alpha_ranks_by_log_probability() {
    let (model, memory) = random_instance::<f64>(6, 3, 9);
    let mut scorer = ModelScorer::new(&model, memory, None, Branch::D2);
    let cfg = BeamConfig { width: 4, length_penalty: 0.0, max_len: Some(5) };
    let all = beam_search(&mut scorer, &cfg, 5).unwrap();
    assert!(all.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
}

#[test]
fn hypotheses_stop_at_eos_and_respect_max_len() {
    for seed in 0..20 {
        let (model, memory) = random_instance::<f32>(7, 4, seed);
        let mut scorer = ModelScorer::new(&model, memory, None, Branch::D2);
        let cfg = BeamConfig { width: 3, length_penalty: 1.0, max_len: None };
        for h in beam_search(&mut scorer, &cfg, 6).unwrap() {
            assert_eq!(h.tokens[0], BOS);
            assert!(h.generated() <= 6);
            assert!(h.output().len() <= 6);
            let eos: Vec<usize> = (0..h.tokens.len()).filter(|&i| h.tokens[i] == EOS).collect();
            assert!(eos.is_empty() || eos == vec![h.tokens.len() - 1]);
            assert_eq!(h.finished, !eos.is_empty());
        }
    }
}

/// Markov table keyed by the previous token.
struct Table(Vec<Vec<f64>>);

impl StepScorer for Table {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> ipslt::tensor::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.0[*p.last().unwrap()].clone()).collect())
    }
}

#[test]
fn a_wider_beam_can_end_with_a_worse_score() {
    // tokens: 3 = A, 4 = B, 5..=8 follow A, 9 and 10 follow B, 11..=20 follow 9 and 10
    let v = 21;
    let row = |pairs: &[(usize, f64)]| {
        let mut r = vec![1e-12f64.ln(); v];
        for &(t, p) in pairs {
            r[t] = p.ln();
        }
        r
    };
    let mut table = vec![row(&[]); v];
    table[BOS] = row(&[(3, 0.5), (4, 0.3)]);
    table[3] = row(&[(5, 0.25), (6, 0.25), (7, 0.25), (8, 0.25)]);
    table[4] = row(&[(9, 0.5), (10, 0.5)]);
    for r in &mut table[5..=8] {
        *r = row(&[(EOS, 1.0)]);
    }
    for t in [9, 10] {
        table[t] = row(&(11..=20).map(|s| (s, 0.1)).collect::<Vec<_>>());
    }
    let run = |width| {
        let cfg = BeamConfig { width, length_penalty: 0.0, max_len: Some(3) };
        beam_decode(&mut Table(table.clone()), &cfg, 3).unwrap()
    };
    let (narrow, wide) = (run(1), run(2));
    assert_eq!(narrow.tokens, vec![BOS, 3, 5, EOS]);
    assert!(wide.score(0.0) < narrow.score(0.0));
}

fn small(iterations: usize) -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        layers: 1,
        ffn_dim: 16,
        iterations,
        dropout: 0.0,
        vocab_size: 8,
        window: 2,
        stride: 2,
        frame_dim: 3,
        ..ModelConfig::default()
    }
}

fn frames(t_x: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ipslt::rng::stream(seed, 2);
    Tensor::new(vec![t_x, 3], (0..t_x * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn translation_decodes_once_whatever_the_iteration_count() {
    for k in [0, 1, 3] {
        let model = Model::<f32>::new(small(k), 3).unwrap();
        let f = frames(7, 1);
        let a = translate(&model, &f, &BeamConfig::default(), None).unwrap();
        let b = translate(&model, &f, &BeamConfig::default(), None).unwrap();
        assert_eq!(a.decoder_calls, 1);
        assert_eq!(a, b);
        assert_eq!(CallCounters::get(&model.counters.autoregressive_decodes), 2);
        if k > 0 {
            assert_eq!(CallCounters::get(&model.counters.d1_passes), 0);
        } else {
            assert_eq!(CallCounters::get(&model.counters.d2_passes), 0);
        }
        assert!(a.tokens.len() <= 2 * 4 + 5);
    }
}

#[test]
fn iteration_override_cannot_exceed_training() {
    let model = Model::<f32>::new(small(2), 4).unwrap();
    let f = frames(5, 2);
    assert!(translate(&model, &f, &BeamConfig::default(), Some(1)).is_ok());
    assert!(translate(&model, &f, &BeamConfig::default(), Some(0)).is_ok());
    assert!(matches!(
        translate(&model, &f, &BeamConfig::default(), Some(3)),
        Err(TensorError::Usage(_))
    ));
}

#[test]
fn translation_ignores_d1() {
    let mut model = Model::<f32>::new(small(2), 5).unwrap();
    let inputs: Vec<Tensor<f32>> = (0..5).map(|i| frames(4 + i, i as u64)).collect();
    let cfg = BeamConfig::default();
    let before: Vec<_> = inputs.iter().map(|f| translate(&model, f, &cfg, None).unwrap().hypothesis).collect();
    let mut rng = ipslt::rng::stream(9, 9);
    for id in model.params_in(&["d1"]) {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
    }
    let after: Vec<_> = inputs.iter().map(|f| translate(&model, f, &cfg, None).unwrap().hypothesis).collect();
    assert_eq!(before, after);
}
