//! Acceptance suite. Prints one PASS/FAIL line per criterion. Runs without
//! the libtest harness so the lines always show. Failures are reported, and
//! turn into a non-zero exit when `ACCEPTANCE_STRICT` is set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ipslt::checkpoint::Checkpoint;
use ipslt::checks::{beam_matches_exhaustive, beam_one_matches_greedy};
use ipslt::config::RunConfig;
use ipslt::data::{decode_dataset, encode_dataset, generate_dataset, load_dataset, save_dataset, Sample, Splits, TaskKind};
use ipslt::decode::translate;
use ipslt::gradcheck::{check_model, GradCheckDims};
use ipslt::loss::compute_loss;
use ipslt::metrics::{bleu, rouge_l, score_corpus, token_accuracy, CorpusScore};
use ipslt::nn::dropnet_expectation_z;
use ipslt::train::Trainer;
use ipslt::{Model, ModelConfig, Tape, Tensor, Var};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = check_model(&GradCheckDims::default(), 11, None).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.group.as_str()).collect();
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} groups, max rel error {worst:.2e}, failing {failed:?}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn dropnet() -> Outcome {
    let zs: Vec<f64> = [0.2, 0.5, 0.8]
        .iter()
        .map(|&beta| dropnet_expectation_z(beta, 10_000, 3).expect("draws run"))
        .collect();
    outcome(zs.iter().all(|&z| z <= 3.0), format!("max z per beta 0.2/0.5/0.8: {zs:.2?}"))
}

fn small_model(iterations: usize) -> ModelConfig {
    ModelConfig {
        width: 16,
        heads: 2,
        layers: 2,
        ffn_dim: 32,
        iterations,
        dropout: 0.0,
        vocab_size: 9,
        window: 3,
        stride: 2,
        frame_dim: 5,
        ..ModelConfig::default()
    }
}

fn weight_sharing() -> Outcome {
    let counts: Vec<usize> = [1, 2, 4]
        .iter()
        .map(|&k| Model::<f32>::new(small_model(k), 1).unwrap().store.numel())
        .collect();
    let same_count = counts.windows(2).all(|w| w[0] == w[1]);

    let mut model = Model::<f32>::new(small_model(3), 2).unwrap();
    let mut rng = ipslt::rng::stream(2, 2);
    let inputs: Vec<Tensor<f32>> = (0..5)
        .map(|i| {
            let t = 4 + i;
            Tensor::new(vec![t, 5], (0..t * 5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect();
    let beam = ipslt::decode::BeamConfig::default();
    let run = |m: &Model<f32>| -> Vec<(Vec<usize>, u64)> {
        inputs
            .iter()
            .map(|x| {
                let t = translate(m, x, &beam, None).unwrap();
                (t.tokens, t.hypothesis.log_prob.to_bits())
            })
            .collect()
    };
    let before = run(&model);
    for id in model.params_in(&["d1"]) {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.gen_range(-5.0..5.0);
        }
    }
    let invariant = run(&model) == before;
    outcome(
        same_count && invariant,
        format!("parameter counts for K=1,2,4: {counts:?}; output unchanged after randomising d1: {invariant}"),
    )
}

fn logits(tape: &mut Tape<f64>, rows: usize, v: usize, seed: u64) -> Var {
    let mut rng = ipslt::rng::stream(seed, 9);
    let data = (0..rows * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
    tape.input(Tensor::new(vec![rows, v], data).unwrap(), false)
}

/// Cross-entropy and distillation recomputed from their definitions.
fn loss_oracle(rows: &[Vec<Vec<f64>>], gold: &[usize], lambda: f64) -> f64 {
    let softmax = |row: &[f64]| -> Vec<f64> {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        row.iter().map(|x| x.exp() / z).collect()
    };
    let real: Vec<usize> = (0..gold.len()).filter(|&r| gold[r] != ipslt::PAD).collect();
    let n = real.len() as f64;
    let ce = |b: &Vec<Vec<f64>>| real.iter().map(|&r| -softmax(&b[r])[gold[r]].ln()).sum::<f64>() / n;
    let k = rows.len() - 1;
    let mut idl = 0.0;
    for student in rows.iter().take(k).skip(1) {
        idl += real
            .iter()
            .map(|&r| {
                let p = softmax(&rows[k][r]);
                let q = softmax(&student[r]);
                p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
            })
            .sum::<f64>()
            / n;
    }
    ce(&rows[0]) + ce(&rows[k]) + lambda * idl
}

fn loss_structure() -> Outcome {
    let gold = [3, 4, 5, 6, 2, ipslt::PAD];
    let mut worst_gap = 0.0f64;
    for seed in 0..20u64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = (0..4).map(|i| logits(&mut tape, 6, 7, seed * 4 + i)).collect();
        let loss = compute_loss(&mut tape, &vars, &gold, 3, 15.0, ipslt::PAD).unwrap();
        let rows: Vec<Vec<Vec<f64>>> = vars
            .iter()
            .map(|&v| (0..6).map(|r| tape.value(v).row(r).to_vec()).collect())
            .collect();
        worst_gap = worst_gap.max((loss.breakdown.total - loss_oracle(&rows, &gold, 15.0)).abs());
    }

    let mut tape = Tape::<f64>::new();
    let pair: Vec<Var> = (0..2).map(|i| logits(&mut tape, 4, 5, i)).collect();
    let k1 = compute_loss(&mut tape, &pair, &[3, 4, 2, 0], 1, 15.0, ipslt::PAD).unwrap().breakdown;
    let (u0, u) = (logits(&mut tape, 4, 5, 7), logits(&mut tape, 4, 5, 8));
    let same = compute_loss(&mut tape, &[u0, u, u, u], &[3, 4, 2, 0], 3, 15.0, ipslt::PAD).unwrap().breakdown;
    let zero_idl = k1.idl == 0.0 && same.idl == 0.0;

    let vars: Vec<Var> = (0..4).map(|i| logits(&mut tape, 6, 7, 100 + i)).collect();
    let at = |tape: &mut Tape<f64>, lambda: f64| compute_loss(tape, &vars, &gold, 3, lambda, ipslt::PAD).unwrap().breakdown;
    let (a, b) = (at(&mut tape, 1.0), at(&mut tape, 15.0));
    let same_terms = a.ce0 == b.ce0 && a.ce_k == b.ce_k && a.idl == b.idl;
    let linear_gap = ((b.total - a.total) - 14.0 * a.idl).abs();
    let linear = same_terms && linear_gap <= 8.0 * f64::EPSILON * b.total.abs();

    outcome(
        worst_gap < 1e-9 && zero_idl && linear,
        format!(
            "oracle gap {worst_gap:.1e}; idl zero for K=1 and equal branches: {zero_idl}; terms identical across lambda: {same_terms}, slope gap {linear_gap:.1e}"
        ),
    )
}

fn decoding() -> Outcome {
    let greedy = beam_one_matches_greedy(100, 500).unwrap();
    let mut mismatches = 0;
    let mut gap = 0.0f64;
    // vocabularies of 4 and 6 ids, three of them special
    for (vocab, alpha, seed) in [(4, 0.0, 40), (4, 1.0, 60), (6, 0.0, 80), (6, 1.0, 100)] {
        let r = beam_matches_exhaustive(10, vocab, 4, alpha, seed).unwrap();
        mismatches += r.sequence_mismatches;
        gap = gap.max(r.max_score_gap);
    }
    outcome(
        greedy.mismatches == 0 && mismatches == 0 && gap <= 1e-9,
        format!(
            "width 1 vs greedy: {}/{} differ; beam vs exhaustive (|V| 4 and 6, max_len 4): {mismatches}/40 differ, score gap {gap:.1e}",
            greedy.mismatches, greedy.instances
        ),
    )
}

fn metrics() -> Outcome {
    let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let b = bleu(&[words("the cat")], &[words("the cat sat")], 4, false).unwrap();
    let r = rouge_l(&[words("a b c")], &[words("a c")]).unwrap();
    let hand = format!("{:.4}", b.scores[0]) == "0.6065" && format!("{r:.4}") == "0.8000";
    let corpus = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 3, 4], vec![5, 5, 6, 7, 8, 9]];
    let s = score_corpus(&corpus, &corpus).unwrap();
    let ones = s.bleu().iter().all(|&x| x == 1.0) && s.rouge_l == 1.0 && s.bp == 1.0;
    outcome(
        hand && ones,
        format!("BLEU-1 {:.4}, ROUGE-L {r:.4}; identical corpus all 1.0: {ones}", b.scores[0]),
    )
}

/// Trains to completion and returns the best-dev model.
fn train(config: RunConfig, splits: &Splits) -> Model<f32> {
    let mut trainer = Trainer::new(config).unwrap();
    let mut best = None;
    while !trainer.is_finished() {
        if trainer.run_epoch(&splits.train, &splits.dev).unwrap().best {
            best = Some(trainer.model.clone());
        }
    }
    best.unwrap_or(trainer.model)
}

fn decode_all(model: &Model<f32>, config: &RunConfig, samples: &[Sample]) -> (CorpusScore, f64) {
    let hyps: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| translate(model, &s.frames, &config.beam, None).unwrap().tokens)
        .collect();
    let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.target.clone()).collect();
    (score_corpus(&hyps, &refs).unwrap(), token_accuracy(&hyps, &refs).unwrap())
}

fn learnability() -> Outcome {
    let mut config = RunConfig::default();
    // the copy task is noiseless
    config.model.dropout = 0.0;
    assert_eq!((config.model.width, config.model.iterations), (64, 3));
    assert_eq!((config.model.beta, config.lambda), (0.5, 15.0));
    assert_eq!((config.data.task, config.data.noise, config.data.vocab_size()), (TaskKind::Copy, 0.0, 20));
    assert_eq!((config.data.train, config.train.epochs), (2000, 30));
    let start = Instant::now();
    let splits = generate_dataset(&config.data).unwrap();
    let model = train(config.clone(), &splits);
    let (score, acc) = decode_all(&model, &config, &splits.test);
    let elapsed = start.elapsed();
    outcome(
        acc >= 0.99 && score.bleu4 >= 0.95 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "test token accuracy {acc:.4}, BLEU-4 {:.4}, {:.0}s",
            score.bleu4,
            elapsed.as_secs_f64()
        ),
    )
}

fn majority_config(seed: u64, iterations: usize, lambda: f64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        lambda,
        ..RunConfig::default()
    };
    c.model.iterations = iterations;
    c.data.seed = seed;
    c.data.task = TaskKind::WindowedMajority;
    c.data.noise = 0.5;
    c.data.min_len = 12;
    c.data.max_len = 30;
    c.data.train = 600;
    c.data.dev = 200;
    c.data.test = 1;
    c.model.dropout = 0.0;
    c.train.epochs = 25;
    c
}

/// Dev BLEU-4 of windowed-majority runs, indexed `[setting][seed]`.
fn majority_runs(settings: &[(usize, f64)]) -> Vec<Vec<f64>> {
    settings
        .iter()
        .map(|&(k, lambda)| {
            (0..3)
                .map(|seed| {
                    let config = majority_config(seed, k, lambda);
                    let splits = generate_dataset(&config.data).unwrap();
                    let model = train(config.clone(), &splits);
                    decode_all(&model, &config, &splits.dev).0.bleu4
                })
                .collect()
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn iteration_trend(runs: &[Vec<f64>]) -> Outcome {
    let m: Vec<f64> = runs.iter().map(|r| mean(r)).collect();
    let pass = m[2] > m[0] && m[3] >= m[1] && m[1..].iter().all(|&x| x - m[0] > 0.02);
    outcome(
        pass,
        format!(
            "mean dev BLEU-4 for K=0..3: {:.4} {:.4} {:.4} {:.4}",
            m[0], m[1], m[2], m[3]
        ),
    )
}

fn distillation_trend(with: &[f64], without: &[f64]) -> Outcome {
    let wins = with.iter().zip(without).filter(|(a, b)| a > b).count();
    let gap = mean(with) - mean(without);
    outcome(
        gap > 0.0 && wins >= 2,
        format!("mean dev BLEU-4 lambda=15 minus lambda=0: {gap:+.4}; better in {wins}/3 seeds"),
    )
}

fn persistence() -> Outcome {
    let mut config = majority_config(5, 2, 15.0);
    config.model.width = 16;
    config.model.heads = 2;
    config.model.ffn_dim = 32;
    config.data.train = 40;
    config.data.dev = 10;
    config.data.test = 10;
    config.train.epochs = 3;
    config.train.warm_start_max_epochs = 1;
    let splits = generate_dataset(&config.data).unwrap();
    let run = || {
        let mut t = Trainer::new(config.clone()).unwrap();
        while !t.is_finished() {
            t.run_epoch(&splits.train, &splits.dev).unwrap();
        }
        Checkpoint::from_trainer(&t).to_bytes()
    };
    let first = run();
    let reproducible = first == run();
    let checkpoint = Checkpoint::from_bytes(&first).unwrap().to_bytes() == first;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.tsv");
    save_dataset(&splits.train, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let dataset = load_dataset(&path).unwrap() == splits.train
        && encode_dataset(&decode_dataset(&text).unwrap()).unwrap() == text;
    outcome(
        reproducible && checkpoint && dataset,
        format!("training bitwise reproducible: {reproducible}; checkpoint round trip: {checkpoint}; dataset round trip: {dataset}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2}: {} ({}) [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report(1, &mut gradients);
    report(2, &mut dropnet);
    report(3, &mut weight_sharing);
    report(4, &mut loss_structure);
    report(5, &mut decoding);
    report(6, &mut metrics);
    report(7, &mut learnability);
    let mut runs = Vec::new();
    report(8, &mut || {
        runs = majority_runs(&[(0, 15.0), (1, 15.0), (2, 15.0), (3, 15.0), (3, 0.0)]);
        iteration_trend(&runs[..4])
    });
    report(9, &mut || {
        if runs.len() < 5 {
            return outcome(false, "windowed-majority runs did not complete");
        }
        distillation_trend(&runs[3], &runs[4])
    });
    report(10, &mut persistence);
    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
