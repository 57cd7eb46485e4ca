use ipslt::gradcheck::{max_relative_error, numeric_gradient, DEFAULT_STEP, TOLERANCE};
use ipslt::nn::{
    self, AttentionParams, Builder, DecoderLayerParams, DropNetConfig, DropNetMode,
    EncoderLayerParams, Pass,
};
use ipslt::{AttnMask, ParamStore, Tape, Tensor, TensorError, Var};
use rand::Rng as _;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ipslt::rng::stream(seed, 3);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn refinement_layer(width: usize, heads: usize, seed: u64) -> (ParamStore<f64>, EncoderLayerParams) {
    let mut store = ParamStore::new();
    let mut rng = ipslt::rng::stream(seed, 0);
    let p = Builder { store: &mut store, rng: &mut rng }.encoder_layer("e2.layers.0", width, heads, 2 * width, true);
    (store, p)
}

fn decoder(width: usize, heads: usize, seed: u64) -> (ParamStore<f64>, DecoderLayerParams) {
    let mut store = ParamStore::new();
    let mut rng = ipslt::rng::stream(seed, 0);
    let p = Builder { store: &mut store, rng: &mut rng }.decoder_layer("d1.layers.0", width, heads, 2 * width);
    (store, p)
}

fn identity_attention(width: usize) -> (ParamStore<f64>, AttentionParams) {
    let mut store = ParamStore::new();
    let mut eye = vec![0.0; width * width];
    for i in 0..width {
        eye[i * width + i] = 1.0;
    }
    let mut m = |name: &str| store.insert(name, Tensor::new(vec![width, width], eye.clone()).unwrap());
    let p = AttentionParams { w_q: m("a.q"), w_k: m("a.k"), w_v: m("a.v"), w_o: m("a.o"), heads: 1 };
    (store, p)
}

fn perturb(store: &mut ParamStore<f64>, ids: &[ipslt::ParamId], seed: u64) {
    let mut rng = ipslt::rng::stream(seed, 8);
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}

#[test]
fn hand_computed_two_key_attention() {
    let (store, p) = identity_attention(2);
    let mut tape = Tape::<f64>::inference();
    let q = tape.input(Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap(), false);
    let kv = tape.input(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(), false);
    let y = nn::attention(&mut tape, &store, &p, q, kv, 1, &AttnMask::none(), Some(1.0)).unwrap();
    let e = std::f64::consts::E;
    let expected = [e / (e + 1.0), 1.0 / (e + 1.0)];
    for (a, b) in tape.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((expected[0] - 0.7311).abs() < 5e-5 && (expected[1] - 0.2689).abs() < 5e-5);
}

#[test]
fn single_key_attention_projects_the_value() {
    let (store, p) = refinement_layer(4, 2, 1);
    let attn = p.self_attn;
    let mut tape = Tape::<f64>::inference();
    let q = tape.input(random(&[3, 4], 1), false);
    let kv = tape.input(random(&[1, 4], 2), false);
    let y = nn::attention(&mut tape, &store, &attn, q, kv, 1, &AttnMask::none(), None).unwrap();
    let wv = tape.param(&store, attn.w_v);
    let wo = tape.param(&store, attn.w_o);
    let a = tape.matmul(kv, wv).unwrap();
    let proj = tape.matmul(a, wo).unwrap();
    for row in 0..3 {
        for (x, y) in tape.value(y).row(row).iter().zip(tape.value(proj).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_average_the_values() {
    let (store, p) = identity_attention(3);
    let mut tape = Tape::<f64>::inference();
    let q = tape.input(random(&[2, 3], 1), false);
    let k = tape.input(Tensor::from_f64(vec![4, 3], &[0.5, -0.2, 0.1].repeat(4)).unwrap(), false);
    let v = tape.input(random(&[4, 3], 2), false);
    let (wq, wk, wv, wo) = (
        tape.param(&store, p.w_q),
        tape.param(&store, p.w_k),
        tape.param(&store, p.w_v),
        tape.param(&store, p.w_o),
    );
    let qq = tape.matmul(q, wq).unwrap();
    let kk = tape.matmul(k, wk).unwrap();
    let vv = tape.matmul(v, wv).unwrap();
    let ctx = tape.attention_core(qq, kk, vv, 1, 1, 0.9, &AttnMask::none()).unwrap();
    let y = tape.matmul(ctx, wo).unwrap();
    let vals = tape.value(v).clone();
    let mean: Vec<f64> = (0..3).map(|c| (0..4).map(|r| vals.row(r)[c]).sum::<f64>() / 4.0).collect();
    for row in 0..2 {
        for (a, b) in tape.value(y).row(row).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_attention_stays_in_the_hull_of_values() {
    let (store, p) = identity_attention(3);
    for seed in 0..20 {
        let mut tape = Tape::<f64>::inference();
        let q = tape.input(random(&[4, 3], seed), false);
        let kv = tape.input(random(&[5, 3], seed + 100), false);
        let y = nn::attention(&mut tape, &store, &p, q, kv, 1, &AttnMask::none(), None).unwrap();
        let vals = tape.value(kv).clone();
        for row in 0..4 {
            for c in 0..3 {
                let col: Vec<f64> = (0..5).map(|r| vals.row(r)[c]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let x = tape.value(y).row(row)[c];
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn beta_one_matches_a_plain_encoder_layer() {
    let (store, p) = refinement_layer(8, 2, 2);
    let mut tape = Tape::<f64>::inference();
    let state = tape.input(random(&[5, 8], 1), false);
    let memory = tape.input(random(&[5, 8], 2), false);
    let mask = AttnMask::none();
    let r = nn::refinement_encoder_layer(&mut tape, &store, &p, 0, state, memory, 1, &mask, 1.0, &mut Pass::eval()).unwrap();
    let e = nn::encoder_layer(&mut tape, &store, &p, state, 1, &mask, &mut Pass::eval()).unwrap();
    assert_eq!(tape.value(r).data(), tape.value(e).data());
    let other = tape.input(random(&[5, 8], 3), false);
    let r2 = nn::refinement_encoder_layer(&mut tape, &store, &p, 0, state, other, 1, &mask, 1.0, &mut Pass::eval()).unwrap();
    assert_eq!(tape.value(r).data(), tape.value(r2).data());
}

#[test]
fn beta_zero_ignores_the_self_attention_branch() {
    let (mut store, p) = refinement_layer(8, 2, 3);
    let mix = |store: &ParamStore<f64>| {
        let mut tape = Tape::<f64>::inference();
        let state = tape.input(random(&[5, 8], 1), false);
        let memory = tape.input(random(&[5, 8], 2), false);
        let cfg = DropNetConfig { beta: 0.0, mode: DropNetMode::InferenceMix };
        let y = nn::refinement_mix(&mut tape, store, &p, state, memory, 1, &AttnMask::none(), cfg, None).unwrap();
        tape.value(y).clone()
    };
    let before = mix(&store);
    let s = &p.self_attn;
    perturb(&mut store, &[s.w_q, s.w_k, s.w_v, s.w_o], 1);
    assert_eq!(before.data(), mix(&store).data());
}

#[test]
fn train_sample_without_rng_is_a_usage_error() {
    let (store, p) = refinement_layer(4, 2, 4);
    let mut tape = Tape::<f64>::inference();
    let x = tape.input(random(&[2, 4], 1), false);
    let cfg = DropNetConfig { beta: 0.5, mode: DropNetMode::TrainSample };
    let r = nn::refinement_mix(&mut tape, &store, &p, x, x, 1, &AttnMask::none(), cfg, None);
    assert!(matches!(r, Err(TensorError::Usage(_))));
}

#[test]
fn dropnet_monte_carlo_mean_matches_the_mix() {
    for beta in [0.2, 0.5, 0.8] {
        let z = nn::dropnet_expectation_z(beta, 10_000, 5).unwrap();
        assert!(z <= 3.0, "beta {beta}: z = {z}");
    }
}

#[test]
fn decoder_layer_is_causal() {
    let (store, p) = decoder(8, 2, 6);
    let run = |x: Tensor<f64>| {
        let mut tape = Tape::<f64>::inference();
        let x = tape.input(x, false);
        let mem = tape.input(random(&[3, 8], 9), false);
        let y = nn::decoder_layer(&mut tape, &store, &p, x, mem, 1, &AttnMask::causal(), &AttnMask::none(), &mut Pass::eval()).unwrap();
        tape.value(y).clone()
    };
    let base = random(&[5, 8], 1);
    let out = run(base.clone());
    for t in 0..4 {
        let mut changed = base.clone();
        for v in &mut changed.data_mut()[(t + 1) * 8..] {
            *v += 3.0;
        }
        let out2 = run(changed);
        assert_eq!(&out.data()[..(t + 1) * 8], &out2.data()[..(t + 1) * 8]);
        assert_ne!(&out.data()[(t + 1) * 8..], &out2.data()[(t + 1) * 8..]);
    }
}

#[test]
fn single_step_decoder_self_attention_is_single_key() {
    let (store, p) = decoder(4, 2, 7);
    let mut tape = Tape::<f64>::inference();
    let x = tape.input(random(&[1, 4], 1), false);
    let y = nn::attention(&mut tape, &store, &p.self_attn, x, x, 1, &AttnMask::causal(), None).unwrap();
    let wv = tape.param(&store, p.self_attn.w_v);
    let wo = tape.param(&store, p.self_attn.w_o);
    let a = tape.matmul(x, wv).unwrap();
    let proj = tape.matmul(a, wo).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(tape.value(proj).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decoder_layer_requires_a_causal_mask() {
    let (store, p) = decoder(4, 2, 8);
    let mut tape = Tape::<f64>::new();
    let x = tape.input(random(&[2, 4], 1), false);
    let r = nn::decoder_layer(&mut tape, &store, &p, x, x, 1, &AttnMask::none(), &AttnMask::none(), &mut Pass::eval());
    assert!(matches!(r, Err(TensorError::Usage(_))));
}

/// Finite-difference check of `sum(w * layer(inputs))` with respect to the
/// inputs and every layer parameter.
fn layer_fd(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Var,
) {
    let eval = |tape: &mut Tape<f64>, store: &ParamStore<f64>, xs: &[Tensor<f64>], grad: bool| {
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone(), grad)).collect();
        let y = f(tape, store, &vars);
        let w = tape.constant(random(tape.shape(y), 77));
        let p = tape.mul(y, w).unwrap();
        (tape.sum(p), vars)
    };
    let mut tape = Tape::new();
    let (loss, vars) = eval(&mut tape, store, inputs, true);
    tape.backward(loss).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = Tensor::new(x.shape().to_vec(), probe.to_vec()).unwrap();
                let mut t = Tape::inference();
                let (l, _) = eval(&mut t, store, &xs, false);
                t.value(l).item()
            },
            x.data(),
            DEFAULT_STEP,
        );
        let err = max_relative_error(tape.grad(vars[i]).unwrap(), &numeric);
        assert!(err < TOLERANCE, "input {i}: {err:e}");
    }
    let analytic: std::collections::HashMap<_, _> =
        tape.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
    let mut store = store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        let x0 = store.get(id).data().to_vec();
        let numeric = numeric_gradient(
            |probe| {
                store.get_mut(id).data_mut().copy_from_slice(probe);
                let mut t = Tape::inference();
                let (l, _) = eval(&mut t, &store, inputs, false);
                t.value(l).item()
            },
            &x0,
            DEFAULT_STEP,
        );
        store.get_mut(id).data_mut().copy_from_slice(&x0);
        let zeros = vec![0.0; x0.len()];
        let err = max_relative_error(analytic.get(&id).unwrap_or(&zeros), &numeric);
        assert!(err < TOLERANCE, "{}: {err:e}", store.name(id));
    }
}

#[test]
fn encoder_layers_pass_finite_differences() {
    let (store, p) = refinement_layer(6, 2, 9);
    let inputs = [random(&[2 * 3, 6], 1), random(&[2 * 3, 6], 2)];
    let mask = AttnMask::keys(vec![3, 2]);
    layer_fd(&store, &inputs, |tape, store, v| {
        nn::refinement_encoder_layer(tape, store, &p, 0, v[0], v[1], 2, &mask, 0.3, &mut Pass::eval()).unwrap()
    });
    let (store, p) = refinement_layer(6, 3, 10);
    layer_fd(&store, &inputs[..1], |tape, store, v| {
        let mut p = p.clone();
        p.cross_attn = None;
        nn::encoder_layer(tape, store, &p, v[0], 2, &mask, &mut Pass::eval()).unwrap()
    });
}

#[test]
fn decoder_layer_passes_finite_differences() {
    let (store, p) = decoder(6, 2, 11);
    let inputs = [random(&[2 * 4, 6], 1), random(&[2 * 3, 6], 2)];
    layer_fd(&store, &inputs, |tape, store, v| {
        nn::decoder_layer(tape, store, &p, v[0], v[1], 2, &AttnMask::causal(), &AttnMask::keys(vec![3, 1]), &mut Pass::eval())
            .unwrap()
    });
}

#[test]
fn positional_encoding_examples() {
    let pe = nn::positional_encoding::<f64>(3, 6).unwrap();
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let pe24 = nn::positional_encoding::<f64>(2, 4).unwrap();
    let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in pe24.row(1).iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    let longer = nn::positional_encoding::<f64>(4, 6).unwrap();
    assert_eq!(&longer.data()[..18], pe.data());
    assert!(nn::positional_encoding::<f64>(2, 3).is_err());
}
