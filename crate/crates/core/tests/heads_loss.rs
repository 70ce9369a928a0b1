mod common;

use common::oracle;
use common::{tiny_data, tiny_model};
use infnet::features::Example;
use infnet::heads::{bce, multi_task_loss, predict, Heads};
use infnet::model::Ablation;
use infnet::params::{ForwardCtx, Init, ParamStore};
use infnet::tape::{Tape, Var};
use infnet::tensor::Tensor;
use infnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn heads(tasks: usize, d: usize, seed: u64) -> (ParamStore<f64>, Heads) {
    let mut store = ParamStore::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed), d);
    let h = Heads::new(&mut store, &mut init, tasks, d, None);
    (store, h)
}

fn run_predict(store: &ParamStore<f64>, h: &Heads, t: Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let tv = tape.constant(t);
    let y = predict(&mut tape, &p, h, tv, &mut ForwardCtx::eval()).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn zero_heads_predict_one_half() {
    let (mut store, h) = heads(3, 4, 1);
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let y = run_predict(&store, &h, Tensor::filled(&[3, 4], 2.5));
    assert_eq!(y, vec![0.5; 3]);
}

#[test]
fn two_unit_head_by_hand() {
    let (mut store, h) = heads(1, 2, 1);
    let m = h.mlps[0];
    *store.get_mut(m.hidden.w) = Tensor::from_rows(&[&[1.0, -1.0], &[2.0, 0.5]]).unwrap();
    *store.get_mut(m.hidden.b) = Tensor::from_rows(&[&[0.5, 0.0]]).unwrap();
    *store.get_mut(m.out.w) = Tensor::from_rows(&[&[1.5], &[-2.0]]).unwrap();
    *store.get_mut(m.out.b) = Tensor::from_rows(&[&[-0.25]]).unwrap();
    let y = run_predict(&store, &h, Tensor::from_rows(&[&[0.3, -0.4]]).unwrap());
    // hidden = relu([0.3 - 0.8 + 0.5, -0.3 - 0.2]) = [0, 0]
    assert!((y[0] - oracle::sigmoid(-0.25)).abs() < 1e-15);
    let y = run_predict(&store, &h, Tensor::from_rows(&[&[1.0, 0.2]]).unwrap());
    // hidden = relu([1 + 0.4 + 0.5, -1 + 0.1]) = [1.9, 0]; logit = 2.85 - 0.25
    assert!((y[0] - oracle::sigmoid(2.6)).abs() < 1e-15);
}

#[test]
fn extreme_inputs_stay_inside_the_unit_interval() {
    let (store, h) = heads(2, 3, 4);
    for v in [1e3, -1e3] {
        let y = run_predict(&store, &h, Tensor::filled(&[2, 3], v));
        assert!(
            y.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)),
            "{y:?}"
        );
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let wrong = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(predict(&mut tape, &p, &h, wrong, &mut ForwardCtx::eval()).is_err());
}

#[test]
fn bce_values() {
    assert!((bce(0.5, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce(1.0 - 1e-15, 1).unwrap() < 1e-11);
    assert!(bce(1e-15, 0).unwrap() < 1e-11);
    assert!(bce(0.0f64, 1).unwrap().is_finite());
    assert!((bce(0.0f64, 1).unwrap() + 1e-12f64.ln()).abs() < 1e-9);
    assert!(matches!(bce(0.3, 2), Err(Error::Schema(_))));
}

#[test]
fn sigmoid_then_bce_gradient_is_prediction_minus_label() {
    for (z, y) in [(0.7, 1u8), (-1.3, 0), (2.0, 0), (0.0, 1)] {
        let mut tape = Tape::new();
        let logit = tape.param(Tensor::filled(&[1, 1], z));
        let p = tape.sigmoid(logit);
        let loss = tape.bce(p, &[y as f64], &[1.0]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logit).unwrap()[0];
        let want = oracle::sigmoid(z) - y as f64;
        assert!((g - want).abs() < 1e-12, "z = {z}, y = {y}: {g} vs {want}");
        let h = 1e-6;
        let fd = (oracle::bce(oracle::sigmoid(z + h), y) - oracle::bce(oracle::sigmoid(z - h), y))
            / (2.0 * h);
        assert!((fd - want).abs() < 1e-8);
    }
}

fn random_examples(rng: &mut impl Rng, n: usize, tasks: usize) -> (Vec<Example>, Vec<Vec<f64>>) {
    let mut exs = Vec::new();
    let mut probs = Vec::new();
    for k in 0..n {
        let mut mask: Vec<bool> = (0..tasks).map(|_| rng.gen_bool(0.7)).collect();
        if k == 0 {
            mask[0] = true;
        }
        exs.push(Example {
            user_id: format!("u{k}"),
            categorical: vec![1],
            sequences: vec![vec![]],
            labels: (0..tasks).map(|_| rng.gen_range(0..=1)).collect(),
            label_mask: mask,
        });
        probs.push(
            (0..tasks)
                .map(|_| rng.gen_range(1e-6..1.0 - 1e-6))
                .collect(),
        );
    }
    (exs, probs)
}

fn loss_on_tape(probs: &[Vec<f64>], exs: &[Example], w: &[f64]) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = probs
        .iter()
        .map(|p| tape.param(Tensor::from_f64(&[p.len(), 1], p).unwrap()))
        .collect();
    let refs: Vec<&Example> = exs.iter().collect();
    let loss = multi_task_loss(&mut tape, &vars, &refs, w).unwrap();
    (tape, vars, loss)
}

#[test]
fn multi_task_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..250 {
        let tasks = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=8);
        let (exs, probs) = random_examples(&mut rng, n, tasks);
        let w: Vec<f64> = (0..tasks).map(|_| rng.gen_range(0.1..3.0)).collect();
        let (tape, _, loss) = loss_on_tape(&probs, &exs, &w);
        let refs: Vec<&Example> = exs.iter().collect();
        let want = oracle::multi_task_loss(&probs, &refs, &w);
        let got = tape.value(loss).item();
        assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
    }
}

#[test]
fn one_task_unit_weight_is_plain_mean_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut exs, probs) = random_examples(&mut rng, 6, 1);
    for e in &mut exs {
        e.label_mask = vec![true];
    }
    let (tape, _, loss) = loss_on_tape(&probs, &exs, &[1.0]);
    let mean = exs
        .iter()
        .zip(&probs)
        .map(|(e, p)| bce(p[0], e.labels[0]).unwrap())
        .sum::<f64>()
        / 6.0;
    assert!((tape.value(loss).item() - mean).abs() < 1e-15);
}

#[test]
fn task_weights_scale_gradients_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (exs, probs) = random_examples(&mut rng, 5, 3);
    let grads = |w: &[f64]| {
        let (mut tape, vars, loss) = loss_on_tape(&probs, &exs, w);
        let value = tape.value(loss).item();
        tape.backward(loss).unwrap();
        let g: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).unwrap().to_vec())
            .collect();
        (value, g)
    };
    let (l1, g1) = grads(&[1.0, 1.0, 1.0]);
    let (_, g2) = grads(&[1.0, 2.0, 1.0]);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((b[1] - 2.0 * a[1]).abs() < 1e-15);
        assert_eq!((a[0], a[2]), (b[0], b[2]));
    }
    let (l3, g3) = grads(&[3.0, 3.0, 3.0]);
    assert!((l3 - 3.0 * l1).abs() < 1e-13);
    for (a, b) in g1.iter().zip(&g3) {
        for (x, y) in a.iter().zip(b) {
            assert!((y - 3.0 * x).abs() < 1e-14);
        }
    }
}

#[test]
fn masked_tasks_carry_no_loss_or_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut exs, probs) = random_examples(&mut rng, 4, 2);
    for e in &mut exs {
        e.label_mask = vec![true, false];
    }
    let (mut tape, vars, loss) = loss_on_tape(&probs, &exs, &[1.0, 1.0]);
    tape.backward(loss).unwrap();
    for &v in &vars {
        assert_eq!(tape.grad(v).unwrap()[1], 0.0);
    }
    let before = tape.value(loss).item();
    for e in &mut exs {
        e.labels[1] ^= 1;
    }
    let (tape, _, loss) = loss_on_tape(&probs, &exs, &[1.0, 1.0]);
    assert_eq!(before.to_bits(), tape.value(loss).item().to_bits());

    for e in &mut exs {
        e.label_mask = vec![false, false];
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = probs
        .iter()
        .map(|p| tape.param(Tensor::from_f64(&[2, 1], p).unwrap()))
        .collect();
    let refs: Vec<&Example> = exs.iter().collect();
    let err = multi_task_loss(&mut tape, &vars, &refs, &[1.0, 1.0]).unwrap_err();
    assert!(matches!(err, Error::NoSignal), "{err}");
}

#[test]
fn masked_labels_do_not_reach_parameters() {
    let model = tiny_model(4, 2, Ablation::Full, 5);
    let mut exs = tiny_data(0.1, [16, 1, 1], 5).splits[0].clone();
    for e in &mut exs {
        e.label_mask = vec![true, false];
    }
    let grads = |exs: &[Example]| {
        let refs: Vec<&Example> = exs.iter().collect();
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let loss = model
            .batch_loss(&mut tape, &p, &refs, &[1.0, 1.0], &mut ForwardCtx::eval())
            .unwrap();
        tape.backward(loss).unwrap();
        p.vars()
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(|g| g.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            })
            .collect::<Vec<_>>()
    };
    let base = grads(&exs);
    for e in &mut exs {
        e.labels[1] ^= 1;
    }
    assert_eq!(base, grads(&exs));
    // The masked task's head is untouched.
    let model_params = model.params();
    let refs: Vec<&Example> = exs.iter().collect();
    let mut tape = Tape::new();
    let p = model_params.bind(&mut tape);
    let loss = model
        .batch_loss(&mut tape, &p, &refs, &[1.0, 1.0], &mut ForwardCtx::eval())
        .unwrap();
    tape.backward(loss).unwrap();
    let head1 = model.heads().mlps[1];
    for id in [head1.hidden.w, head1.hidden.b, head1.out.w, head1.out.b] {
        assert!(tape
            .grad(p.var(id))
            .is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn predictions_and_loss_are_finite() {
    let model = tiny_model(4, 2, Ablation::Full, 6);
    let exs = tiny_data(0.1, [64, 1, 1], 6).splits[0].clone();
    let probs = model.predict_batch(&exs).unwrap();
    for p in probs.iter().flatten() {
        assert!(*p > 0.0 && *p < 1.0);
    }
    let refs: Vec<&Example> = exs.iter().collect();
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let loss = model
        .batch_loss(&mut tape, &p, &refs, &[1.0, 1.0], &mut ForwardCtx::eval())
        .unwrap();
    assert!(tape.value(loss).item().is_finite());
}
