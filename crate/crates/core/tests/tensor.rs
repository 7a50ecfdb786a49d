use diarkit::tensor::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check(f: impl Fn(&mut Graph, Var) -> diarkit::Result<Var>, shape: &[usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(shape, &mut rng);
    let err = grad_check(f, &x, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> diarkit::Result<Var> {
    // A fixed random projection so every output element gets its own weight.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.shape(y), &mut rng);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn elementwise_gradients() {
    check(|g, x| { let y = g.sigmoid(x); weighted_sum(g, y, 1) }, &[3, 4], 0);
    check(|g, x| { let y = g.tanh(x); weighted_sum(g, y, 2) }, &[3, 4], 1);
    check(|g, x| { let y = g.gelu(x); weighted_sum(g, y, 3) }, &[3, 4], 2);
    check(|g, x| { let y = g.exp(x); weighted_sum(g, y, 4) }, &[5], 3);
    check(|g, x| { let e = g.exp(x); let y = g.ln(e); weighted_sum(g, y, 5) }, &[5], 4);
    check(|g, x| { let y = g.scale(x, -2.5); let y = g.add_scalar(y, 0.3); weighted_sum(g, y, 6) }, &[2, 3], 5);
    check(|g, x| { let y = g.mul(x, x)?; Ok(g.mean(y)) }, &[2, 2, 3], 6);
}

#[test]
fn relu_gradient_away_from_kink() {
    let x = Tensor::new(&[4], vec![-0.7, -0.2, 0.4, 0.9]).unwrap();
    let f = |g: &mut Graph, x: Var| { let y = g.relu(x); weighted_sum(g, y, 9) };
    assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-4);
}

#[test]
fn broadcasting_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = rand_tensor(&[4], &mut rng);
    let col = rand_tensor(&[3, 1], &mut rng);
    check(|g, x| { let c = g.input(b.clone()); let y = g.add(x, c)?; weighted_sum(g, y, 1) }, &[3, 4], 7);
    check(|g, x| { let c = g.input(col.clone()); let y = g.sub(c, x)?; weighted_sum(g, y, 2) }, &[3, 4], 8);
    // Gradient flows back into the broadcast operand.
    let big = rand_tensor(&[2, 3, 4], &mut rng);
    check(|g, x| { let c = g.input(big.clone()); let y = g.mul(c, x)?; weighted_sum(g, y, 3) }, &[4], 9);
}

#[test]
fn structural_gradients() {
    check(|g, x| { let y = g.permute(x, &[2, 0, 1])?; weighted_sum(g, y, 1) }, &[2, 3, 4], 10);
    check(|g, x| { let y = g.reshape(x, &[6, 2])?; weighted_sum(g, y, 2) }, &[3, 4], 11);
    check(|g, x| { let y = g.narrow(x, 1, 1, 2)?; weighted_sum(g, y, 3) }, &[3, 4], 12);
    check(|g, x| { let y = g.gather_rows(x, &[2, 0, 2, 1])?; weighted_sum(g, y, 4) }, &[3, 2], 13);
    check(|g, x| { let s = g.scale(x, 2.0); let y = g.concat(&[x, s], 1)?; weighted_sum(g, y, 5) }, &[3, 2], 14);
}

#[test]
fn matmul_softmax_layernorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_tensor(&[4, 5], &mut rng);
    check(|g, x| { let c = g.input(w.clone()); let y = g.matmul(x, c)?; weighted_sum(g, y, 1) }, &[3, 4], 15);
    check(|g, x| { let c = g.input(w.clone()); let y = g.matmul(x, c)?; weighted_sum(g, y, 2) }, &[2, 3, 4], 16);
    check(|g, x| { let c = g.input(w.clone()); let t = g.transpose(c, 0, 1)?; let y = g.matmul(t, x)?; weighted_sum(g, y, 3) }, &[4, 2], 17);
    check(|g, x| { let y = g.softmax(x, 1)?; weighted_sum(g, y, 4) }, &[3, 5], 18);
    check(|g, x| { let y = g.softmax(x, 0)?; weighted_sum(g, y, 5) }, &[3, 5], 19);
    let gain = rand_tensor(&[5], &mut rng);
    let bias = rand_tensor(&[5], &mut rng);
    check(
        |g, x| {
            let a = g.input(gain.clone());
            let b = g.input(bias.clone());
            let y = g.layer_norm(x, a, b, 1e-5)?;
            weighted_sum(g, y, 6)
        },
        &[3, 5],
        20,
    );
}

#[test]
fn bce_gradients() {
    let target = Tensor::new(&[2, 3], vec![1., 0., 1., 0., 0., 1.]).unwrap();
    let w = Tensor::new(&[2, 3], vec![1., 1., 0.5, 1., 0., 1.]).unwrap();
    check(|g, x| g.bce_with_logits(x, &target, &w, 4.5), &[2, 3], 21);
    check(
        |g, x| {
            let p = g.sigmoid(x);
            g.bce_with_probs(p, &target, &w, 4.5)
        },
        &[2, 3],
        22,
    );
}

#[test]
fn lstm_gradients_wrt_input_and_weights() {
    let (i, h) = (3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w_ih = store.add("w_ih", rand_tensor(&[i, 4 * h], &mut rng));
    let w_hh = store.add("w_hh", rand_tensor(&[h, 4 * h], &mut rng));
    let b = store.add("b", rand_tensor(&[4 * h], &mut rng));
    for reverse in [false, true] {
        let f = |g: &mut Graph, x: Var| {
            let (a, c, d) = (g.param(w_ih), g.param(w_hh), g.param(b));
            let y = g.lstm(x, a, c, d, None, None, reverse)?;
            weighted_sum(g, y, 8)
        };
        let x = rand_tensor(&[2, 4, i], &mut rng);
        assert!(grad_check_with(Some(&store), f, &x, 1e-5).unwrap() < 1e-4);
        let x2 = x.clone();
        let fp = |g: &mut Graph| {
            let xv = g.input(x2.clone());
            f(g, xv)
        };
        assert!(grad_check_params(&store, fp, 1e-5).unwrap() < 1e-4);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_resist_overflow() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[2, 3], vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0]).unwrap());
    let y = g.softmax(x, 1).unwrap();
    let v = g.value(y);
    assert!(v.all_finite());
    for r in 0..2 {
        assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(v.at(&[0, 1]) > v.at(&[0, 0]));
}

#[test]
fn layer_norm_matches_formula() {
    let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x);
    let a = g.input(Tensor::ones(&[4]));
    let b = g.input(Tensor::zeros(&[4]));
    let y = g.layer_norm(xv, a, b, 0.0).unwrap();
    let mean = 3.0;
    let sd = ((4.0 + 1.0 + 0.0 + 9.0) / 4.0f64).sqrt();
    for (k, v) in [1.0, 2.0, 3.0, 6.0].iter().enumerate() {
        assert!((g.value(y).at(&[0, k]) - (v - mean) / sd).abs() < 1e-12);
    }
}

#[test]
fn backward_needs_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
    let c = g.input(Tensor::zeros(&[4]));
    assert!(g.add(a, c).is_err());
    assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut store = ParamStore::new();
    let w = store.full("w", &[2], 1.5);
    let mut g = Graph::inference(&store);
    let p = g.param(w);
    let y = g.sum(p);
    assert_eq!(g.value(y).item(), 3.0);
}

#[test]
fn adam_two_steps_by_hand() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[1], vec![1.0]).unwrap());
    let mut opt = Adam::new(&store, AdamConfig::default(), LrSchedule::constant(0.1));
    let grads = [0.5, -2.0];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut w) = (0.0, 0.0, 1.0);
    for (k, &gk) in grads.iter().enumerate() {
        store.zero_grad();
        store.accumulate(&[(id, Tensor::new(&[1], vec![gk]).unwrap())]);
        opt.step(&mut store).unwrap();
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * gk;
        v = b2 * v + (1.0 - b2) * gk * gk;
        w -= 0.1 * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        assert!((store.value(id).item() - w).abs() < 1e-15);
    }
}

#[test]
fn adam_fits_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[20, 3], &mut rng);
    let truth = Tensor::new(&[3, 1], vec![0.5, -1.0, 2.0]).unwrap();
    let y = x.matmul(&truth).unwrap();
    let mut store = ParamStore::new();
    let w = store.zeros("w", &[3, 1]);
    let mut opt = Adam::new(&store, AdamConfig::default(), LrSchedule::constant(0.05));
    for _ in 0..600 {
        let grads = {
            let mut g = Graph::with_params(&store);
            let xv = g.input(x.clone());
            let wv = g.param(w);
            let p = g.matmul(xv, wv).unwrap();
            let yv = g.input(y.clone());
            let d = g.sub(p, yv).unwrap();
            let sq = g.mul(d, d).unwrap();
            let l = g.mean(sq);
            let gr = g.backward(l).unwrap();
            g.param_grads(&gr)
        };
        store.zero_grad();
        store.accumulate(&grads);
        opt.step(&mut store).unwrap();
    }
    assert!(store.value(w).max_abs_diff(&truth) < 1e-3);
}

#[test]
fn schedule_warmup_and_decay() {
    let s = LrSchedule {
        peak: 2e-4,
        warmup_steps: 100,
        total_steps: 1100,
    };
    assert_eq!(s.at(0), 0.0);
    assert!((s.at(50) - 1e-4).abs() < 1e-18);
    assert_eq!(s.at(100), 2e-4);
    assert!((s.at(600) - 1e-4).abs() < 1e-18);
    assert_eq!(s.at(1100), 0.0);
}

#[test]
fn param_store_load_checks_shape() {
    let mut store = ParamStore::new();
    store.zeros("a", &[2, 2]);
    assert!(store.load("a", Tensor::ones(&[2, 2])).is_ok());
    assert!(store.load("a", Tensor::ones(&[4])).is_err());
    assert!(store.load("missing", Tensor::ones(&[1])).is_err());
    assert_eq!(store.num_scalars(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_loops(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|r| a.at(&[i, r]) * b.at(&[r, j])).sum();
                prop_assert!((c.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_round_trips(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[d0, d1, d2], &mut rng);
        let y = x.permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(y.shape(), &[d1, d2, d0]);
        prop_assert_eq!(y.permute(&[2, 0, 1]).unwrap(), x.clone());
        for i in 0..d0 { for j in 0..d1 { for l in 0..d2 {
            prop_assert_eq!(y.at(&[j, l, i]), x.at(&[i, j, l]));
        }}}
    }

    #[test]
    fn sum_of_broadcast_add(r in 1usize..5, c in 1usize..5, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[r, c], &mut rng);
        let b = rand_tensor(&[c], &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
        let y = g.add(av, bv).unwrap();
        let s = g.sum(y);
        let want = a.data().iter().sum::<f64>() + r as f64 * b.data().iter().sum::<f64>();
        prop_assert!((g.value(s).item() - want).abs() < 1e-10);
    }

    #[test]
    fn clipping_never_exceeds_bound(vals in proptest::collection::vec(-100.0f64..100.0, 1..10), max in 0.1f64..10.0) {
        let mut store = ParamStore::new();
        let id = store.zeros("w", &[vals.len()]);
        store.accumulate(&[(id, Tensor::new(&[vals.len()], vals.clone()).unwrap())]);
        let before = clip_grad_norm(&mut store, max);
        let after = store.get(id).grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        prop_assert!(after <= max * (1.0 + 1e-12) || after == before);
        prop_assert!(after <= before + 1e-12);
    }
}
