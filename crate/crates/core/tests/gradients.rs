use dflow_core::autodiff::*;
use dflow_core::modular::{coprime_mask, Modulus};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Gradient of `Σ_i w_i · st(θ)_i` with respect to `θ`.
fn st_grad(theta: &[f64], w: &[f64], tau: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let t = tape.input(Tensor::new(vec![theta.len()], theta.to_vec()).unwrap());
    let wv = tape.constant(Tensor::new(vec![w.len()], w.to_vec()).unwrap());
    let p = tape.st_one_hot_argmax(t, tau).unwrap();
    let prod = tape.mul(p, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap().get(t).unwrap().to_vec()
}

#[test]
fn straight_through_backward_is_the_tempered_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..200 {
        let k = 2 + trial % 9;
        let tau = [0.1, 0.5, 1.0, 2.0][trial % 4];
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jac = softmax_temperature_jacobian(&theta, tau);
        // independent route: p_i (δ_ij − p_j) / τ from a direct softmax
        let z: Vec<f64> = theta.iter().map(|t| (t / tau).exp()).collect();
        let zs: f64 = z.iter().sum();
        let p: Vec<f64> = z.iter().map(|v| v / zs).collect();
        let g = st_grad(&theta, &w, tau);
        for j in 0..k {
            let expect: f64 = (0..k).map(|i| w[i] * p[i] * (f64::from(i == j) - p[j]) / tau).sum();
            let via_jac: f64 = (0..k).map(|i| w[i] * jac[i][j]).sum();
            assert!((g[j] - expect).abs() <= 1e-10, "trial {trial}: {} vs {expect}", g[j]);
            assert!((via_jac - expect).abs() <= 1e-10);
        }
    }
}

#[test]
fn straight_through_matches_relaxed_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let k = 2 + trial % 7;
        let mut store = ParamStore::new();
        let theta = store.add("theta", tensor(&[3, k], &mut rng, 0.3));
        let w: Vec<f64> = (0..3 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::new(vec![3, k], w).unwrap();
        let worst = finite_difference_check(
            |tape, s| {
                let t = tape.param(s, theta);
                let p = tape.st_one_hot_argmax(t, DEFAULT_TAU)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(p, wv)?;
                Ok(tape.sum(prod))
            },
            &store,
            1e-6,
            true,
        )
        .unwrap();
        assert!(worst <= 1e-4, "trial {trial}: error {worst}");
    }
}

#[test]
fn log_softmax_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mut store = ParamStore::new();
        let a = store.add("a", tensor(&[4, 6], &mut rng, 3.0));
        let w = tensor(&[4, 6], &mut rng, 1.0);
        let worst = finite_difference_check(
            |tape, s| {
                let v = tape.param(s, a);
                let ls = tape.log_softmax(v);
                let wv = tape.constant(w.clone());
                let prod = tape.mul(ls, wv)?;
                Ok(tape.sum(prod))
            },
            &store,
            1e-6,
            false,
        )
        .unwrap();
        assert!(worst <= 1e-5, "error {worst}");
    }
}

#[test]
fn masked_logits_get_no_gradient_and_never_win() {
    let k = 6;
    let mask = coprime_mask(Modulus::new(k).unwrap());
    let mut tape = Tape::new();
    let theta = tape.input(Tensor::new(vec![k], vec![9.0, 0.1, 5.0, 0.3, 7.0, 0.2]).unwrap());
    let masked = tape.masked_fill(theta, &mask).unwrap();
    let p = tape.st_one_hot_argmax(masked, 1.0).unwrap();
    assert_eq!(tape.value(p).argmax_last(), vec![5]);
    let w = tape.constant(Tensor::new(vec![k], (0..k).map(|i| i as f64).collect()).unwrap());
    let prod = tape.mul(p, w).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    let g = g.get(theta).unwrap();
    for s in [0, 2, 3, 4] {
        assert_eq!(g[s], 0.0);
    }
    assert!(g[1] != 0.0 && g[5] != 0.0);
}

#[test]
fn bilinear_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 5;
    let mut store = ParamStore::new();
    let a = store.add("a", tensor(&[2, k], &mut rng, 1.0));
    let b = store.add("b", tensor(&[2, k], &mut rng, 1.0));
    let c = store.add("c", tensor(&[2, k], &mut rng, 1.0));
    let mask = coprime_mask(Modulus::new(k).unwrap());
    let w = tensor(&[2, k], &mut rng, 1.0);
    let worst = finite_difference_check(
        |tape, s| {
            let pa = tape.param(s, a);
            let pb = tape.param(s, b);
            let sa = tape.softmax(pa);
            let sb = tape.softmax(pb);
            let sum = tape.mod_add(sa, sb)?;
            let diff = tape.mod_sub(sum, sb)?;
            let pc = tape.param(s, c);
            let masked = tape.masked_fill(pc, &mask)?;
            let sc = tape.softmax(masked);
            let mul = tape.mod_mul(sc, diff)?;
            let scaled = tape.mod_div(sc, mul)?;
            let scaled = tape.mod_mul(sc, scaled)?;
            let wv = tape.constant(w.clone());
            let prod = tape.mul(scaled, wv)?;
            Ok(tape.sum(prod))
        },
        &store,
        1e-6,
        false,
    )
    .unwrap();
    assert!(worst <= 1e-5, "error {worst}");
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::new();
        let wid = store.add("w", tensor(&[6, 4], &mut rng, 1.0));
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[3, 6], &mut rng, 1.0));
        let w = tape.param(&store, wid);
        let h = tape.matmul(x, w).unwrap();
        let p = tape.st_one_hot_argmax(h, 0.3).unwrap();
        let ls = tape.log_softmax(h);
        let prod = tape.mul(p, ls).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let mut bufs = vec![vec![0.0; 24]];
        g.accumulate_into(&mut bufs);
        (tape.value(loss).item().to_bits(), bufs[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn straight_through_forward_is_first_argmax(theta in prop::collection::vec(-3i32..3, 2..12)) {
        let theta: Vec<f64> = theta.into_iter().map(f64::from).collect();
        let mut tape = Tape::new();
        let t = tape.input(Tensor::new(vec![theta.len()], theta.clone()).unwrap());
        let p = tape.st_one_hot_argmax(t, 0.5).unwrap();
        let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = theta.iter().position(|&v| v == max).unwrap();
        let out = tape.value(p).data();
        for (i, &v) in out.iter().enumerate() {
            prop_assert_eq!(v, f64::from(i == first));
        }
    }

    #[test]
    fn tempered_jacobian_rows_sum_to_zero(
        theta in prop::collection::vec(-5.0f64..5.0, 2..10),
        tau in 0.05f64..5.0,
    ) {
        for row in softmax_temperature_jacobian(&theta, tau) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
