use dflow_core::flows::inverse_symbol;
use dflow_core::model::*;
use dflow_core::modular::Modulus;
use dflow_core::oracle::{is_bijective, sequence_block};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random 1–4 layer stack with randomized weights so that μ and σ vary.
fn random_model(d: usize, k: usize, seed: u64) -> DiscreteFlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flow = if rng.random_bool(0.5) || d == 1 { FlowKind::Autoregressive } else { FlowKind::Bipartite };
    let base = if rng.random_bool(0.5) { BaseKind::Factorized } else { BaseKind::Autoregressive };
    let mut cfg = ModelConfig::new(d, k, base, flow, rng.random_range(1..=4));
    cfg.use_scale = rng.random_bool(0.5);
    cfg.hidden = vec![rng.random_range(4..16)];
    if flow == FlowKind::Autoregressive && !cfg.use_scale && rng.random_bool(0.3) {
        cfg.conditioner = ConditionerKind::Embedding;
    }
    if flow == FlowKind::Bipartite && rng.random_bool(0.5) {
        // random nontrivial masks instead of the alternating default
        let masks = (0..cfg.flow_count)
            .map(|_| loop {
                let m: Vec<bool> = (0..d).map(|_| rng.random_bool(0.5)).collect();
                if m.iter().any(|&b| b) && m.iter().any(|&b| !b) {
                    break m;
                }
            })
            .collect();
        cfg.masks = Some(masks);
    }
    let mut m = DiscreteFlowModel::new(cfg, seed).unwrap();
    m.randomize(seed ^ 0x5eed, 3.0);
    m
}

fn all_sequences(d: usize, k: usize) -> Vec<usize> {
    sequence_block(0, k.pow(d as u32), d, k)
}

#[test]
fn exhaustive_round_trip_small_spaces() {
    let mut stacks = 0;
    for (d, k) in [(1, 2), (2, 3), (3, 5), (3, 4), (2, 5), (8, 2), (6, 2)] {
        let x = all_sequences(d, k);
        for seed in 0..20 {
            let m = random_model(d, k, seed * 31 + d as u64);
            let y = m.forward(&x, None).unwrap();
            assert_eq!(m.inverse(&y, None).unwrap(), x, "D={d} K={k} seed {seed} {:?}", m.config());
            assert_eq!(m.forward(&m.inverse(&x, None).unwrap(), None).unwrap(), x);
            stacks += 1;
        }
    }
    assert!(stacks >= 20);
}

#[test]
fn random_stacks_are_bijective() {
    for seed in 0..20 {
        let m = random_model(3, 5, 1000 + seed);
        assert!(is_bijective(&m).unwrap(), "{:?}", m.config());
    }
}

#[test]
fn sampled_round_trip_at_ten_by_ten() {
    let (d, k, n) = (10, 10, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<usize> = (0..n * d).map(|_| rng.random_range(0..k)).collect();
    for seed in 0..4 {
        let m = random_model(d, k, 500 + seed);
        let y = m.forward(&x, None).unwrap();
        let back = m.inverse(&y, None).unwrap();
        let mismatches = back.chunks(d).zip(x.chunks(d)).filter(|(a, b)| a != b).count();
        assert_eq!(mismatches, 0, "{:?}", m.config());
    }
}

#[test]
fn xor_flow_inverts_paper_example() {
    // f(x1, x2) = (x1, x1 ⊕ x2) as a single-position integer inverse
    let k = Modulus::new(2).unwrap();
    for x1 in 0..2 {
        for x2 in 0..2 {
            let y2 = (x1 + x2) % 2;
            assert_eq!(inverse_symbol(y2, x1, 1, k).unwrap(), x2);
        }
    }
    assert_eq!(inverse_symbol(3, 4, 3, Modulus::new(5).unwrap()).unwrap(), 3);
}

fn pass_model(d: usize, k: usize, base: BaseKind, flow: FlowKind, layers: usize) -> DiscreteFlowModel {
    let mut cfg = ModelConfig::new(d, k, base, flow, layers);
    cfg.hidden = vec![8];
    DiscreteFlowModel::new(cfg, 0).unwrap()
}

#[test]
fn sampling_pass_counts() {
    for d in [10, 256] {
        for layers in [1, 3, 8] {
            let m = pass_model(d, 4, BaseKind::Factorized, FlowKind::Bipartite, layers);
            let (_, r) = m.sample(5, 1, None).unwrap();
            assert_eq!(r.flow_passes, layers as u64, "bipartite D={d} L={layers}");
            assert_eq!(r.base_passes, 0);
        }
        for layers in [1, 2] {
            let m = pass_model(d, 4, BaseKind::Autoregressive, FlowKind::Autoregressive, layers);
            let (_, r) = m.sample(5, 1, None).unwrap();
            assert_eq!(r.flow_passes, (d * layers) as u64, "AR D={d} L={layers}");
            assert_eq!(r.base_passes, d as u64);
        }
    }
}

#[test]
fn inverse_uses_one_pass_per_layer() {
    for (flow, layers) in [(FlowKind::Autoregressive, 3), (FlowKind::Bipartite, 4)] {
        let m = pass_model(10, 4, BaseKind::Factorized, flow, layers);
        m.stack().reset_passes();
        m.inverse(&[1; 30], None).unwrap();
        assert_eq!(m.stack().passes(), layers as u64);
        assert!(m.stack().layers().iter().all(|l| l.passes().get() == 1));
        assert_eq!(
            m.stack().layers().iter().filter(|l| l.is_autoregressive()).count(),
            if flow == FlowKind::Autoregressive { layers } else { 0 }
        );
    }
}
