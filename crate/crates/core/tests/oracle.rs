use dflow_core::flows::FlowLayer;
use dflow_core::model::*;
use dflow_core::oracle::*;
use dflow_core::FlowError;
use proptest::prelude::*;

fn set(m: &mut DiscreteFlowModel, name: &str, values: &[f64]) {
    let id = m.params().find(name).unwrap();
    m.params_mut().get_mut(id).value.data_mut().copy_from_slice(values);
}

fn logits(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.ln()).collect()
}

const TABLE: [f64; 4] = [0.63, 0.07, 0.03, 0.27];

#[test]
fn uniform_base_has_flat_log_probs() {
    let m = DiscreteFlowModel::new(ModelConfig::new(3, 4, BaseKind::Factorized, FlowKind::None, 0), 0).unwrap();
    let r = enumerate_model(&m, None).unwrap();
    assert!((r.total_mass - 1.0).abs() < 1e-12);
    assert_eq!(r.max_log_prob, r.min_log_prob);
    assert_eq!(r.sequences, 64);
    assert!(r.bijective && r.passed && r.kl.is_none());
}

#[test]
fn random_two_layer_stack_is_normalized_and_bijective() {
    let mut cfg = ModelConfig::new(3, 5, BaseKind::Autoregressive, FlowKind::Autoregressive, 2);
    cfg.use_scale = true;
    cfg.hidden = vec![12];
    let mut m = DiscreteFlowModel::new(cfg, 3).unwrap();
    m.randomize(4, 2.0);
    let r = enumerate_model(&m, None).unwrap();
    assert!((r.total_mass - 1.0).abs() <= 1e-6);
    assert!(r.bijective && r.passed);
    assert!(r.max_log_prob > r.min_log_prob);
}

#[test]
fn non_coprime_scale_breaks_bijectivity_and_mass() {
    let mut m = DiscreteFlowModel::new(ModelConfig::new(2, 4, BaseKind::Factorized, FlowKind::Autoregressive, 1), 0).unwrap();
    m.randomize(1, 1.0);
    match &mut m.stack_mut().layers_mut()[0] {
        FlowLayer::Autoregressive(l) => l.inject_fault_scale(2),
        FlowLayer::Bipartite(_) => unreachable!(),
    }
    let r = enumerate_model(&m, None).unwrap();
    assert!(!r.bijective);
    assert!((r.total_mass - 1.0).abs() > 1e-6, "{}", r.total_mass);
    assert!(!r.passed);
    // forward images collide
    let x = sequence_block(0, 16, 2, 4);
    let y = m.forward(&x, None).unwrap();
    let distinct: std::collections::HashSet<&[usize]> = y.chunks(2).collect();
    assert!(distinct.len() < 16);
}

#[test]
fn entropy_examples() {
    assert!((exact_entropy(&[0.25; 4]).unwrap() - 1.3863).abs() < 1e-4);
    assert_eq!(exact_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
    assert!((exact_entropy(&TABLE).unwrap() - 0.936).abs() < 5e-4);
    assert!(matches!(exact_entropy(&[0.3, 0.3]), Err(FlowError::NotNormalized(_))));
}

/// The table as a factorized base with the fixed coupling `(x1, x1 ⊕ x2)`.
fn xor_model() -> DiscreteFlowModel {
    let mut cfg = ModelConfig::new(2, 2, BaseKind::Factorized, FlowKind::Bipartite, 1);
    cfg.masks = Some(vec![vec![true, false]]);
    cfg.hidden = vec![2];
    let mut m = DiscreteFlowModel::new(cfg, 0).unwrap();
    set(&mut m, "base.logits", &logits(&[0.7, 0.3, 0.9, 0.1]));
    set(&mut m, "flow0.direct.w", &[1.0, 0.0, 0.0, 1.0]);
    m
}

#[test]
fn kl_gap_examples() {
    assert!(kl_gap(&xor_model(), &TABLE).unwrap().abs() < 1e-9);

    // best factorized fit is the product of the marginals
    let mut f = DiscreteFlowModel::new(ModelConfig::new(2, 2, BaseKind::Factorized, FlowKind::None, 0), 0).unwrap();
    let (p1, p2) = ([0.7, 0.3], [0.66, 0.34]);
    set(&mut f, "base.logits", &logits(&[p1[0], p1[1], p2[0], p2[1]]));
    let gap = kl_gap(&f, &TABLE).unwrap();
    let mut want = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let p = TABLE[a * 2 + b];
            want += p * (p / (p1[a] * p2[b])).ln();
        }
    }
    assert!(gap > 0.1);
    assert!((gap - want).abs() < 1e-12);
    let ce = cross_entropy(&f, &TABLE).unwrap();
    assert!((ce - (gap + exact_entropy(&TABLE).unwrap())).abs() < 1e-12);
}

#[test]
fn enumeration_guard() {
    let m = DiscreteFlowModel::new(ModelConfig::new(20, 10, BaseKind::Factorized, FlowKind::None, 0), 0).unwrap();
    assert!(matches!(enumerate_model(&m, None), Err(FlowError::TooLarge { .. })));
    assert!(matches!(kl_gap(&m, &[1.0]), Err(FlowError::TooLarge { .. })));
}

#[test]
fn enumeration_is_lexicographic() {
    let m = xor_model();
    let lp = enumerate_log_probs(&m).unwrap();
    for (l, p) in lp.iter().zip(TABLE) {
        assert!((l - p.ln()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn kl_gap_is_nonnegative(
        seed in 0u64..1000,
        scale in 0.1f64..3.0,
        weights in prop::collection::vec(0.0f64..1.0, 27),
        bip in any::<bool>(),
    ) {
        let flow = if bip { FlowKind::Bipartite } else { FlowKind::Autoregressive };
        let mut cfg = ModelConfig::new(3, 3, BaseKind::Factorized, flow, 2);
        cfg.use_scale = true;
        cfg.hidden = vec![6];
        let mut m = DiscreteFlowModel::new(cfg, seed).unwrap();
        m.randomize(seed + 1, scale);
        let total: f64 = weights.iter().sum::<f64>() + 1e-9;
        let mut table: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let s: f64 = table.iter().sum();
        table[0] += 1.0 - s;
        prop_assume!(table[0] >= 0.0);
        prop_assert!(kl_gap(&m, &table).unwrap() >= -1e-12);
    }
}
