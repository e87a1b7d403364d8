use dflow_core::datagen::{gen_full_rank, Dataset, FullRankSpec};
use dflow_core::model::*;
use dflow_core::oracle::{enumerate_model, sequence_block};
use dflow_core::FlowError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(m: &mut DiscreteFlowModel, name: &str, values: &[f64]) {
    let id = m.params().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.params_mut().get_mut(id).value.data_mut().copy_from_slice(values);
}

/// Factorized base [0.7, 0.3] × [0.9, 0.1] with the fixed coupling
/// `(x1, x2) ↦ (x1, x1 + x2 mod 2)`.
fn xor_model() -> DiscreteFlowModel {
    let mut cfg = ModelConfig::new(2, 2, BaseKind::Factorized, FlowKind::Bipartite, 1);
    cfg.masks = Some(vec![vec![true, false]]);
    cfg.hidden = vec![2];
    let mut m = DiscreteFlowModel::new(cfg, 0).unwrap();
    set(&mut m, "base.logits", &[0.7f64.ln(), 0.3f64.ln(), 0.9f64.ln(), 0.1f64.ln()]);
    // μ logits equal the one-hot of the kept symbol
    set(&mut m, "flow0.direct.w", &[1.0, 0.0, 0.0, 1.0]);
    m
}

#[test]
fn xor_construction_reproduces_table() {
    let m = xor_model();
    let nll = m.nll(&[0, 0, 0, 1, 1, 0, 1, 1], None).unwrap();
    let probs: Vec<f64> = nll.iter().map(|v| (-v).exp()).collect();
    for (p, want) in probs.iter().zip([0.63, 0.07, 0.03, 0.27]) {
        assert!((p - want).abs() < 1e-12, "{probs:?}");
    }
    assert!((nll[0] + 0.63f64.ln()).abs() < 1e-12);
}

#[test]
fn nll_is_base_log_prob_of_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (flow, scale) in [(FlowKind::Autoregressive, true), (FlowKind::Bipartite, true), (FlowKind::Autoregressive, false)] {
        let (d, k) = (4, 5);
        let mut cfg = ModelConfig::new(d, k, BaseKind::Factorized, flow, 2);
        cfg.use_scale = scale;
        cfg.hidden = vec![8];
        let mut m = DiscreteFlowModel::new(cfg, 1).unwrap();
        m.randomize(2, 2.0);
        let y: Vec<usize> = (0..20 * d).map(|_| rng.random_range(0..k)).collect();
        let x = m.inverse(&y, None).unwrap();
        let id = m.params().find("base.logits").unwrap();
        let logits = m.params().value(id).data().to_vec();
        let nll = m.nll(&y, None).unwrap();
        for (seq, got) in x.chunks(d).zip(nll) {
            let mut want = 0.0;
            for (p, &s) in seq.iter().enumerate() {
                let row = &logits[p * k..(p + 1) * k];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                want -= row[s] - lse;
            }
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}

#[test]
fn random_models_are_normalized() {
    for (d, k) in [(3, 5), (8, 2)] {
        for (i, (base, flow)) in [
            (BaseKind::Factorized, FlowKind::Autoregressive),
            (BaseKind::Autoregressive, FlowKind::Autoregressive),
            (BaseKind::Factorized, FlowKind::Bipartite),
            (BaseKind::Autoregressive, FlowKind::None),
        ]
        .into_iter()
        .enumerate()
        {
            let mut cfg = ModelConfig::new(d, k, base, flow, if flow == FlowKind::None { 0 } else { 2 });
            cfg.use_scale = true;
            cfg.hidden = vec![8];
            let mut m = DiscreteFlowModel::new(cfg, i as u64).unwrap();
            m.randomize(i as u64 + 10, 2.0);
            let r = enumerate_model(&m, None).unwrap();
            assert!((r.total_mass - 1.0).abs() <= 1e-6, "D={d} K={k} {base:?}/{flow:?}: {}", r.total_mass);
            assert!(r.bijective && r.passed);
        }
    }
}

fn uniform_data(d: usize, k: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset::new(d, k, "uniform", (0..n * d).map(|_| rng.random_range(0..k)).collect()).unwrap()
}

#[test]
fn mass_is_conserved_after_training() {
    let spec = FullRankSpec::new(3, 5, 4).unwrap();
    let (data, _) = gen_full_rank(&spec, 2000, 5).unwrap();
    let mut cfg = ModelConfig::new(3, 5, BaseKind::Autoregressive, FlowKind::Autoregressive, 2);
    cfg.use_scale = true;
    cfg.hidden = vec![16];
    cfg.flow_init = 0.3;
    let mut m = DiscreteFlowModel::new(cfg, 0).unwrap();
    let opt = OptimizerConfig { steps: 200, lr: 0.01, ..Default::default() };
    train(&mut m, &data, None, &opt).unwrap();
    let r = enumerate_model(&m, None).unwrap();
    assert!((r.total_mass - 1.0).abs() <= 1e-6, "{}", r.total_mass);
}

#[test]
fn factorized_fit_to_uniform_reaches_max_entropy() {
    let (d, k) = (3, 4);
    let data = uniform_data(d, k, 50_000, 1);
    let mut m = DiscreteFlowModel::new(ModelConfig::new(d, k, BaseKind::Factorized, FlowKind::None, 0), 0).unwrap();
    let opt = OptimizerConfig { steps: 1000, lr: 0.01, ..Default::default() };
    train(&mut m, &data, None, &opt).unwrap();
    let nll = m.dataset_nll(&data).unwrap();
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    assert!((mean - d as f64 * (k as f64).ln()).abs() <= 0.01, "{mean}");
}

fn small_run(seed: u64) -> (TrainReport, Vec<u8>) {
    let data = uniform_data(4, 3, 500, 7);
    let (tr, ev) = data.split_at(400);
    let mut cfg = ModelConfig::new(4, 3, BaseKind::Autoregressive, FlowKind::Bipartite, 2);
    cfg.use_scale = true;
    cfg.hidden = vec![8];
    cfg.flow_init = 0.2;
    let mut m = DiscreteFlowModel::new(cfg, seed).unwrap();
    let opt = OptimizerConfig { steps: 60, eval_every: 20, seed, batch_size: 40, ..Default::default() };
    let r = train(&mut m, &tr, Some(&ev), &opt).unwrap();
    (r, m.to_bytes())
}

#[test]
fn training_is_deterministic() {
    let (a, ba) = small_run(3);
    let (b, bb) = small_run(3);
    let nlls = |r: &TrainReport| r.records.iter().map(|x| (x.step, x.train_nll.to_bits(), x.eval_nll.map(f64::to_bits))).collect::<Vec<_>>();
    assert_eq!(nlls(&a), nlls(&b));
    assert_eq!(ba, bb);
    assert_eq!(a.records.len(), 3);
    assert!(a.records.iter().all(|r| r.train_nll >= 0.0));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (_, bytes) = small_run(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dflw");
    let m = DiscreteFlowModel::from_bytes(&bytes).unwrap();
    m.save(&path).unwrap();
    let loaded = DiscreteFlowModel::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);
    assert_eq!(loaded.config(), m.config());
    let y = sequence_block(0, 81, 4, 3);
    let a: Vec<u64> = m.nll(&y, None).unwrap().into_iter().map(f64::to_bits).collect();
    let b: Vec<u64> = loaded.nll(&y, None).unwrap().into_iter().map(f64::to_bits).collect();
    assert_eq!(a, b);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (_, bytes) = small_run(2);
    let short = &bytes[..bytes.len() - 8];
    assert!(matches!(DiscreteFlowModel::from_bytes(short), Err(FlowError::ManifestMismatch(_))));
    let ragged = &bytes[..bytes.len() - 3];
    assert!(matches!(DiscreteFlowModel::from_bytes(ragged), Err(FlowError::ManifestMismatch(_))));
    let mut old = bytes.clone();
    old[4..8].copy_from_slice(&0u32.to_le_bytes());
    match DiscreteFlowModel::from_bytes(&old) {
        Err(e @ FlowError::VersionMismatch { found: 0, .. }) => assert!(e.to_string().contains('0')),
        other => panic!("{other:?}"),
    }
    assert!(matches!(DiscreteFlowModel::from_bytes(b"nope"), Err(FlowError::ManifestMismatch(_))));
}

#[test]
fn symbols_out_of_range_are_rejected() {
    let m = xor_model();
    assert!(matches!(m.nll(&[0, 2], None), Err(FlowError::SymbolOutOfRange { symbol: 2, k: 2 })));
}

#[test]
fn trained_table_model_reproduces_frequencies() {
    let table = vec![0.63, 0.07, 0.03, 0.27];
    let spec = FullRankSpec::from_table(2, 2, table.clone()).unwrap();
    let (data, _) = gen_full_rank(&spec, 10_000, 1).unwrap();
    let mut cfg = ModelConfig::new(2, 2, BaseKind::Factorized, FlowKind::Bipartite, 1);
    cfg.masks = Some(vec![vec![true, false]]);
    cfg.hidden = vec![8];
    let mut m = DiscreteFlowModel::new(cfg, 0).unwrap();
    train(&mut m, &data, None, &OptimizerConfig { steps: 2000, lr: 0.01, ..Default::default() }).unwrap();

    // the model's own probabilities, by enumeration
    let q: Vec<f64> = m.nll(&[0, 0, 0, 1, 1, 0, 1, 1], None).unwrap().iter().map(|v| (-v).exp()).collect();
    let n = 100_000;
    let (s, _) = m.sample(n, 9, None).unwrap();
    let mut counts = [0usize; 4];
    for c in s.chunks(2) {
        counts[c[0] * 2 + c[1]] += 1;
    }
    for i in 0..4 {
        let f = counts[i] as f64 / n as f64;
        let sd = (q[i] * (1.0 - q[i]) / n as f64).sqrt();
        assert!((f - q[i]).abs() <= 3.0 * sd, "cell {i}: {f} vs {}", q[i]);
        assert!((q[i] - table[i]).abs() < 0.02, "cell {i}: model {} vs table {}", q[i], table[i]);
    }
}

#[test]
fn factorized_samples_match_marginals() {
    let (d, k) = (2, 3);
    let mut m = DiscreteFlowModel::new(ModelConfig::new(d, k, BaseKind::Factorized, FlowKind::None, 0), 0).unwrap();
    m.randomize(4, 1.5);
    let id = m.params().find("base.logits").unwrap();
    let logits = m.params().value(id).data().to_vec();
    let n = 100_000;
    let (s, r) = m.sample(n, 1, None).unwrap();
    assert_eq!(r.total(), 0);
    for p in 0..d {
        let row = &logits[p * k..(p + 1) * k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for v in 0..k {
            let q = row[v].exp() / z;
            let f = s.chunks(d).filter(|c| c[p] == v).count() as f64 / n as f64;
            assert!((f - q).abs() <= 3.0 * (q * (1.0 - q) / n as f64).sqrt(), "pos {p} value {v}: {f} vs {q}");
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig::new(0, 3, BaseKind::Factorized, FlowKind::None, 0),
        ModelConfig::new(3, 1, BaseKind::Factorized, FlowKind::None, 0),
        {
            let mut c = ModelConfig::new(3, 3, BaseKind::Factorized, FlowKind::Bipartite, 1);
            c.masks = Some(vec![vec![true, true, true]]);
            c
        },
        {
            let mut c = ModelConfig::new(3, 3, BaseKind::Factorized, FlowKind::Autoregressive, 1);
            c.flow_init = -1.0;
            c
        },
    ];
    for cfg in bad {
        assert!(DiscreteFlowModel::new(cfg.clone(), 0).is_err(), "{cfg:?}");
    }
    let opt = OptimizerConfig { lr: 0.0, ..Default::default() };
    assert!(opt.validate().is_err());
}
