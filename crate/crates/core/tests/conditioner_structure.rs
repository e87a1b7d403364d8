use dflow_core::autodiff::{ParamStore, Tape, Tensor};
use dflow_core::conditioner::*;
use dflow_core::modular::{coprime_mask, Modulus};
use dflow_core::autodiff::MASKED_LOGIT;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

fn one_hot(seq: &[usize], d: usize, k: usize) -> Tensor {
    Tensor::one_hot(seq, seq.len() / d, d, k).unwrap()
}

/// Concatenated location and scale logits of a masked conditioner.
fn made_out(c: &MadeConditioner, store: &ParamStore, seq: &[usize], k: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(one_hot(seq, seq.len(), k));
    let (l, s) = c.forward(&mut tape, store, y, None).unwrap();
    let mut out = tape.value(l).data().to_vec();
    if let Some(s) = s {
        out.extend_from_slice(tape.value(s).data());
    }
    out
}

fn position_changed(a: &[f64], b: &[f64], d: usize, k: usize, pos: usize) -> bool {
    a.chunks(d * k).zip(b.chunks(d * k)).any(|(x, y)| x[pos * k..(pos + 1) * k] != y[pos * k..(pos + 1) * k])
}

#[test]
fn masked_outputs_depend_exactly_on_predecessors() {
    let (d, k) = (5, 4);
    for (seed, perm) in [vec![0, 1, 2, 3, 4], vec![4, 3, 2, 1, 0], vec![3, 0, 4, 2, 1]].into_iter().enumerate() {
        for hidden in [vec![3], vec![16], vec![12, 7]] {
            let ordering = Ordering::new(perm.clone()).unwrap();
            let rank = ordering.ranks();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let cfg = MaskedConditionerConfig {
                d,
                k,
                hidden: hidden.clone(),
                ordering,
                emit_scale: true,
                context_dim: 0,
            };
            let c = MadeConditioner::new(cfg, &mut store, "c", &mut rng).unwrap();
            randomize(&mut store, 100 + seed as u64);
            let base = [1, 3, 0, 2, 1];
            let b = made_out(&c, &store, &base, k);
            for j in 0..d {
                for delta in 1..k {
                    let mut seq = base;
                    seq[j] = (seq[j] + delta) % k;
                    let o = made_out(&c, &store, &seq, k);
                    for pos in 0..d {
                        let changed = position_changed(&b, &o, d, k, pos) || position_changed(&b[d * k..], &o[d * k..], d, k, pos);
                        if rank[j] >= rank[pos] {
                            assert!(!changed, "perm {perm:?} hidden {hidden:?}: output {pos} moved with input {j}");
                        } else if hidden[0] >= d {
                            assert!(changed, "perm {perm:?}: output {pos} ignores predecessor {j}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn coupling_outputs_ignore_transformed_positions() {
    use dflow_core::flows::BipartiteFlowLayer;
    let (d, k) = (4, 3);
    for keep in [vec![true, false, true, false], vec![false, true, true, false], vec![true, true, true, false]] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = BipartiteFlowLayer::new(d, k, &keep, &[8], true, 0, None, 0.1, &mut store, "b", &mut rng).unwrap();
        randomize(&mut store, 2);
        let kept: Vec<usize> = layer.kept().to_vec();
        let run = |seq: &[usize]| {
            let mut tape = Tape::new();
            let y = tape.constant(one_hot(seq, d, k));
            let yk = tape.select_positions(y, &kept).unwrap();
            let (l, s) = layer.conditioner().forward(&mut tape, &store, yk, None).unwrap();
            let mut out = tape.value(l).data().to_vec();
            out.extend_from_slice(tape.value(s.unwrap()).data());
            out
        };
        // scan all K^D inputs: outputs are a function of the kept symbols alone
        let mut seen: std::collections::HashMap<Vec<usize>, Vec<f64>> = Default::default();
        let mut seq = vec![0; d];
        for idx in 0..k.pow(d as u32) {
            let mut r = idx;
            for s in seq.iter_mut().rev() {
                *s = r % k;
                r /= k;
            }
            let key: Vec<usize> = kept.iter().map(|&p| seq[p]).collect();
            let out = run(&seq);
            let prev = seen.entry(key).or_insert_with(|| out.clone());
            assert_eq!(*prev, out, "mask {keep:?}: input {seq:?}");
        }
        assert_eq!(seen.len(), k.pow(kept.len() as u32));
    }
}

#[test]
fn embedding_lookup_uses_previous_symbol_row() {
    let (d, k) = (2, 2);
    let mut store = ParamStore::new();
    let e = EmbeddingTableConditioner::new(d, k, 1, Ordering::natural(d), &mut store, "e").unwrap();
    let id = store.find("e.table").unwrap();
    // rows: position·(K+1) + previous symbol, pad symbol = K
    assert_eq!(store.value(id).shape(), &[d * (k + 1), k]);
    let data: Vec<f64> = (0..d * (k + 1) * k).map(|v| v as f64).collect();
    store.get_mut(id).value.data_mut().copy_from_slice(&data);
    for (seq, rows) in [([0, 0], [2, 3]), ([0, 1], [2, 3]), ([1, 0], [2, 4]), ([1, 1], [2, 4])] {
        let mut tape = Tape::new();
        let y = tape.constant(one_hot(&seq, d, k));
        let out = e.forward(&mut tape, &store, y).unwrap();
        let expect: Vec<f64> = rows.iter().flat_map(|&r| data[r * k..(r + 1) * k].to_vec()).collect();
        assert_eq!(tape.value(out).data(), &expect[..], "{seq:?}");
        assert_eq!(e.row_for(&seq, 0), rows[0]);
        assert_eq!(e.row_for(&seq, 1), rows[1]);
    }
}

#[test]
fn embedding_gradient_touches_only_used_rows() {
    let (d, k, w) = (4, 3, 2);
    let mut store = ParamStore::new();
    let e = EmbeddingTableConditioner::new(d, k, w, Ordering::reversed(d), &mut store, "e").unwrap();
    randomize(&mut store, 9);
    let id = store.find("e.table").unwrap();
    let seqs = [2, 0, 1, 1, 0, 0, 2, 1];
    let mut tape = Tape::new();
    let y = tape.constant(one_hot(&seqs, d, k));
    let out = e.forward(&mut tape, &store, y).unwrap();
    let ls = tape.log_softmax(out);
    let loss = tape.sum(ls);
    tape.backward(loss).unwrap().accumulate(&mut store);
    let used: std::collections::HashSet<usize> =
        seqs.chunks(d).flat_map(|s| (0..d).map(|p| e.row_for(s, p)).collect::<Vec<_>>()).collect();
    let grad = store.get(id).grad.data();
    for (row, g) in grad.chunks(k).enumerate() {
        let nonzero = g.iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, used.contains(&row), "row {row}");
    }
}

#[test]
fn embedding_table_size_follows_window() {
    for (d, k) in [(3, 4), (6, 2), (10, 5)] {
        let w = default_window(d);
        assert_eq!(w, (d - 1).min(3));
        let mut store = ParamStore::new();
        EmbeddingTableConditioner::new(d, k, w, Ordering::natural(d), &mut store, "e").unwrap();
        assert_eq!(store.num_scalars(), d * (k + 1).pow(w as u32) * k);
    }
}

#[test]
fn masked_scale_logits_never_select_non_units() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 2..=12 {
        let mask = coprime_mask(Modulus::new(k).unwrap());
        for _ in 0..200 {
            let mut tape = Tape::new();
            let theta = tape.constant(Tensor::new(vec![k], (0..k).map(|_| rng.random_range(-50.0..50.0)).collect()).unwrap());
            let m = tape.masked_fill(theta, &mask).unwrap();
            for (s, &v) in tape.value(m).data().iter().enumerate() {
                assert_eq!(v == MASKED_LOGIT, !mask.is_allowed(s));
            }
            let p = tape.st_one_hot_argmax(m, 0.1).unwrap();
            let s = tape.value(p).argmax_last()[0];
            assert!(mask.is_allowed(s), "K={k} picked {s}");
        }
    }
}

#[test]
fn coupling_window_limits_direct_connections() {
    use dflow_core::flows::{alternating_mask, BipartiteFlowLayer};
    let (d, k, w) = (8, 3, 1);
    let keep = alternating_mask(d, 0);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = BipartiteFlowLayer::new(d, k, &keep, &[8], true, 0, Some(w), 0.1, &mut store, "b", &mut rng).unwrap();
    randomize(&mut store, 4);
    // silence the dense hidden path so only the direct map varies with the input
    for name in ["b.out.w", "b.out.b"] {
        let id = store.find(name).unwrap();
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let (kept, transformed) = (layer.kept().to_vec(), layer.transformed().to_vec());
    let run = |seq: &[usize]| {
        let mut tape = Tape::new();
        let y = tape.constant(one_hot(seq, d, k));
        let yk = tape.select_positions(y, &kept).unwrap();
        let (l, s) = layer.conditioner().forward(&mut tape, &store, yk, None).unwrap();
        (tape.value(l).data().to_vec(), tape.value(s.unwrap()).data().to_vec())
    };
    let base = vec![0; d];
    let (l0, s0) = run(&base);
    for &p in &kept {
        let mut seq = base.clone();
        seq[p] = 1;
        let (l1, s1) = run(&seq);
        for (t, &q) in transformed.iter().enumerate() {
            let moved = (0..k).any(|j| l1[t * k + j] != l0[t * k + j] || s1[t * k + j] != s0[t * k + j]);
            assert_eq!(moved, p.abs_diff(q) <= w, "kept {p} → transformed {q}");
        }
    }
}
