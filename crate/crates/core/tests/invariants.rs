use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dygkt::features::{multiset_flags, DualTimeEncoder, MultisetIndicator, PerformanceEncoder};
use dygkt::gradcheck::gradient_check;
use dygkt::graph::{
    ingest_records, plan_split, write_snapshot, ConceptId, DynamicGraph, NodeKind, QuestionId, StudentId,
};
use dygkt::model::{DyGkt, LinkQuery, ModelConfig, PairBatch, QuestionSide};
use dygkt::param::{AdamConfig, ParamStore, Parameter};
use dygkt::tape::{Tape, Var};
use dygkt::tensor::Tensor;
use dygkt::towers::TowerConfig;
use dygkt::train::{evaluate, EvalMode};
use dygkt::Result;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn graph_rows() -> impl Strategy<Value = Vec<(usize, usize, i64, bool, usize)>> {
    prop::collection::vec((0usize..4, 0usize..6, 0i64..50, any::<bool>()), 1..60).prop_map(|rows| {
        let mut rows: Vec<_> = rows.into_iter().map(|(s, q, t, c)| (s, q, t * 1000, c, q % 3)).collect();
        rows.sort_by_key(|r| r.2);
        rows
    })
}

fn snapshot_bytes(g: &DynamicGraph) -> Vec<u8> {
    let mut buf = Vec::new();
    write_snapshot(g, &mut buf).unwrap();
    buf
}

/// Weighted sum so every output element reaches the loss differently.
fn weighted(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = weights.clone().reshape(tape.shape(y).to_vec())?;
    let z = tape.mul_const(y, w)?;
    tape.sum(z)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn primitive_gradients_match_finite_differences(
        x in matrix(3, 4),
        other in matrix(3, 4),
        right in matrix(4, 2),
        bias in matrix(1, 2),
        w12 in matrix(12, 1),
        w6 in matrix(6, 1),
        mask in prop::collection::vec(any::<bool>(), 3),
        labels in prop::collection::vec(any::<bool>(), 6),
    ) {
        // Nudge relu inputs away from the kink.
        let x = x.map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
        let labels: Vec<f64> = labels.into_iter().map(|l| l as u8 as f64).collect();
        let h = 1e-5;
        let check = |name: &str, f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>| {
            let err = gradient_check(f, &x, h).unwrap();
            assert!(err < 1e-4, "{name}: {err:e}");
        };
        check("add", &|t, v| { let c = t.constant(other.clone())?; let y = t.add(v, c)?; weighted(t, y, &w12) });
        check("sub", &|t, v| { let c = t.constant(other.clone())?; let y = t.sub(c, v)?; weighted(t, y, &w12) });
        check("mul", &|t, v| { let y = t.mul(v, v)?; weighted(t, y, &w12) });
        check("relu", &|t, v| { let y = t.relu(v)?; weighted(t, y, &w12) });
        check("sigmoid", &|t, v| { let y = t.sigmoid(v)?; weighted(t, y, &w12) });
        check("tanh", &|t, v| { let y = t.tanh(v)?; weighted(t, y, &w12) });
        check("one_minus", &|t, v| { let y = t.one_minus(v)?; weighted(t, y, &w12) });
        check("scale", &|t, v| { let y = t.scale(v, -1.7)?; weighted(t, y, &w12) });
        check("matmul", &|t, v| { let r = t.constant(right.clone())?; let y = t.matmul(v, r)?; weighted(t, y, &w6) });
        check("affine", &|t, v| {
            let r = t.constant(right.clone())?;
            let b = t.constant(bias.clone().reshape(vec![2])?)?;
            let y = t.affine(v, r, b)?;
            weighted(t, y, &w6)
        });
        check("concat", &|t, v| {
            let c = t.constant(other.clone())?;
            let y = t.concat_cols(&[c, v])?;
            let s = t.mul(y, y)?;
            t.mean(s)
        });
        check("select_rows", &|t, v| {
            let c = t.constant(other.clone())?;
            let sq = t.mul(v, v)?;
            let y = t.select_rows(&mask, v, sq)?;
            let y = t.select_rows(&mask, c, y)?;
            weighted(t, y, &w12)
        });
        check("mask_rows", &|t, v| { let y = t.mask_rows(v, &mask)?; weighted(t, y, &w12) });
        check("bce", &|t, v| {
            let r = t.constant(right.clone())?;
            let z = t.matmul(v, r)?;
            t.bce_with_logits(z, &labels)
        });
    }

    #[test]
    fn activations_stay_in_range(values in prop::collection::vec(-800.0f64..800.0, 1..40)) {
        let n = values.len();
        let mut t = Tape::<f64>::inference();
        let x = t.constant(Tensor::new(vec![n, 1], values.clone()).unwrap()).unwrap();
        let (r, s, h) = (t.relu(x).unwrap(), t.sigmoid(x).unwrap(), t.tanh(x).unwrap());
        for (i, &v) in values.iter().enumerate() {
            let (r, s, h) = (t.value(r).data()[i], t.value(s).data()[i], t.value(h).data()[i]);
            prop_assert!(r >= 0.0);
            prop_assert!((0.0..=1.0).contains(&s) && (-1.0..=1.0).contains(&h));
            // Strict bounds hold wherever f64 can represent them.
            if v.abs() < 30.0 {
                prop_assert!(s > 0.0 && s < 1.0);
            }
            if v.abs() < 15.0 {
                prop_assert!(h > -1.0 && h < 1.0);
            }
        }
    }

    #[test]
    fn zero_learning_rate_never_moves(values in matrix(3, 3), grads in matrix(3, 3), decay: bool, steps in 1usize..5) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add(Parameter::new("w", values.clone(), decay));
        let cfg = AdamConfig { lr: 0.0, weight_decay: 0.5, ..AdamConfig::default() };
        for _ in 0..steps {
            store.get_mut(id).accumulate_grad(&grads).unwrap();
            store.adam_step(&cfg).unwrap();
        }
        prop_assert_eq!(store.value(id), &values);
    }

    #[test]
    fn neighbors_are_strictly_past_and_causal(rows in graph_rows(), n in 1usize..8, cut_frac in 0.0f64..1.0) {
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let cut = ((g.len() as f64 * cut_frac) as usize).clamp(1, g.len());
        let prefix = g.prefix(cut);
        for i in 0..cut {
            let e = g.event(i);
            for (node, kind) in [(e.student.0, NodeKind::Student), (e.question.0, NodeKind::Question)] {
                let full = g.recent_neighbors(node, kind, e.timestamp, Some(i), n).unwrap();
                for entry in full.valid_entries() {
                    prop_assert!(entry.timestamp < e.timestamp);
                    prop_assert_ne!(entry.event, Some(i));
                }
                let past = prefix.recent_neighbors(node, kind, e.timestamp, Some(i), n).unwrap();
                prop_assert_eq!(&full.entries, &past.entries);
                prop_assert_eq!(&full.valid_mask, &past.valid_mask);
            }
        }
    }

    #[test]
    fn split_partitions_chronologically(rows in graph_rows(), a in 1u32..10, b in 1u32..10, c in 1u32..10) {
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let total = (a + b + c) as f64;
        let Ok(plan) = plan_split(&g, [a as f64 / total, b as f64 / total, c as f64 / total]) else {
            return Ok(());
        };
        prop_assert_eq!(plan.train.start, 0);
        prop_assert_eq!(plan.train.end, plan.val.start);
        prop_assert_eq!(plan.val.end, plan.test.start);
        prop_assert_eq!(plan.test.end, g.len());
        let ts = |r: &std::ops::Range<usize>| g.events()[r.clone()].iter().map(|e| e.timestamp).collect::<Vec<_>>();
        prop_assert!(g.events().windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        if let (Some(tr), Some(te)) = (ts(&plan.train).last().copied(), ts(&plan.test).first().copied()) {
            prop_assert!(tr <= te);
        }
        for &i in &plan.inductive_test {
            prop_assert!(plan.test.contains(&i));
        }
    }

    #[test]
    fn ingest_is_idempotent(rows in graph_rows(), min_count in 1usize..4) {
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let Ok(once) = ingest_records(g.to_records(), min_count) else { return Ok(()); };
        let twice = ingest_records(once.to_records(), min_count).unwrap();
        prop_assert_eq!(snapshot_bytes(&once), snapshot_bytes(&twice));
    }

    #[test]
    fn time_branch_boundary_is_exact(threshold in 1i64..10_000_000, seed: u64) {
        let mut store = ParamStore::<f64>::new();
        let enc = DualTimeEncoder::new(&mut store, "t", 4, threshold, true, &mut ChaCha8Rng::seed_from_u64(seed));
        let long = enc.long.unwrap();
        for id in [long.weight, long.bias] {
            store.get_mut(id).value = Tensor::zeros(store.value(id).shape());
        }
        store.get_mut(enc.short.bias).value = Tensor::full(&[4], 0.25);
        store.get_mut(enc.short.weight).value = Tensor::full(&[1, 4], 1.0);
        store.get_mut(enc.mix_weight).value = Tensor::full(&[4, 4], 0.5);
        let mut t = Tape::inference();
        let y = enc.forward(&mut t, &store, &[threshold, threshold + 1], &[true, true]).unwrap();
        let mix_bias = store.value(enc.mix_bias).data().to_vec();
        // Zeroed long branch: relu(0) leaves only the mix bias.
        prop_assert_eq!(t.value(y).row(1), mix_bias.as_slice());
        prop_assert_ne!(t.value(y).row(0), mix_bias.as_slice());

        // One branch: the threshold has no effect on either side of it.
        let run = |thr: i64| {
            let mut store = ParamStore::<f64>::new();
            let enc = DualTimeEncoder::new(&mut store, "u", 4, thr, false, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut t = Tape::inference();
            let y = enc.forward(&mut t, &store, &[threshold, threshold + 1], &[true, true]).unwrap();
            t.value(y).clone()
        };
        prop_assert_eq!(run(threshold), run(1));
        prop_assert_eq!(run(threshold), run(threshold + 1));
    }

    #[test]
    fn encoders_zero_padding_exactly(
        correct in prop::collection::vec(any::<bool>(), 1..12),
        deltas in prop::collection::vec(0i64..1_000_000, 1..12),
        flags in prop::collection::vec(0u8..=2, 1..12),
        pad in 0usize..6,
        seed: u64,
    ) {
        let len = correct.len().min(deltas.len()).min(flags.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let perf = PerformanceEncoder::new(&mut store, 3, &mut rng);
        let time = DualTimeEncoder::new(&mut store, "t", 3, 86_400, true, &mut rng);
        let ms = MultisetIndicator::new(&mut store, 3, &mut rng);
        for p in store.params_mut() {
            p.value = p.value.map(|v| v + 0.3);
        }
        fn left_pad<X: Copy>(v: &[X], fill: X, pad: usize, len: usize) -> Vec<X> {
            std::iter::repeat_n(fill, pad).chain(v[..len].iter().copied()).collect()
        }
        let padded = |v: &[bool], fill| left_pad(v, fill, pad, len);
        let mask: Vec<bool> = padded(&vec![true; len], false);
        let unpadded_mask = vec![true; len];
        let mut t = Tape::inference();
        let outs = [
            (perf.forward(&mut t, &store, &padded(&correct, true), &mask).unwrap(), perf.forward(&mut t, &store, &correct[..len], &unpadded_mask).unwrap()),
            (time.forward(&mut t, &store, &left_pad(&deltas, 7, pad, len), &mask).unwrap(), time.forward(&mut t, &store, &deltas[..len], &unpadded_mask).unwrap()),
            (ms.forward(&mut t, &store, &left_pad(&flags, 2, pad, len), &mask).unwrap(), ms.forward(&mut t, &store, &flags[..len], &unpadded_mask).unwrap()),
        ];
        for (with_pad, without) in outs {
            let (a, b) = (t.value(with_pad), t.value(without));
            for r in 0..pad {
                prop_assert!(a.row(r).iter().all(|&v| v == 0.0));
            }
            for r in 0..len {
                prop_assert_eq!(a.row(pad + r), b.row(r));
            }
        }
    }

    #[test]
    fn multiset_flags_match_brute_force(rows in graph_rows(), n in 1usize..10, pick in any::<prop::sample::Index>()) {
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let i = pick.index(g.len());
        let e = g.event(i);
        let (q, k, s) = (QuestionId(e.question.0), ConceptId(e.concept.0), StudentId(e.student.0));
        let seq = g.recent_neighbors(s.0, NodeKind::Student, e.timestamp, Some(i), n).unwrap();
        let flags = multiset_flags(&seq, q, k, s);
        for (pos, entry) in seq.entries.iter().enumerate() {
            let want = match entry.event {
                None => 0,
                Some(j) => u8::from(g.event(j).question == q) + u8::from(g.event(j).concept == k),
            };
            prop_assert_eq!(flags[pos], want);
        }
        let seq = g.recent_neighbors(q.0, NodeKind::Question, e.timestamp, Some(i), n).unwrap();
        let flags = multiset_flags(&seq, q, k, s);
        for (pos, entry) in seq.entries.iter().enumerate() {
            prop_assert_eq!(flags[pos], entry.event.map_or(0, |j| u8::from(g.event(j).student == s)));
        }
    }
}

fn tiny_model(num_q: usize, num_k: usize, seed: u64) -> DyGkt<f64> {
    let cfg = ModelConfig {
        neighbor_len: 6,
        dropout: 0.0,
        tower: TowerConfig {
            dim_edge: 4,
            dim_node: 3,
            dim_time: 3,
            ..TowerConfig::default()
        },
        ..ModelConfig::default()
    };
    DyGkt::new(cfg, num_q, num_k, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_repeatable_and_evaluation_is_pure(rows in graph_rows(), seed: u64) {
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let model = tiny_model(g.num_questions(), g.num_concepts(), seed);
        let batch = PairBatch::for_events(&g, 0..g.len(), 6).unwrap();
        let a = model.predict_logits(&batch).unwrap();
        let b = model.predict_logits(&batch).unwrap();
        prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        if let Ok(split) = plan_split(&g, [0.6, 0.2, 0.2]) {
            let before = model.store.clone();
            let r1 = evaluate(&model, &g, &split, EvalMode::Transductive).unwrap();
            let r2 = evaluate(&model, &g, &split, EvalMode::Transductive).unwrap();
            prop_assert!(r1.same_metrics(&r2));
            for (p, q) in before.params().iter().zip(model.store.params()) {
                prop_assert_eq!(&p.value, &q.value);
            }
        }
    }

    #[test]
    fn student_gru_change_leaves_question_output_alone(rows in graph_rows(), seed: u64, pick in any::<prop::sample::Index>()) {
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let model = tiny_model(g.num_questions(), g.num_concepts(), seed);
        prop_assert!(matches!(model.question_side(), QuestionSide::Dynamic(_)));
        let q = LinkQuery::from_event(&g, pick.index(g.len()));
        let batch = PairBatch::build(&g, &[q], 6).unwrap();
        let outputs = |m: &DyGkt<f64>| {
            let mut t = Tape::inference();
            let (xs, xq) = m.tower_outputs(&mut t, &batch, None).unwrap();
            (t.value(xs).clone(), t.value(xq).clone())
        };
        let (_, xq) = outputs(&model);
        let mut changed = model.clone();
        let gru = model.student_tower().gru;
        for id in [gru.w_z, gru.u_h, gru.b_r, model.student_tower().out.weight] {
            let p = changed.store.get_mut(id);
            p.value = p.value.map(|v| v * -3.0 + 0.5);
        }
        let (_, xq2) = outputs(&changed);
        prop_assert_eq!(xq, xq2);
    }

    #[test]
    fn unseen_question_still_gets_a_finite_output(rows in graph_rows(), seed: u64) {
        let mut rows = rows;
        let fresh = rows.iter().map(|r| r.1).max().unwrap() + 1;
        let last_t = rows.iter().map(|r| r.2).max().unwrap() + 10;
        rows.push((0, fresh, last_t, true, 0));
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let model = tiny_model(g.num_questions(), g.num_concepts(), seed);
        let batch = PairBatch::for_events(&g, [g.len() - 1], 6).unwrap();
        let p = model.predict(&batch).unwrap();
        prop_assert!(p[0].is_finite() && p[0] > 0.0 && p[0] < 1.0);
    }
}
