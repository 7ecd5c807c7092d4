use difftrace::annotation::{shard_mapping, ShardSpec};
use difftrace::canonical::{merge, CanonicalId, TensorKind};
use difftrace::parallel::collective::{all_gather, all_reduce};
use difftrace::parallel::{ParallelConfig, ReduceOp};
use difftrace::rng::{extract_shard, generate_full, GenSpec};
use difftrace::tensor::Tensor;
use proptest::prelude::*;

fn layout() -> impl Strategy<Value = (ParallelConfig, ShardSpec, Vec<usize>)> {
    (prop::sample::select(vec![1usize, 2, 4]), prop::sample::select(vec![1usize, 2]), any::<bool>(), 0usize..4, 1usize..4, 1usize..4)
        .prop_map(|(tp, cp, sp, which, a, b)| {
            let pc = ParallelConfig { tp, cp, sp, ..ParallelConfig::default() };
            let spec = match which {
                0 => ShardSpec::SEQUENCE,
                1 => ShardSpec::tensor(1),
                2 => ShardSpec { tp: Some(1), sp: None, cp: Some(0) },
                _ => ShardSpec::REPLICATED,
            };
            (pc, spec, vec![2 * cp * tp * a, tp * b])
        })
}

fn distinct_ranks(pc: &ParallelConfig, spec: &ShardSpec) -> Vec<(usize, usize)> {
    // One rank per distinct shard: replicated dimensions contribute rank 0.
    let tp_split = spec.tp.is_some() || (spec.sp.is_some() && pc.sp);
    let tps = if tp_split && pc.tp > 1 { pc.tp } else { 1 };
    let cps = if spec.cp.is_some() { pc.cp } else { 1 };
    (0..cps).flat_map(|c| (0..tps).map(move |t| (t, c))).collect()
}

proptest! {
    #[test]
    fn merge_inverts_shard((pc, spec, shape) in layout()) {
        let id = CanonicalId::new(0, 0, TensorKind::ActivationOut, "model.layers.0.mlp");
        let full = generate_full(&id, &GenSpec::normal(0.0, 1.0, &shape)).unwrap();
        let shards: Vec<_> = distinct_ranks(&pc, &spec)
            .into_iter()
            .map(|(t, c)| {
                let m = shard_mapping(&shape, &spec, &pc, t, c).unwrap();
                let s = extract_shard(&full, &m).unwrap();
                (m, s)
            })
            .collect();
        let back = merge(&shards, &shape).unwrap();
        prop_assert_eq!(back.data(), full.data());
    }

    #[test]
    fn exact_all_reduce_matches_plain_sum(parts in prop::collection::vec(prop::collection::vec(-1000i32..1000, 6), 1..9)) {
        // Small integers sum exactly in any order.
        let tensors: Vec<Tensor> = parts.iter().map(|p| Tensor::new(vec![2, 3], p.iter().map(|&x| x as f64).collect()).unwrap()).collect();
        let got = all_reduce(&tensors, ReduceOp::Sum, None).unwrap();
        for i in 0..6 {
            let want: f64 = parts.iter().map(|p| p[i] as f64).sum();
            prop_assert_eq!(got.data()[i], want);
        }
        let avg = all_reduce(&tensors, ReduceOp::Avg, None).unwrap();
        prop_assert!(avg.data().iter().zip(got.data()).all(|(a, s)| (a * parts.len() as f64 - s).abs() < 1e-9));
    }

    #[test]
    fn gather_concatenates_in_rank_order(n in 1usize..5, rows in 1usize..4) {
        let parts: Vec<Tensor> = (0..n).map(|r| Tensor::filled(&[rows, 2], r as f64)).collect();
        let g = all_gather(&parts, 0).unwrap();
        prop_assert_eq!(g.shape(), &[n * rows, 2][..]);
        for r in 0..n {
            prop_assert!(g.row(r * rows).iter().all(|&x| x == r as f64));
        }
    }

    #[test]
    fn canonical_ids_round_trip(it in 0u64..1000, mb in 0u64..64, k in 0usize..7, layer in 0usize..128) {
        let id = CanonicalId::new(it, mb, TensorKind::ALL[k], format!("model.layers.{layer}.mlp"));
        prop_assert_eq!(id.encode().parse::<CanonicalId>().unwrap(), id);
    }
}
