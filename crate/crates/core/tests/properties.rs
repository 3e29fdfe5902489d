use lemb_core::metrics::roc_auc;
use lemb_core::pretrain::{finetune, FinetuneConfig, LabeledExample};
use lemb_core::quant::{pack_codes, quantize_int4, unpack_code};
use lemb_core::scorer::combine_utility;
use lemb_core::shardplan::{route_lookup, split_table, ShardPlan, ShardStrategy};
use lemb_core::tables::{expected_collision_fraction, hash_to_row};
use lemb_core::{EmbeddingTable, EntityId};
use proptest::prelude::*;

fn table_strategy(max_rows: usize, max_dim: usize) -> impl Strategy<Value = EmbeddingTable> {
    (1..=max_rows, 1..=max_dim).prop_flat_map(|(rows, dim)| {
        prop::collection::vec(-100.0f32..100.0, rows * dim)
            .prop_map(move |data| EmbeddingTable::from_f32("t", "v1", rows, dim, data).unwrap())
    })
}

fn even_dim_table(max_rows: usize, max_half_dim: usize) -> impl Strategy<Value = EmbeddingTable> {
    (1..=max_rows, 1..=max_half_dim).prop_flat_map(|(rows, half)| {
        prop::collection::vec(-100.0f32..100.0, rows * half * 2)
            .prop_map(move |data| EmbeddingTable::from_f32("t", "v1", rows, half * 2, data).unwrap())
    })
}

fn strategy() -> impl Strategy<Value = ShardStrategy> {
    prop_oneof![Just(ShardStrategy::Contiguous), Just(ShardStrategy::Modulo)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hash_is_pure_and_in_range(id: u64, rows in 1usize..1_000_000) {
        let r = hash_to_row(EntityId(id), rows).unwrap();
        prop_assert!(r < rows);
        prop_assert_eq!(r, hash_to_row(EntityId(id), rows).unwrap());
    }

    #[test]
    fn lookup_commutes_with_permutation(
        table in table_strategy(50, 8),
        ids in prop::collection::vec(any::<u64>(), 1..60),
        seed: u64,
    ) {
        let ids: Vec<EntityId> = ids.into_iter().map(EntityId).collect();
        let mut perm: Vec<usize> = (0..ids.len()).collect();
        // Fisher-Yates driven by a splitmix stream
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = lemb_core::tables::splitmix64_mix(s);
            perm.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let permuted: Vec<EntityId> = perm.iter().map(|&i| ids[i]).collect();
        let base = table.lookup(&ids);
        let moved = table.lookup(&permuted);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(moved.row(k), base.row(i));
            prop_assert_eq!(moved.collided[k], base.collided[i]);
        }
    }

    #[test]
    fn collision_fraction_non_increasing_in_rows(n in 1u64..100_000, m in 1u64..1_000_000, extra in 1u64..1_000_000) {
        let a = expected_collision_fraction(n, m).unwrap();
        let b = expected_collision_fraction(n, m + extra).unwrap();
        prop_assert!(b <= a + 1e-12, "{} rows: {}, {} rows: {}", m, a, m + extra, b);
    }

    #[test]
    fn pemb_round_trip_is_bitwise(table in even_dim_table(40, 6), group in 2usize..16) {
        for t in [table.clone(), table.to_f16().unwrap(), quantize_int4(&table, group).unwrap().into_table()] {
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = EmbeddingTable::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn quantization_error_is_bounded(table in even_dim_table(30, 20), group in 2usize..48) {
        let q = quantize_int4(&table, group).unwrap();
        let g = q.group_size();
        for row in 0..table.num_rows() {
            let orig = table.row(row).unwrap();
            let deq = q.dequantize_row(row).unwrap();
            let params = q.groups(row).unwrap();
            for (j, (&x, &y)) in orig.iter().zip(&deq).enumerate() {
                let scale = params[j / g].scale;
                prop_assert!((x - y).abs() <= scale / 2.0 + 1e-6 * x.abs(), "x={} y={} scale={}", x, y, scale);
            }
            prop_assert!(q.codes(row).unwrap().iter().all(|&c| c <= 15));
        }
    }

    #[test]
    fn quantization_is_row_independent(table in even_dim_table(30, 10), group in 2usize..24, pick in prop::collection::vec(any::<prop::sample::Index>(), 1..10)) {
        let rows: Vec<usize> = pick.iter().map(|i| i.index(table.num_rows())).collect();
        let full = quantize_int4(&table, group).unwrap().into_table();
        let sub = quantize_int4(&table.select_rows(&rows, "t").unwrap(), group).unwrap().into_table();
        prop_assert_eq!(sub, full.select_rows(&rows, "t").unwrap());
    }

    #[test]
    fn routed_lookup_is_transparent(
        table in table_strategy(64, 6),
        shards in 1usize..10,
        strategy in strategy(),
        ids in prop::collection::vec(any::<u64>(), 0..100),
    ) {
        let shards = shards.min(table.num_rows());
        let plan = ShardPlan::with_num_shards(table.num_rows(), table.dim(), shards, strategy).unwrap();
        let parts = split_table(&plan, &table).unwrap();
        let ids: Vec<EntityId> = ids.into_iter().map(EntityId).collect();
        prop_assert_eq!(route_lookup(&plan, &parts, &ids).unwrap(), table.lookup(&ids));
    }

    #[test]
    fn shards_partition_the_rows(rows in 1usize..500, shards in 1usize..17, strategy in strategy()) {
        let shards = shards.min(rows);
        let plan = ShardPlan::with_num_shards(rows, 4, shards, strategy).unwrap();
        let mut seen = vec![0u8; rows];
        for s in 0..shards {
            let global = plan.global_rows(s);
            prop_assert_eq!(global.len(), plan.shard_rows(s));
            for (local, &g) in global.iter().enumerate() {
                seen[g] += 1;
                prop_assert_eq!(plan.owner(g), (s, local));
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn auc_ignores_increasing_transforms(
        pairs in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..200),
    ) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        // coarse grid so ties occur
        let scores: Vec<f64> = pairs.iter().map(|p| (p.0 * 4.0).round() / 4.0).collect();
        let moved: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp() + 3.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&moved, &labels).unwrap());
    }

    #[test]
    fn utility_stays_a_probability(ctr in 0.0f64..=1.0, ccvr in 0.0f64..=1.0, vtcvr in 0.0f64..=1.0) {
        let u = combine_utility(ctr, ccvr, vtcvr).unwrap();
        prop_assert!((0.0..=1.0).contains(&u));
    }
}

#[test]
fn pack_unpack_exhaustive_over_bytes() {
    for b in 0..=255u8 {
        let codes = [b & 0x0f, b >> 4];
        let packed = pack_codes(&codes);
        assert_eq!(packed, vec![b]);
        assert_eq!((unpack_code(&packed, 0), unpack_code(&packed, 1)), (codes[0], codes[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn freezing_keeps_pretrained_tables_bitwise(seed: u64) {
        let dim = 4;
        let rows = 64;
        let init = |name: &str, salt: u64| {
            let data = (0..rows * dim)
                .map(|i| ((lemb_core::tables::splitmix64_mix(seed ^ salt ^ i as u64) % 1000) as f32 - 500.0) / 1000.0)
                .collect();
            EmbeddingTable::from_f32(name, "pre", rows, dim, data).unwrap()
        };
        let (users, pins) = (init("user", 1), init("pin", 2));
        let examples: Vec<LabeledExample> = (0..200u64)
            .map(|i| LabeledExample {
                user_id: EntityId(i % 17),
                pin_id: EntityId(i % 23),
                dense: vec![0.1; 2],
                label: (lemb_core::tables::splitmix64_mix(seed ^ i) & 1) as u8,
                view_label: None,
            })
            .collect();
        let cfg = FinetuneConfig { dim, num_rows: rows, epochs: 2, seed, ..FinetuneConfig::default() };
        let (_, u, p) = finetune(&examples, Some((&users, &pins)), true, &cfg).unwrap();
        prop_assert_eq!(u.to_f32_vec(), users.to_f32_vec());
        prop_assert_eq!(p.to_f32_vec(), pins.to_f32_vec());
    }
}
