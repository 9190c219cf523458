use fedtsp_core::data::{count_labels, dirichlet_partition, generate_hierarchical_dataset, HierarchySpec, PartitionSpec};
use fedtsp_core::numerics::RngStream;
use fedtsp_core::protocol::{sample_participants, GlobalPrototypes, Uplink, UplinkEntry};
use proptest::prelude::*;

fn small_spec() -> HierarchySpec {
    HierarchySpec {
        samples_per_class: 12,
        input_dim: 3,
        ..HierarchySpec::default()
    }
}

fn random_uplinks(seed: u64, clients: usize, classes: usize, dim: usize) -> Vec<Uplink> {
    let mut rng = RngStream::for_stream(seed, "uplinks", 0, 0);
    (0..clients)
        .map(|client| {
            let mut entries = Vec::new();
            for class in 0..classes {
                if rng.uniform() < 0.7 {
                    let prototype = (0..dim).map(|_| rng.normal()).collect();
                    entries.push(UplinkEntry { class, prototype, count: 1 + rng.below(20) });
                }
            }
            Uplink { client, entries }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_covers_every_sample_once(seed in 0u64..1000, clients in 1usize..9, alpha in 0.05f64..50.0) {
        let data = generate_hierarchical_dataset(&small_spec(), seed).unwrap();
        let parts = dirichlet_partition(&data, &PartitionSpec { alpha, num_clients: clients, seed }).unwrap();
        prop_assert_eq!(parts.len(), clients);
        let mut seen: Vec<usize> = parts.iter().flat_map(|p| p.train_indices.iter().chain(&p.test_indices).copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
        for p in &parts {
            prop_assert!(p.num_train() + p.num_test() > 0);
            prop_assert_eq!(&p.train_class_counts, &count_labels(&p.train_labels, data.num_classes));
            for (&i, &y) in p.train_indices.iter().zip(&p.train_labels) {
                prop_assert_eq!(data.labels[i], y);
            }
        }
    }

    #[test]
    fn aggregation_weights_sum_to_one(seed in 0u64..1000, clients in 1usize..7) {
        let uplinks = random_uplinks(seed, clients, 5, 3);
        let mut global = GlobalPrototypes::new(5, 3);
        let w = global.aggregate(&uplinks, 0);
        if uplinks.iter().all(|u| u.entries.is_empty()) {
            prop_assert!(w.is_err());
            return Ok(());
        }
        let w = w.unwrap();
        for (c, ws) in w.weights.iter().enumerate() {
            if ws.is_empty() {
                prop_assert!(!global.mask[c]);
            } else {
                let total: f64 = ws.iter().map(|&(_, x)| x).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(ws.iter().all(|&(_, x)| x > 0.0));
            }
        }
    }

    #[test]
    fn aggregation_ignores_arrival_order(seed in 0u64..1000, clients in 2usize..7) {
        let uplinks = random_uplinks(seed, clients, 4, 3);
        prop_assume!(uplinks.iter().any(|u| !u.entries.is_empty()));
        let mut shuffled = uplinks.clone();
        RngStream::for_stream(seed, "order", 0, 0).shuffle(&mut shuffled);
        let mut a = GlobalPrototypes::new(4, 3);
        let mut b = GlobalPrototypes::new(4, 3);
        a.aggregate(&uplinks, 0).unwrap();
        b.aggregate(&shuffled, 0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn participants_are_distinct_and_sized(seed in 0u64..1000, n in 1usize..60, rate in 0.01f64..=1.0) {
        prop_assume!(rate * n as f64 >= 1.0);
        let p = sample_participants(n, rate, &mut RngStream::for_stream(seed, "participation", 0, 0)).unwrap();
        let expected = ((rate * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        prop_assert_eq!(p.len(), expected);
        prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(p.iter().all(|&i| i < n));
    }
}

#[test]
fn unreported_classes_keep_previous_values() {
    let mut global = GlobalPrototypes::new(3, 2);
    let first = vec![Uplink {
        client: 0,
        entries: vec![
            UplinkEntry { class: 0, prototype: vec![1.0, 2.0], count: 3 },
            UplinkEntry { class: 2, prototype: vec![5.0, 5.0], count: 1 },
        ],
    }];
    global.aggregate(&first, 0).unwrap();
    let second = vec![Uplink {
        client: 1,
        entries: vec![UplinkEntry { class: 0, prototype: vec![3.0, 4.0], count: 2 }],
    }];
    global.aggregate(&second, 1).unwrap();
    assert_eq!(global.protos.row(0), &[3.0, 4.0]);
    assert_eq!(global.protos.row(2), &[5.0, 5.0]);
    assert_eq!(global.mask, vec![true, false, true]);
    assert_eq!(global.last_updated, vec![Some(1), None, Some(0)]);
}
