use proptest::prelude::*;
use tppgw::cluster::{nmi, rand_index, spectral_cluster};
use tppgw::data::{load_dataset, save_dataset, Dataset, Event, EventSequence};
use tppgw::gw::{solve, uniform, GwConfig};
use tppgw::linalg::Mat;
use tppgw::seqdist::{pair_distance, SubsetMode};
use tppgw::KernelMatrix;

const HORIZON: f64 = 10.0;

fn sequence_strategy(num_types: usize) -> impl Strategy<Value = EventSequence> {
    prop::collection::vec((0.001f64..HORIZON, 0..num_types), 1..12).prop_map(move |mut raw| {
        raw.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        raw.dedup_by(|a, b| a.0 == b.0);
        let events = raw.into_iter().map(|(t, c)| Event::new(t, c)).collect();
        EventSequence::new("p", events, HORIZON, None).unwrap()
    })
}

fn labels_strategy(n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..4, n))
}

fn relabel(labels: &[usize], perm: &[usize; 4]) -> Vec<usize> {
    labels.iter().map(|&l| perm[l]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_is_a_pseudo_metric(
        a in sequence_strategy(2),
        b in sequence_strategy(2),
        c in sequence_strategy(2),
        full in any::<bool>(),
    ) {
        let mode = if full { SubsetMode::Full } else { SubsetMode::Singleton };
        let d = |x: &EventSequence, y: &EventSequence| pair_distance::<f64>(x, y, mode, 2, HORIZON).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn metrics_are_symmetric_and_label_invariant(
        (a, b) in labels_strategy(9),
        perm in Just([2usize, 0, 3, 1]),
    ) {
        prop_assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(rand_index(&a, &b).unwrap(), rand_index(&b, &a).unwrap());
        let pa = relabel(&a, &perm);
        prop_assert!((nmi(&pa, &b).unwrap() - nmi(&a, &b).unwrap()).abs() < 1e-12);
        prop_assert_eq!(rand_index(&pa, &b).unwrap(), rand_index(&a, &b).unwrap());
        let v = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn dataset_round_trips(seqs in prop::collection::vec(sequence_strategy(3), 2..6), labelled in any::<bool>()) {
        let seqs: Vec<EventSequence> = seqs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                EventSequence::new(format!("s{i}"), s.events().to_vec(), HORIZON, labelled.then_some(i % 2)).unwrap()
            })
            .collect();
        let data = Dataset::new(seqs, 3, HORIZON).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&data, &path).unwrap();
        prop_assert_eq!(load_dataset(&path, None).unwrap(), data);
    }

    #[test]
    fn gw_plans_are_feasible_and_traces_monotone(
        p1 in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 2..7),
        p2 in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 2..6),
        s1 in 0.2f64..2.0,
        s2 in 0.2f64..2.0,
    ) {
        let k1 = KernelMatrix::gaussian(&p1, s1);
        let k2 = KernelMatrix::gaussian(&p2, s2);
        let (m, l) = (p1.len(), p2.len());
        let res = solve(&k1, &k2, &uniform(m), &uniform(l), &GwConfig::default(), None).unwrap();
        prop_assert!(res.plan.marginal_error() <= 1e-8);
        prop_assert!(res.plan.matrix().as_slice().iter().all(|&v| v >= 0.0));
        let mass: f64 = res.plan.matrix().as_slice().iter().sum();
        prop_assert!((mass - 1.0).abs() < 1e-10);
        for w in res.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        prop_assert!((0.0..=1.0).contains(&res.gw_squared));
    }

    #[test]
    fn spectral_partition_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..15) {
        let n = 16;
        let truth: Vec<usize> = (0..n).map(|i| i / 8).collect();
        let k = KernelMatrix::new(Mat::from_fn(n, n, |i, j| {
            if i == j { 1.0 } else if truth[i] == truth[j] { 0.85 } else { 0.15 }
        })).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + shift) % n).collect();
        let base = spectral_cluster(&k, 2, seed).unwrap();
        let moved = spectral_cluster(&k.permuted(&perm), 2, seed).unwrap();
        let expected: Vec<usize> = perm.iter().map(|&p| base[p]).collect();
        prop_assert_eq!(nmi(&moved, &expected).unwrap(), 1.0);
    }
}
