mod common;

use common::{random_points, random_sequence, spearman};
use tppgw::cluster::{dis_sc_baseline, nmi};
use tppgw::data::{Dataset, Event, EventSequence};
use tppgw::gw::{self, plan_to_assignment, solve, uniform, GwConfig};
use tppgw::linalg::{symmetric_eigen, Mat};
use tppgw::seqdist::{distance_matrix, pair_distance, sample_reference_kernel, DistancePower, SubsetMode};
use tppgw::simulate::{make_synthetic, sequence_rng, thinning_events, GeneratorSpec, SyntheticPlan};
use tppgw::tpp::{embedding_bandwidth, embedding_kernel, Backbone, TppDims, TppParams};
use tppgw::train::{evaluate_model, objective, objective_at_plan, train, TrainConfig};
use tppgw::KernelMatrix;

fn hom_poisson_dataset(rates: Vec<f64>, n: usize, horizon: f64, seed: u64) -> Dataset {
    let c = rates.len();
    make_synthetic(&SyntheticPlan {
        cluster_specs: vec![GeneratorSpec::hom_poisson(rates)],
        sequences_per_cluster: n,
        num_types: c,
        horizon,
        seed,
    })
    .unwrap()
}

fn constant_model(log_rates: &[f64]) -> TppParams<f64> {
    let mut p = TppParams::zeros(TppDims::new(log_rates.len(), 2, 2)).unwrap();
    p.set_constant_intensity(log_rates);
    p
}

// ---------------------------------------------------------------- tpp

#[test]
fn true_rate_beats_doubled_rate() {
    let mu = [0.4, 1.1];
    let data = hom_poisson_dataset(mu.to_vec(), 1000, 10.0, 21);
    let truth = constant_model(&[mu[0].ln(), mu[1].ln()]);
    let doubled = constant_model(&[(2.0 * mu[0]).ln(), (2.0 * mu[1]).ln()]);
    let mean_ll = |p: &TppParams<f64>| data.sequences().iter().map(|s| p.log_likelihood(s)).sum::<f64>() / 1000.0;
    assert!(mean_ll(&truth) > mean_ll(&doubled));
}

#[test]
fn time_rescaled_gaps_are_unit_exponential() {
    let mu = [0.5, 1.5];
    let spec = GeneratorSpec::hom_poisson(mu.to_vec());
    let events = thinning_events(&spec, 6000.0, &mut sequence_rng(22, 0)).unwrap();
    let seq = EventSequence::new("long", events, 6000.0, None).unwrap();
    let model = constant_model(&[mu[0].ln(), mu[1].ln()]);
    let enc = model.encode(&seq);
    let total_rate = |t: f64| (0..2).map(|c| model.intensity(&enc, &seq, c, t)).sum::<f64>();
    let mut prev = 0.0;
    let mut increments = Vec::new();
    for e in seq.events().iter().take(10_000) {
        // Simpson on the interval, evaluated strictly inside it
        let (a, b) = (prev, e.time);
        let m = 0.5 * (a + b);
        let eps = 1e-9 * (b - a);
        let val = (b - a) / 6.0 * (total_rate(a + eps) + 4.0 * total_rate(m) + total_rate(b));
        increments.push(val);
        prev = e.time;
    }
    let n = increments.len() as f64;
    let d = common::ks_statistic(increments, |x| 1.0 - (-x).exp());
    assert!(d < 1.628 / n.sqrt(), "KS {d} with n = {n}");
}

#[test]
fn embedding_kernels_are_positive_semidefinite() {
    let params = TppParams::<f64>::init(TppDims::new(3, 4, 8), 1.0, 5).unwrap();
    for trial in 0..20u64 {
        let seqs: Vec<EventSequence> = (0..12)
            .map(|i| random_sequence("s", 5 + i, 3, 10.0, trial * 100 + i as u64))
            .collect();
        let enc: Vec<_> = seqs.iter().map(|s| params.encode(s)).collect();
        let embs: Vec<Vec<f64>> = enc.iter().map(|e| e.sequence_embedding.clone()).collect();
        let k = embedding_kernel(&enc, embedding_bandwidth(&embs)).unwrap();
        let eig = symmetric_eigen(k.matrix()).unwrap();
        let smallest = eig.values.last().copied().unwrap();
        assert!(smallest >= -1e-8, "trial {trial}: smallest eigenvalue {smallest}");
    }
}

#[test]
fn zeroed_params_give_identical_states_for_equal_inputs() {
    let p = TppParams::<f64>::zeros(TppDims::new(2, 3, 4)).unwrap();
    let s = EventSequence::new("z", vec![Event::new(1.0, 0), Event::new(2.0, 0), Event::new(3.0, 1)], 4.0, None).unwrap();
    let enc = p.encode(&s);
    assert_eq!(enc.hidden_states.row(0), enc.hidden_states.row(1));
    assert_eq!(enc.hidden_states.row(1), enc.hidden_states.row(2));
}

// ---------------------------------------------------------------- objective

fn fd_instance() -> (TppParams<f64>, Vec<EventSequence>, KernelMatrix<f64>) {
    let params = TppParams::<f64>::init(TppDims::new(3, 4, 8), 0.5, 31).unwrap();
    let mut params = params;
    // spread the weights so every path carries signal
    for (i, v) in params.values_mut().iter_mut().enumerate() {
        *v *= 1.0 + 2.0 * ((i as f64) * 0.618).sin().abs();
    }
    let batch: Vec<EventSequence> = (0..4).map(|i| random_sequence(&format!("b{i}"), 20, 3, 10.0, 40 + i)).collect();
    let reference = KernelMatrix::gaussian(&random_points(4, 3, 50), 0.7);
    (params, batch, reference)
}

fn check_fixed_plan_gradient(tau: f64) {
    let (params, batch, reference) = fd_instance();
    let out = objective(&params, &batch, &reference, tau, &GwConfig::default()).unwrap();
    let plan = out.2.plan;
    let embs: Vec<Vec<f64>> = batch.iter().map(|s| params.encode(s).sequence_embedding).collect();
    let sigma = embedding_bandwidth(&embs);
    let (value, grad) = objective_at_plan(&params, &batch, &reference, tau, &plan, sigma).unwrap();
    assert!((value - out.0).abs() < 1e-9 * value.abs().max(1.0));
    assert_eq!(grad, out.1.values);
    let f = |p: &TppParams<f64>| objective_at_plan(p, &batch, &reference, tau, &plan, sigma).unwrap().0;
    let h = 1e-5;
    for i in 0..grad.len() {
        let mut plus = params.clone();
        plus.values_mut()[i] += h;
        let mut minus = params.clone();
        minus.values_mut()[i] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        // central differences carry about 1e-10 of rounding noise here
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-4);
        assert!(rel < 1e-4, "tau {tau}, coordinate {i}: analytic {} vs fd {fd}", grad[i]);
    }
}

#[test]
fn fixed_plan_gradient_matches_finite_differences() {
    check_fixed_plan_gradient(1.0);
}

#[test]
fn regularizer_gradient_matches_finite_differences_when_dominant() {
    check_fixed_plan_gradient(500.0);
}

#[test]
fn equal_kernels_add_almost_nothing() {
    let (params, batch, _) = fd_instance();
    let enc: Vec<_> = batch.iter().map(|s| params.encode(s)).collect();
    let embs: Vec<Vec<f64>> = enc.iter().map(|e| e.sequence_embedding.clone()).collect();
    let same = embedding_kernel(&enc, embedding_bandwidth(&embs)).unwrap();
    let (value, _, res) = objective(&params, &batch, &same, 1.0, &GwConfig::default()).unwrap();
    let nll = -batch.iter().map(|s| params.log_likelihood(s)).sum::<f64>() / 4.0;
    assert!(value >= nll - 1e-12 && value - nll <= 1e-3, "gw {}", res.gw_squared);
}

// ---------------------------------------------------------------- gw

#[test]
fn permuted_kernel_matches_self_solve() {
    let k2 = KernelMatrix::gaussian(&random_points(10, 3, 60), 0.8);
    let perm = [3, 7, 0, 9, 1, 5, 8, 2, 6, 4];
    let k1 = k2.permuted(&perm);
    let cfg = GwConfig::default();
    let a = solve(&k1, &k2, &uniform(10), &uniform(10), &cfg, None).unwrap();
    let b = solve(&k2, &k2, &uniform(10), &uniform(10), &cfg, None).unwrap();
    assert!((a.gw_squared - b.gw_squared).abs() < 1e-6, "{} vs {}", a.gw_squared, b.gw_squared);
}

#[test]
fn solve_is_symmetric_in_its_arguments() {
    for seed in 0..5 {
        let k1 = KernelMatrix::gaussian(&random_points(7, 2, 70 + seed), 0.6);
        let k2 = KernelMatrix::gaussian(&random_points(5, 2, 80 + seed), 0.9);
        let cfg = GwConfig::default();
        let a = solve(&k1, &k2, &uniform(7), &uniform(5), &cfg, None).unwrap();
        let b = solve(&k2, &k1, &uniform(5), &uniform(7), &cfg, None).unwrap();
        assert!((a.gw_squared - b.gw_squared).abs() < 1e-6, "seed {seed}: {} vs {}", a.gw_squared, b.gw_squared);
    }
}

#[test]
fn plan_recovers_kernel_blocks() {
    let truth: Vec<usize> = (0..10).map(|i| i / 5).collect();
    let k1 = KernelMatrix::new(Mat::from_fn(10, 10, |i, j| {
        if i == j {
            1.0
        } else if truth[i] == truth[j] {
            0.9
        } else {
            0.1
        }
    }))
    .unwrap();
    let k2 = KernelMatrix::new(Mat::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0]]).unwrap()).unwrap();
    let res = solve(&k1, &k2, &uniform(10), &uniform(2), &GwConfig::default(), None).unwrap();
    let labels = plan_to_assignment(&res.plan);
    assert_eq!(nmi(&labels, &truth).unwrap(), 1.0);
}

#[test]
fn arithmetic_scales_with_problem_size() {
    let per_iter = |m: usize, l: usize| {
        let k1 = KernelMatrix::gaussian(&random_points(m, 3, 90), 0.8);
        let k2 = KernelMatrix::gaussian(&random_points(l, 3, 91), 0.8);
        let res = solve(&k1, &k2, &uniform(m), &uniform(l), &GwConfig::default(), None).unwrap();
        res.arith_ops as f64 / res.outer_iterations as f64
    };
    let small = per_iter(64, 16);
    let large = per_iter(128, 32);
    let predicted = (128.0 * 128.0 * 32.0 + 32.0 * 32.0 * 128.0) / (64.0 * 64.0 * 16.0 + 16.0 * 16.0 * 64.0);
    let ratio = large / small;
    assert!(ratio >= predicted / 2.0 && ratio <= predicted * 2.0, "ratio {ratio}, predicted {predicted}");
}

// ---------------------------------------------------------------- seqdist

fn mixed_sequences(n: usize, seed: u64) -> Vec<EventSequence> {
    let specs = [
        GeneratorSpec::hom_poisson(vec![0.5, 0.5, 0.5]),
        GeneratorSpec::hom_poisson(vec![1.5, 0.2, 0.3]),
        GeneratorSpec::inhom_poisson(vec![0.6, 0.6, 0.6], 0.5, 5.0),
    ];
    (0..n)
        .map(|i| {
            let spec = &specs[i % specs.len()];
            let mut events = Vec::new();
            let mut j = 0;
            while events.is_empty() {
                events = thinning_events(spec, 10.0, &mut sequence_rng(seed + j, i as u64)).unwrap();
                j += 1000;
            }
            EventSequence::new(format!("m{i}"), events, 10.0, None).unwrap()
        })
        .collect()
}

#[test]
fn full_and_singleton_distances_agree_in_rank() {
    let seqs = mixed_sequences(100, 100);
    let mut full = Vec::new();
    let mut single = Vec::new();
    for p in 0..50 {
        let (a, b) = (&seqs[2 * p], &seqs[2 * p + 1]);
        full.push(pair_distance::<f64>(a, b, SubsetMode::Full, 3, 10.0).unwrap());
        single.push(pair_distance::<f64>(a, b, SubsetMode::Singleton, 3, 10.0).unwrap());
    }
    let rho = spearman(&full, &single);
    assert!(rho > 0.8, "Spearman {rho}");
}

#[test]
fn triangle_inequality_on_random_triples() {
    use rand::{Rng, SeedableRng};
    let seqs = mixed_sequences(30, 200);
    for mode in [SubsetMode::Singleton, SubsetMode::Full] {
        let d = distance_matrix::<f64>(&seqs, mode, 3, 10.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(201);
        for _ in 0..100 {
            let (i, j, k) = (rng.gen_range(0..30), rng.gen_range(0..30), rng.gen_range(0..30));
            assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-9);
        }
    }
}

#[test]
fn reference_kernel_separates_clusters() {
    let data = make_synthetic(&SyntheticPlan::two_cluster_desk(50, 300)).unwrap();
    let (k, idx) = sample_reference_kernel::<f64>(&data, 40, SubsetMode::Singleton, DistancePower::Unsquared, 301).unwrap();
    let labels: Vec<usize> = idx.iter().map(|&i| data.sequences()[i].label().unwrap()).collect();
    let (mut inside, mut ni, mut across, mut na) = (0.0, 0, 0.0, 0);
    for i in 0..40 {
        for j in (i + 1)..40 {
            if labels[i] == labels[j] {
                inside += k.get(i, j);
                ni += 1;
            } else {
                across += k.get(i, j);
                na += 1;
            }
        }
    }
    assert!(inside / ni as f64 > across / na as f64);
    let again = sample_reference_kernel::<f64>(&data, 40, SubsetMode::Singleton, DistancePower::Unsquared, 301).unwrap();
    assert_eq!(again.1, idx);
    let whole = sample_reference_kernel::<f64>(&data, data.len(), SubsetMode::Singleton, DistancePower::Unsquared, 1).unwrap();
    let mut sorted = whole.1.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..data.len()).collect::<Vec<_>>());
}

// ---------------------------------------------------------------- train

#[test]
fn likelihood_improves_over_first_epochs() {
    let mut curves = vec![0.0; 5];
    for seed in 0..3 {
        let data = hom_poisson_dataset(vec![0.3, 0.9, 0.2], 100, 20.0, 400 + seed);
        let cfg = TrainConfig {
            tau: 0.0,
            reference_l: 16,
            batch_size: 20,
            epochs: 5,
            embed_dim: 4,
            hidden_dim: 8,
            seed,
            ..TrainConfig::default()
        };
        let (_, report) = train::<f64>(&data, &cfg).unwrap();
        assert_eq!(report.mean_nll.len(), 5);
        for (c, v) in curves.iter_mut().zip(&report.mean_nll) {
            *c += v / 3.0;
        }
    }
    assert!(curves[0] > curves[1] && curves[1] > curves[2], "{curves:?}");
}

#[test]
fn dominant_regularizer_lowers_discrepancy() {
    let data = make_synthetic(&SyntheticPlan::two_cluster_desk(20, 500)).unwrap();
    let cfg = TrainConfig {
        tau: 1e3,
        reference_l: 16,
        batch_size: 10,
        epochs: 6,
        embed_dim: 4,
        hidden_dim: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let (_, report) = train::<f64>(&data, &cfg).unwrap();
    let first = report.gw_squared[0];
    let last = *report.gw_squared.last().unwrap();
    assert!(last < first, "{:?}", report.gw_squared);
}

#[test]
fn fitted_model_beats_zero_model_on_hawkes_data() {
    let data = make_synthetic(&SyntheticPlan::two_cluster_desk(30, 600)).unwrap();
    let cfg = TrainConfig {
        tau: 0.0,
        reference_l: 8,
        batch_size: 16,
        epochs: 8,
        embed_dim: 4,
        hidden_dim: 8,
        learning_rate: 0.02,
        seed: 1,
        ..TrainConfig::default()
    };
    let (fitted, _) = train::<f64>(&data, &cfg).unwrap();
    let zero = TppParams::<f64>::zeros(TppDims::new(5, 4, 8)).unwrap();
    let (ell_fit, _) = evaluate_model(&fitted, &data).unwrap();
    let (ell_zero, _) = evaluate_model(&zero, &data).unwrap();
    assert!(ell_fit > ell_zero, "{ell_fit} vs {ell_zero}");
}

// ---------------------------------------------------------------- cluster

#[test]
fn duplicated_groups_cluster_perfectly() {
    let a = random_sequence("a", 12, 2, 10.0, 700);
    let b = random_sequence("b", 30, 2, 10.0, 701);
    let mut seqs = Vec::new();
    for i in 0..6 {
        let (src, label) = if i % 2 == 0 { (&a, 0) } else { (&b, 1) };
        seqs.push(EventSequence::new(format!("d{i}"), src.events().to_vec(), 10.0, Some(label)).unwrap());
    }
    let data = Dataset::new(seqs, 2, 10.0).unwrap();
    let report = dis_sc_baseline(&data, 2, SubsetMode::Singleton, 9).unwrap();
    assert_eq!(report.nmi, 1.0);
    assert_eq!(report.rand_index, 1.0);
}

#[test]
fn baseline_is_deterministic_and_needs_labels() {
    let data = make_synthetic(&SyntheticPlan::two_cluster_desk(15, 800)).unwrap();
    let a = dis_sc_baseline(&data, 2, SubsetMode::Singleton, 4).unwrap();
    let b = dis_sc_baseline(&data, 2, SubsetMode::Singleton, 4).unwrap();
    assert_eq!(a, b);
    let unlabeled: Vec<EventSequence> = data.sequences().iter().map(|s| s.clone().with_label(None)).collect();
    let unlabeled = Dataset::new(unlabeled, 5, 50.0).unwrap();
    assert!(dis_sc_baseline(&unlabeled, 2, SubsetMode::Singleton, 4).is_err());
}

#[test]
fn gw_objective_is_quadruple_sum_on_random_instances() {
    for seed in 0..5 {
        let k1 = KernelMatrix::gaussian(&random_points(3, 2, 900 + seed), 0.5);
        let k2 = KernelMatrix::gaussian(&random_points(2, 2, 950 + seed), 0.5);
        let res = solve(&k1, &k2, &uniform(3), &uniform(2), &GwConfig::default(), None).unwrap();
        let t = res.plan.matrix();
        let mut brute = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..2 {
                    for d in 0..2 {
                        brute += (k1.get(a, b) - k2.get(c, d)).powi(2) * t[(a, c)] * t[(b, d)];
                    }
                }
            }
        }
        assert!((gw::objective(&k1, &k2, &res.plan).unwrap() - brute).abs() < 1e-10);
    }
}
