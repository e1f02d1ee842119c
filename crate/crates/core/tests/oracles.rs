//! Worked values checked against independent hand computations.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tieredal::annotate::{oracle_annotate, ratio_stats, OracleConfig, OracleMode, TimingRecord};
use tieredal::data::{partition_unlabeled, Dataset, PoolState};
use tieredal::kernels::{self, cosine_kernel, log_det, logdetmi_eval, regularize, DEFAULT_LAMBDA};
use tieredal::model::{self, Arch, ModelParams, TrainConfig};
use tieredal::orchestrator::{run_experiment, DatasetSource, ExperimentConfig, Method};
use tieredal::smi::{compute_quotas, greedy_maximize, smi_suggest};
use tieredal::tier_select::badge_select;

#[test]
fn partition_of_ten_into_three_with_budget_seven() {
    // floor(7/3) = 2 each, remainder 1 to the first chunk; sizes 10 = 4+3+3
    let idx: Vec<usize> = (0..10).collect();
    let p = partition_unlabeled(&idx, 3, 7, 5).unwrap();
    let mut sizes: Vec<usize> = p.chunks.iter().map(Vec::len).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![3, 3, 4]);
    assert_eq!(p.per_chunk_budget, vec![3, 2, 2]);
}

fn separable_blobs() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let means = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (c, (mx, my)) in means.iter().enumerate() {
        for _ in 0..50 {
            features.push((mx + rng.random_range(-1.0..1.0)) as f32);
            features.push((my + rng.random_range(-1.0..1.0)) as f32);
            labels.push(c);
        }
    }
    Dataset::new(features, 2, labels, 3, "separable").unwrap()
}

#[test]
fn separable_blobs_train_to_full_accuracy() {
    let ds = separable_blobs();
    let labeled: BTreeMap<usize, usize> = (0..ds.len()).map(|i| (i, ds.label(i))).collect();
    let pool = PoolState::new(labeled, BTreeSet::new(), &ds).unwrap();
    let cfg = TrainConfig {
        t_max: 200,
        ..TrainConfig::default()
    };
    let m = model::train(&pool, &ds, &cfg).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    assert!(m.accuracy(&ds, &all).unwrap() >= 0.99);
    assert!(m.trained_epochs <= 200);
}

#[test]
fn hypothesized_gradient_embedding_by_hand() {
    // logits chosen so that softmax(2 * w) = (0.8, 0.2)
    let mut m = ModelParams::zeros(Arch::Linear, 1, 2);
    m.head.weights = DMatrix::from_column_slice(2, 1, &[0.8f64.ln() / 2.0, 0.2f64.ln() / 2.0]);
    m.head.bias = DVector::zeros(2);
    let g = m.grad_embedding(&[2.0], None).unwrap();
    // outer((0.8 - 1, 0.2), (2))
    let expected = [-0.4, 0.4];
    assert_eq!(g.len(), 2);
    for (a, b) in g.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{g:?}");
    }
}

#[test]
fn cosine_of_diagonal_and_axis() {
    let u = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    let v = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let k = cosine_kernel(&u, &v).unwrap();
    assert!((k[(0, 0)] - 0.5f64.sqrt()).abs() < 1e-12);
    assert!((k[(0, 0)] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn regularized_all_ones_factorizes_with_known_spectrum() {
    let lambda = 1e-3;
    let a = regularize(DMatrix::from_element(3, 3, 1.0), lambda);
    // eigenvalues of J + lambda I are 3 + lambda, lambda, lambda
    let expected = (3.0 + lambda).ln() + 2.0 * lambda.ln();
    assert!((log_det(&a).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn two_by_two_log_det_by_hand() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
    let det: f64 = 1.0 * 1.0 - 0.6 * 0.6;
    assert!((log_det(&a).unwrap() - det.ln()).abs() < 1e-12);
    assert!((log_det(&a).unwrap() + 0.446287).abs() < 1e-6);
}

#[test]
fn scalar_logdetmi_by_hand() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let v = logdetmi_eval(&one, &one, &DMatrix::from_element(1, 1, 0.6)).unwrap();
    // log 1 - log(1 - 0.6 * 1 * 0.6)
    assert!((v - -(1.0f64 - 0.36).ln()).abs() < 1e-12);
}

#[test]
fn badge_picks_both_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut rows = Vec::new();
    for centre in [0.0, 100.0] {
        for _ in 0..10 {
            rows.push(centre + rng.random_range(-0.5..0.5));
            rows.push(centre + rng.random_range(-0.5..0.5));
        }
    }
    let emb = DMatrix::from_row_slice(20, 2, &rows);
    let probs = DMatrix::from_element(20, 2, 0.5);
    let idx: Vec<usize> = (0..20).collect();
    let split = (0..200u64)
        .filter(|&seed| {
            let b = badge_select(&emb, &idx, &probs, 2, seed).unwrap().indices();
            (b[0] < 10) != (b[1] < 10)
        })
        .count();
    assert!(split as f64 / 200.0 >= 0.95, "{split}/200");
}

#[test]
fn duplicate_of_selected_candidate_gains_no_more() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..10 {
        let base = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let query = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let first = greedy_maximize(&base, &query, 1, DEFAULT_LAMBDA).unwrap();
        let x = first.selected[0];
        let mut cand = base.clone().insert_row(6, 0.0);
        let row = base.row(x).clone_owned();
        cand.set_row(6, &row);
        let f = |s: &[usize]| kernels::logdetmi_of_subset(&cand, &query, s, DEFAULT_LAMBDA).unwrap();
        let first_gain = f(&[x]);
        let dup_gain = f(&[x, 6]) - f(&[x]);
        assert!(dup_gain <= first_gain + 1e-9, "{dup_gain} > {first_gain}");
    }
}

#[test]
fn quotas_remainder_goes_to_smallest_class() {
    // labeled counts {5, 2, 9}: floor(7/3) = 2 each, remainder 1 to class 1
    let counts = [5usize, 2, 9];
    let n: usize = counts.iter().sum::<usize>() + 10;
    let mut labels = Vec::new();
    for (c, &k) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c, k));
    }
    labels.extend((0..10).map(|i| i % 3));
    let ds = Dataset::new(vec![0.0; n], 1, labels.clone(), 3, "q").unwrap();
    let labeled: BTreeMap<usize, usize> = (0..16).map(|i| (i, labels[i])).collect();
    let unlabeled: BTreeSet<usize> = (16..n).collect();
    let pool = PoolState::new(labeled, unlabeled, &ds).unwrap();
    assert_eq!(compute_quotas(&pool, 3, 7).unwrap().per_class, vec![2, 3, 2]);
}

#[test]
fn smi_suggestion_matches_single_step_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let c = i % 2;
        let centre = if c == 0 { -6.0 } else { 6.0 };
        features.push((centre + rng.random_range(-1.0..1.0)) as f32);
        features.push(rng.random_range(-1.0..1.0) as f32);
        labels.push(c);
    }
    let ds = Dataset::new(features, 2, labels, 2, "two").unwrap();
    let labeled: BTreeMap<usize, usize> = (0..10).map(|i| (i, ds.label(i))).collect();
    let unlabeled: BTreeSet<usize> = (10..40).collect();
    let pool = PoolState::new(labeled, unlabeled.clone(), &ds).unwrap();
    let m = model::train(&pool, &ds, &TrainConfig::default()).unwrap();
    let batch = smi_suggest(&pool, &ds, &m, 2, DEFAULT_LAMBDA).unwrap();
    assert_eq!(batch.len(), 2);

    let un: Vec<usize> = unlabeled.into_iter().collect();
    let hyp = m.grad_embeddings(&ds.rows_f64(&un), None).unwrap();
    for c in 0..2 {
        let members = pool.labeled_in_class(c);
        let truth: Vec<usize> = members.iter().map(|&i| ds.label(i)).collect();
        let query = m.grad_embeddings(&ds.rows_f64(&members), Some(&truth)).unwrap();
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (pos, &i) in un.iter().enumerate() {
            let v = kernels::logdetmi_of_subset(&hyp, &query, &[pos], DEFAULT_LAMBDA).unwrap();
            if v > best.0 {
                best = (v, i);
            }
        }
        let picked: Vec<usize> = batch
            .items
            .iter()
            .filter(|it| it.suggested_label == c)
            .map(|it| it.index)
            .collect();
        assert_eq!(picked, vec![best.1], "class {c}");
    }
}

#[test]
fn bernoulli_suggestions_are_half_correct() {
    let cfg = OracleConfig {
        mode: OracleMode::BernoulliSuggestion { q: 0.5 },
        ..OracleConfig::default()
    };
    let mut rng = tieredal::rng::seeded(77);
    let correct = (0..10_000)
        .filter(|&i| oracle_annotate(i, 0, i % 7, 7, &cfg, &mut rng).suggestion_correct)
        .count();
    let frac = correct as f64 / 10_000.0;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

#[test]
fn ratio_of_hand_picked_times() {
    let rec = |elapsed: f64, correct: bool| TimingRecord {
        item: 0,
        suggestion_correct: correct,
        final_label: 0,
        elapsed,
        discarded: false,
    };
    let s = ratio_stats(&[rec(1.0, true), rec(1.0, true), rec(3.0, false), rec(5.0, false)]).unwrap();
    assert_eq!(s.mean_ratio, 4.0);
    assert_eq!(s.median_ratio, 4.0);
}

#[test]
fn plain_and_suggest_differ_only_in_cost() {
    let base = ExperimentConfig {
        dataset: DatasetSource::Synthetic {
            num_classes: 6,
            per_class: 40,
            dim: 3,
            spread: 1.0,
            seed: 2,
        },
        seed_size: 30,
        b1: 8,
        b2: 8,
        b3: 4,
        rounds: 3,
        rng_seed: 4,
        ..ExperimentConfig::default()
    };
    let run = |method| {
        run_experiment(&ExperimentConfig { method, ..base.clone() }, None)
            .unwrap()
            .remove(0)
    };
    let plain = run(Method::AlPlain);
    let suggest = run(Method::AlSuggest);
    for (p, s) in plain.records.iter().zip(&suggest.records) {
        assert_eq!(p.test_accuracy, s.test_accuracy);
        assert_eq!(p.tiers, s.tiers);
        let n = p.tiers.hard.selected as f64;
        let correct = p.tiers.hard.suggestion_correct as f64;
        assert_eq!(p.cost_round, base.c_a * n);
        assert_eq!(s.cost_round, base.c_v * correct + base.c_a * (n - correct));
    }
    let items = |r: &tieredal::orchestrator::RunResult| r.timings.iter().map(|t| t.item).collect::<Vec<_>>();
    assert_eq!(items(&plain), items(&suggest));
}
