use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;

fn balanced_labels(per_class: usize, classes: usize) -> Vec<usize> {
    (0..per_class * classes).map(|i| i % classes).collect()
}

fn assert_partition(assign: &[Vec<usize>], n: usize) {
    let mut seen = vec![false; n];
    for a in assign {
        for &i in a {
            assert!(!seen[i], "index {i} assigned twice");
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "not exhaustive");
}

#[test]
fn dirichlet_single_client_gets_everything() {
    let labels = balanced_labels(10, 3);
    let a = partition_dirichlet(&labels, 1, 0.3, 1).unwrap();
    assert_eq!(a[0], (0..30).collect::<Vec<_>>());
}

#[test]
fn dirichlet_is_a_deterministic_partition() {
    let labels = balanced_labels(50, 10);
    for seed in 0..5 {
        let a = partition_dirichlet(&labels, 20, 0.3, seed).unwrap();
        assert_partition(&a, labels.len());
        assert!(a.iter().all(|c| !c.is_empty()));
        assert_eq!(a, partition_dirichlet(&labels, 20, 0.3, seed).unwrap());
    }
}

#[test]
fn dirichlet_errors() {
    let labels = balanced_labels(1, 3);
    assert!(matches!(partition_dirichlet(&labels, 4, 1.0, 0), Err(Error::Infeasible(_))));
    assert!(partition_dirichlet(&labels, 2, 0.0, 0).is_err());
}

#[test]
fn dirichlet_large_alpha_is_near_uniform() {
    // Dir(1000·1) over 10 clients puts each client's share of every class at
    // 0.1 ± ~0.003, so per-client class shares stay within ±5 pp of 10%.
    let labels = balanced_labels(1000, 10);
    for seed in 0..10 {
        let a = partition_dirichlet(&labels, 10, 1000.0, seed).unwrap();
        for client in &a {
            let h = label_histogram(&labels, client, 10);
            for share in h {
                assert!((share - 0.1).abs() < 0.05, "seed {seed}: share {share}");
            }
        }
    }
}

#[test]
fn heterogeneity_decreases_with_alpha() {
    let labels = balanced_labels(100, 10);
    for seed in 0..5 {
        let h: Vec<f64> = [0.3, 1.0, 1000.0]
            .iter()
            .map(|&alpha| label_heterogeneity(&labels, &partition_dirichlet(&labels, 10, alpha, seed).unwrap()))
            .collect();
        assert!(h[0] > h[1] && h[1] > h[2], "seed {seed}: {h:?}");
    }
}

#[test]
fn pathological_support_and_coverage() {
    let labels = balanced_labels(40, 10);
    let a = partition_pathological(&labels, 10, 2, 3).unwrap();
    assert_partition(&a, labels.len());
    for client in &a {
        let support: BTreeSet<usize> = client.iter().map(|&i| labels[i]).collect();
        assert_eq!(support.len(), 2);
    }
    let all = partition_pathological(&labels, 1, 10, 3).unwrap();
    assert_eq!(all[0], (0..labels.len()).collect::<Vec<_>>());
    assert!(matches!(partition_pathological(&labels, 2, 2, 0), Err(Error::Infeasible(_))));
    assert!(partition_pathological(&labels, 2, 11, 0).is_err());
}

#[test]
fn pathological_two_holders_split_roughly_evenly() {
    // 2 clients × 1 class out of 2 classes: each holder owns its whole
    // class; with 2 clients holding 2 classes each every class is split
    // with q in [0.4, 0.6], so neither side gets below 40% − 1 sample.
    let labels = balanced_labels(100, 2);
    let a = partition_pathological(&labels, 2, 2, 9).unwrap();
    for c in 0..2 {
        for client in &a {
            let n = client.iter().filter(|&&i| labels[i] == c).count();
            assert!((40 - 1..=60 + 1).contains(&n), "class {c} got {n}");
        }
    }
}

#[test]
fn iid_partition() {
    let a = partition_iid(103, 10, 5).unwrap();
    assert_partition(&a, 103);
    assert!(a.iter().all(|c| c.len() == 10 || c.len() == 11));
    assert!(partition_iid(3, 4, 0).is_err());
}

#[test]
fn split_keeps_label_distribution() {
    let store = make_gaussian_mixture::<f64>(2000, 4, 5, 1.0, 2).unwrap();
    let ds = FederatedDataset::dirichlet(store, 10, 0.3, 0.5, 4).unwrap();
    ds.validate().unwrap();
    let labels = ds.store.class_labels().unwrap();
    for c in &ds.clients {
        let a = label_histogram(labels, &c.train, 5);
        let b = label_histogram(labels, &c.test, 5);
        // rounding per class moves at most half a sample per class
        if c.train.len() + c.test.len() >= 50 {
            assert!(tv_distance(&a, &b) < 0.1, "tv {}", tv_distance(&a, &b));
        }
    }
}

#[test]
fn feature_skew_balanced_and_split() {
    let ds = make_feature_skew::<f64>(4, 40, 3, 4, 1).unwrap();
    ds.validate().unwrap();
    let labels = ds.store.class_labels().unwrap();
    for c in &ds.clients {
        let all: Vec<usize> = c.train.iter().chain(&c.test).copied().collect();
        assert_eq!(label_histogram(labels, &all, 4), vec![0.25; 4]);
        assert_eq!(label_histogram(labels, &c.train, 4), vec![0.25; 4]);
    }
    assert!(make_feature_skew::<f64>(2, 10, 1, 2, 0).is_err());
}

fn covariance(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    cov
}

fn client_rows(ds: &FederatedDataset<f64>, cid: usize) -> Vec<Vec<f64>> {
    let c = &ds.clients[cid];
    c.train
        .iter()
        .chain(&c.test)
        .map(|&i| ds.store.features.row(i).to_vec())
        .collect()
}

#[test]
fn identity_transforms_give_iid_clients() {
    let mut spec = FeatureSkewSpec::new(2, 4000, 3, 2);
    spec.identity_transforms = true;
    let ds = make_feature_skew_with::<f64>(&spec, 11).unwrap();
    let a = client_rows(&ds, 0);
    let b = client_rows(&ds, 1);
    for j in 0..3 {
        let stats = |rows: &[Vec<f64>]| {
            let n = rows.len() as f64;
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, v / n)
        };
        let (ma, va) = stats(&a);
        let (mb, vb) = stats(&b);
        assert!((ma - mb).abs() < 3.0 * (va + vb).sqrt(), "dim {j}: {ma} vs {mb}");
    }
}

#[test]
fn feature_skew_covariances_differ_across_clients() {
    // Within-class covariance of client i is A_i A_iᵀ; recompute it from
    // class-0 samples and check the two clients disagree well beyond noise.
    let ds = make_feature_skew::<f64>(2, 6000, 3, 2, 5).unwrap();
    let labels = ds.store.class_labels().unwrap();
    let class0 = |cid: usize| -> Vec<Vec<f64>> {
        let c = &ds.clients[cid];
        c.train
            .iter()
            .chain(&c.test)
            .filter(|&&i| labels[i] == 0)
            .map(|&i| ds.store.features.row(i).to_vec())
            .collect()
    };
    let c0 = covariance(&class0(0));
    let c1 = covariance(&class0(1));
    let diff: f64 = c0.iter().zip(&c1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(diff > 0.3, "covariances too close: {diff}");
    // det(A Aᵀ) = Π s_k², and s_k ∈ [0.5, 2] bounds the trace
    let tr0 = c0[0] + c0[4] + c0[8];
    assert!(tr0 > 3.0 * 0.25 * 0.9 && tr0 < 3.0 * 4.0 * 1.1, "trace {tr0}");
}

#[test]
fn noise_skew_levels() {
    let base = make_feature_skew::<f64>(3, 2000, 4, 2, 8).unwrap();
    let noisy = make_noise_skew(&base, 0.5, 1).unwrap();
    let rows0 = client_rows(&base, 0);
    assert_eq!(rows0, client_rows(&noisy, 0));
    let before = client_rows(&base, 2);
    let after = client_rows(&noisy, 2);
    let diffs: Vec<f64> = before
        .iter()
        .zip(&after)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| y - x).collect::<Vec<_>>())
        .collect();
    let n = diffs.len() as f64;
    let m = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 0.5).abs() < 0.025, "sd {sd}");
    let same = make_noise_skew(&base, 0.0, 1).unwrap();
    assert!(same.store.features.bitwise_eq(&base.store.features));
    assert!(make_noise_skew(&make_feature_skew::<f64>(1, 10, 2, 2, 0).unwrap(), 0.1, 0).is_err());
}

#[test]
fn regression_clients_are_centered_and_general_position() {
    let ds = make_regression_clients::<f64>(3, 4, 5, 7).unwrap();
    assert_eq!(ds.covariances.len(), 3);
    let mut all = Vec::new();
    for c in &ds.clients {
        assert_eq!(c.train.len(), 4);
        for j in 0..5 {
            let m: f64 = c.train.iter().map(|&i| ds.store.features.at(i, j)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
        all.extend(c.train.iter().map(|&i| ds.store.features.row(i).to_vec()));
    }
    for p in 0..all.len() {
        for q in 0..p {
            let dot: f64 = all[p].iter().zip(&all[q]).map(|(a, b)| a * b).sum();
            let np = all[p].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nq = all[q].iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((dot / (np * nq)).abs() < 1.0 - 1e-9);
        }
    }
    let far = ds.covariances.iter().any(|s| {
        let mut d = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                d += (s.at(i, j) - e).powi(2);
            }
        }
        d.sqrt() > 0.1
    });
    assert!(far);
    for s in &ds.covariances {
        assert!(crate::numerics::sym_eig_min(s).unwrap() > 0.0);
    }
}

fn idx_bytes(dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(data);
    b
}

#[test]
fn idx_hand_built_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("img");
    let l = dir.path().join("lbl");
    std::fs::write(&f, idx_bytes(&[2, 2, 2], &[0, 255, 0, 255, 255, 0, 255, 0])).unwrap();
    std::fs::write(&l, idx_bytes(&[2], &[3, 1])).unwrap();
    let s: SampleStore<f64> = load_idx(&f, &l).unwrap();
    assert_eq!(s.features.shape(), &[2, 4]);
    assert_eq!(s.features.data(), &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(s.labels, Labels::Class(vec![3, 1]));
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("img");
    let l = dir.path().join("lbl");
    std::fs::write(&f, idx_bytes(&[2, 1], &[1, 2])).unwrap();
    std::fs::write(&l, idx_bytes(&[3], &[0, 1, 2])).unwrap();
    assert!(matches!(load_idx::<f64>(&f, &l), Err(Error::Format(_))));
    std::fs::write(&l, idx_bytes(&[2], &[0])).unwrap();
    assert!(matches!(load_idx::<f64>(&f, &l), Err(Error::Format(_))));
    let mut bad = idx_bytes(&[2], &[0, 1]);
    bad[2] = 0x0D;
    std::fs::write(&l, bad).unwrap();
    assert!(matches!(load_idx::<f64>(&f, &l), Err(Error::Format(_))));
    assert!(load_idx::<f64>(&dir.path().join("missing"), &l).is_err());
}

#[test]
fn idx_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("img");
    let l = dir.path().join("lbl");
    let raw = make_gaussian_mixture::<f64>(30, 6, 3, 1.0, 1).unwrap();
    let squashed = raw.features.map(|x| 1.0 / (1.0 + (-x).exp()));
    let store = SampleStore::new(squashed, raw.labels.clone()).unwrap();
    save_idx(&store, &[2, 3], &f, &l).unwrap();
    let back: SampleStore<f64> = load_idx(&f, &l).unwrap();
    assert_eq!(back.labels, store.labels);
    assert!(back.features.max_abs_diff(&store.features) <= 0.5 / 255.0 + 1e-12);
}

proptest! {
    #[test]
    fn dirichlet_partition_property(seed in 0u64..1000, n in 1usize..12, alpha in 0.05f64..50.0) {
        let labels = balanced_labels(12, 4);
        // small alpha with many clients can exhaust the retry budget
        let a = match partition_dirichlet(&labels, n, alpha, seed) {
            Ok(a) => a,
            Err(Error::Infeasible(_)) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.iter().all(|c| !c.is_empty()));
        assert_partition(&a, labels.len());
        prop_assert_eq!(&a, &partition_dirichlet(&labels, n, alpha, seed).unwrap());
    }

    #[test]
    fn pathological_partition_property(seed in 0u64..1000, n in 5usize..12, k in 1usize..4) {
        let labels = balanced_labels(30, 5);
        let a = partition_pathological(&labels, n, k, seed).unwrap();
        assert_partition(&a, labels.len());
        for client in &a {
            let support: BTreeSet<usize> = client.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(support.len(), k);
        }
    }
}
