use std::path::PathBuf;

use mosaic_core::data::{
    dirichlet_partition, encode_idx, histogram, load_idx, make_synthetic, parse_idx, partition_stats, synthetic_centers, write_idx, Dataset, Split,
};
use mosaic_core::rng::stream;
use mosaic_core::Matrix;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn class_means_sit_near_their_centers() {
    let (c, n, d, spread) = (8, 400, 16, 1.0);
    let ds = make_synthetic(c, n, d, spread, 0).unwrap();
    let centers = synthetic_centers(c, d, 4.0, 0);
    let tol = 3.0 * spread / (n as f64).sqrt();
    for k in 0..c {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == k).collect();
        assert_eq!(rows.len(), n);
        for j in 0..d {
            let mean = rows.iter().map(|&i| ds.inputs.get(i, j)).sum::<f64>() / n as f64;
            assert!((mean - centers.get(k, j)).abs() <= tol, "class {k} dim {j}");
        }
    }
}

fn balanced_labels(c: usize, per: usize) -> Vec<usize> {
    (0..c * per).map(|i| i % c).collect()
}

#[test]
fn huge_omega_gives_near_equal_shards() {
    let labels = balanced_labels(10, 1000);
    let p = dirichlet_partition(&labels, 10, 1e6, 0).unwrap();
    for s in &p.client_shards {
        let dev = (s.len() as f64 - 1000.0).abs() / 1000.0;
        assert!(dev <= 0.05, "shard size {}", s.len());
    }
}

#[test]
fn tiny_omega_concentrates_some_client() {
    let labels = balanced_labels(8, 400);
    let p = dirichlet_partition(&labels, 10, 0.01, 0).unwrap();
    let st = partition_stats(&p, &labels, 8);
    assert!(st.top2_mass.iter().any(|&m| m >= 0.9), "{:?}", st.top2_mass);
}

#[test]
fn skew_grows_as_omega_shrinks() {
    let labels = balanced_labels(8, 200);
    let mut means = Vec::new();
    for omega in [1.0, 0.1, 0.01] {
        let mut total = 0.0;
        for seed in 0..50 {
            let p = dirichlet_partition(&labels, 10, omega, seed).unwrap();
            total += partition_stats(&p, &labels, 8).mean_label_entropy;
        }
        means.push(total / 50.0);
    }
    assert!(means[0] >= means[1] && means[1] >= means[2], "{means:?}");
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream(5, "idx", &[]);
    let data: Vec<f64> = (0..7 * 6).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect();
    let ds = Dataset::new(Matrix::from_vec(7, 6, data).unwrap(), vec![0, 3, 1, 2, 2, 0, 9], 10, Split::Train).unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx(&ds, 2, 3, &ip, &lp).unwrap();
    let back = load_idx(&ip, &lp).unwrap();
    assert_eq!(back.inputs, ds.inputs);
    assert_eq!(back.labels, ds.labels);
}

#[test]
fn truncated_idx_is_a_format_error() {
    let ds = Dataset::new(Matrix::filled(2, 4, 0.5), vec![0, 1], 2, Split::Train).unwrap();
    let (img, lab) = encode_idx(&ds, 2, 2).unwrap();
    let err = parse_idx(&img[..img.len() - 1], &lab).unwrap_err();
    assert!(matches!(err, mosaic_core::Error::Format { .. }), "{err}");
}

#[test]
fn mnist_train_file_when_present() {
    let dir = std::env::var_os("MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist"));
    let (ip, lp) = (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"));
    if !ip.exists() || !lp.exists() {
        eprintln!("MNIST not found under {}; skipping", dir.display());
        return;
    }
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.num_classes), (60000, 784, 10));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_is_a_disjoint_cover(
        clients in 1usize..20,
        omega in prop::sample::select(vec![0.01, 0.1, 1.0, 10.0]),
        seed in 0u64..1000,
        per in 4usize..40,
    ) {
        let labels = balanced_labels(5, per);
        let p = dirichlet_partition(&labels, clients, omega, seed).unwrap();
        prop_assert_eq!(p.num_clients(), clients);
        prop_assert!(p.validate(labels.len()).is_ok());
        let st = partition_stats(&p, &labels, 5);
        let total: Vec<usize> = (0..5).map(|k| st.histograms.iter().map(|h| h[k]).sum()).collect();
        prop_assert_eq!(total, histogram(&labels, 5));
    }

    #[test]
    fn idx_bytes_round_trip(rows in 1usize..6, cols in 1usize..6, n in 1usize..10, seed in 0u64..1000) {
        let mut rng = stream(seed, "idx-prop", &[]);
        let data: Vec<f64> = (0..n * rows * cols).map(|_| rng.random_range(0..=255u8) as f64 / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let ds = Dataset::new(Matrix::from_vec(n, rows * cols, data).unwrap(), labels, 10, Split::Train).unwrap();
        let (img, lab) = encode_idx(&ds, rows, cols).unwrap();
        let back = parse_idx(&img, &lab).unwrap();
        prop_assert_eq!(back.inputs, ds.inputs);
        prop_assert_eq!(back.labels, ds.labels);
    }
}
