//! Loader checks against the fetched files; each test returns early when its
//! files are absent.

use std::path::{Path, PathBuf};

use lgn::data::{load_cifar10, load_mnist, Split};
use sha2::{Digest, Sha256};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn expected_checksums() -> serde_json::Value {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/data_checksums.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn sha256_hex(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn present(dir: &Path, files: &[&str]) -> bool {
    let ok = files.iter().all(|f| dir.join(f).exists());
    if !ok {
        eprintln!("skipping: {} incomplete (run scripts/fetch_data.py)", dir.display());
    }
    ok
}

#[test]
fn mnist_subset() {
    let dir = data_dir().join("mnist");
    let files = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"];
    if !present(&dir, &files) {
        return;
    }
    let sums = expected_checksums();
    for f in files {
        assert_eq!(sha256_hex(&dir.join(f)), sums["mnist-subset"][f], "{f}");
    }
    let a = load_mnist(&dir, Split::Train).unwrap();
    assert_eq!(a.len(), 5000);
    assert_eq!(a.image_shape(), (1, 28, 28));
    assert!(a.labels().iter().all(|&l| l < 10));
    let b = load_mnist(&dir, Split::Train).unwrap();
    assert_eq!(a.content_digest(), b.content_digest());
    let img = a.image(0);
    assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn cifar10() {
    let dir = data_dir().join("cifar10");
    let files = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"];
    if !present(&dir, &files) {
        return;
    }
    let sums = expected_checksums();
    for f in files {
        assert_eq!(sha256_hex(&dir.join(f)), sums["cifar10"][f], "{f}");
    }
    let test = load_cifar10(&dir, Split::Test).unwrap();
    assert_eq!(test.len(), 10_000);
    assert_eq!(test.image_shape(), (3, 32, 32));
    let train = load_cifar10(&dir, Split::Train).unwrap();
    assert_eq!(train.len(), 50_000);
    let mut counts = [0usize; 10];
    for &l in train.labels() {
        counts[l as usize] += 1;
    }
    assert_eq!(counts, [5000; 10]);
    assert_eq!(load_cifar10(&dir, Split::Test).unwrap().content_digest(), test.content_digest());
}
