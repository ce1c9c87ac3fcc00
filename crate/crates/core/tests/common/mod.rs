#![allow(dead_code)]

use std::path::PathBuf;

use capsroute::data::Dataset;
use capsroute::Tensor;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// `CAPSROUTE_DATA_DIR`, else `data/mnist` under the workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CAPSROUTE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"));
    let present = ["train-images-idx3-ubyte", "t10k-images-idx3-ubyte"]
        .iter()
        .all(|f| dir.join(f).is_file() || dir.join(format!("{f}.gz")).is_file());
    present.then_some(dir)
}

/// `CAPSROUTE_ARTIFACTS`, else `artifacts` under the workspace root.
pub fn artifacts_dir() -> PathBuf {
    std::env::var_os("CAPSROUTE_ARTIFACTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("artifacts"))
}

/// Ten bar-pattern classes with deterministic texture, 28x28.
pub fn synthetic(n: usize, salt: usize) -> Dataset {
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i * 7 + salt) % 10;
        labels.push(c as u8);
        for y in 0..28 {
            for x in 0..28 {
                let bar = (y >= 4 + 2 * c && y < 6 + 2 * c && (6..22).contains(&x)) || (x == 4 + 2 * c && y >= 6);
                let texture = ((i * 31 + y * 17 + x * 13) % 23) as f32 / 255.0;
                pixels.push(if bar { 0.9 - texture } else { texture / 4.0 });
            }
        }
    }
    Dataset::new(Tensor::new(&[n, 28, 28, 1], pixels).unwrap(), labels).unwrap()
}
