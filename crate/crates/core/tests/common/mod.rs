#![allow(dead_code)]

use std::path::{Path, PathBuf};

use metaplast::data::{write_split, DatasetSplit, IdxImages, Split, TaskSpec};
use metaplast::harness::{ExperimentConfig, GridSource, WeightMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 28x28 images whose class is marked by a bright 5x5 block. `layout`
/// shifts where the blocks sit so two tasks conflict.
fn synthetic(n: usize, layout: usize, seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.gen_range(0..10usize);
        labels.push(c as u8);
        let img = &mut pixels[i * 784..(i + 1) * 784];
        for p in img.iter_mut() {
            *p = rng.gen_range(0..60);
        }
        let slot = (c + 3 * layout) % 10;
        let (r0, c0) = (2 + 5 * (slot / 5) + 10 * layout, 1 + 5 * (slot % 5));
        for r in r0..r0 + 5 {
            for col in c0..c0 + 5 {
                img[r * 28 + col] = rng.gen_range(180..=255);
            }
        }
    }
    let images = IdxImages { count: n, rows: 28, cols: 28, pixels };
    DatasetSplit::from_parts(format!("synthetic{layout}"), images, labels).unwrap()
}

/// Writes two conflicting synthetic tasks under `root/{a,b}`.
pub fn write_tasks(root: &Path, train: usize, test: usize) -> (PathBuf, PathBuf) {
    let a = root.join("a");
    let b = root.join("b");
    write_split(&a, Split::Train, &synthetic(train, 0, 1)).unwrap();
    write_split(&a, Split::Test, &synthetic(test, 0, 2)).unwrap();
    write_split(&b, Split::Train, &synthetic(train, 1, 3)).unwrap();
    write_split(&b, Split::Test, &synthetic(test, 1, 4)).unwrap();
    (a, b)
}

/// Small two-task config over the synthetic data in `root`.
pub fn small_config(root: &Path, out: &str) -> ExperimentConfig {
    let (a, b) = write_tasks(root, 240, 80);
    let mut c = ExperimentConfig::desk(root);
    c.output_dir = root.join(out);
    c.model.hidden = vec![12];
    c.train.batch_size = 20;
    c.train.eta = 0.02;
    c.train.pretrain_epochs = 1;
    c.tasks = vec![
        TaskSpec { name: "mnist".into(), dir: a, epochs: 2, m_star: None },
        TaskSpec { name: "fmnist".into(), dir: b, epochs: 2, m_star: None },
    ];
    c
}

pub fn crossbar(mut c: ExperimentConfig) -> ExperimentConfig {
    c.grid = GridSource::Device;
    c.train.weight_source = WeightMode::Crossbar;
    c
}
