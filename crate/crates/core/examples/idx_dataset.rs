//! Writes a small synthetic image set in IDX format, loads it back and trains on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use randlabel::config::RunConfig;
use randlabel::data::{write_idx, IdxArray};
use randlabel::experiment::run;

/// Bright square whose position encodes the class, plus noise.
fn images(rng: &mut ChaCha8Rng, count: usize, classes: usize) -> (IdxArray, IdxArray) {
    let (h, w) = (8, 8);
    let mut pixels = Vec::with_capacity(count * h * w);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % classes;
        let (r0, c0) = (2 * (c / 2), 2 * (c % 2) + 2);
        for r in 0..h {
            for col in 0..w {
                let on = (r0..r0 + 3).contains(&r) && (c0..c0 + 3).contains(&col);
                let base: f64 = if on { 200.0 } else { 30.0 };
                pixels.push((base + rng.random_range(-30.0..30.0)).clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(c as u8);
    }
    (
        IdxArray { dims: vec![count, h, w], data: pixels },
        IdxArray { dims: vec![count], data: labels },
    )
}

fn main() -> randlabel::Result<()> {
    let dir = std::env::temp_dir().join("randlabel_idx_example");
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (split, count) in [("train", 128), ("test", 256)] {
        let (x, y) = images(&mut rng, count, 4);
        write_idx(&dir.join(format!("{split}-images.idx")), &x)?;
        write_idx(&dir.join(format!("{split}-labels.idx")), &y)?;
    }
    let config = RunConfig::from_json(
        &serde_json::json!({
            "model": {"preset": "toy_cnn", "channels": [4, 8], "hidden": 32},
            "heads": {"rnd_labels": 2},
            "training": {"epochs": 30, "lr": 0.05, "lambda": 1.0},
            "dataset": {"kind": "idx", "classes": 4,
                        "train_images": dir.join("train-images.idx"), "train_labels": dir.join("train-labels.idx"),
                        "test_images": dir.join("test-images.idx"), "test_labels": dir.join("test-labels.idx")},
            "output_dir": dir.join("run")
        })
        .to_string(),
    )?;
    let report = run(&config, None)?;
    let last = report.last().expect("at least one epoch");
    println!("IDX files in {}", dir.display());
    println!("test class acc {:.3}, rnd label acc {:.3}", last.test_class_acc.unwrap_or(f64::NAN), last.rnd_label_acc.unwrap_or(f64::NAN));
    Ok(())
}
