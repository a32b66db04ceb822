//! Trains the toy task and prints class and random-label accuracy per epoch.
//!
//! Usage: `cargo run --release --example memorization_curve [config.json]`

use randlabel::config::RunConfig;
use randlabel::experiment::{crossing_epoch, run, CROSSING_LEVEL};

const DEFAULT: &str = include_str!("../../../configs/memorization.json");

fn main() -> randlabel::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::from_json(DEFAULT)?,
    };
    let report = run(&config, None)?;
    println!("epoch  train_acc  rnd_acc  class_loss  rnd_loss");
    for r in report.records.iter().filter(|r| r.epoch == 1 || r.epoch % 10 == 0) {
        println!(
            "{:5}  {:9.3}  {:7.3}  {:10.4}  {:8.4}",
            r.epoch,
            r.train_class_acc,
            r.rnd_label_acc.unwrap_or(f64::NAN),
            r.class_loss.unwrap_or(f64::NAN),
            r.rnd_loss.unwrap_or(f64::NAN)
        );
    }
    let class = crossing_epoch(&report.records, CROSSING_LEVEL, |r| Some(r.train_class_acc));
    let rnd = crossing_epoch(&report.records, CROSSING_LEVEL, |r| r.rnd_label_acc);
    println!("first epoch ≥ {CROSSING_LEVEL}: class {class:?}, random labels {rnd:?}");
    println!("run directory: {}", report.dir.display());
    Ok(())
}
