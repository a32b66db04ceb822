//! Trains the single-output variant, which classifies through its random heads alone.

use randlabel::config::RunConfig;
use randlabel::experiment::run;

const CONFIG: &str = include_str!("../../../configs/single_output.json");

fn main() -> randlabel::Result<()> {
    let config = RunConfig::from_json(CONFIG)?;
    let report = run(&config, None)?;
    let last = report.last().expect("at least one epoch");
    println!("train class acc {:.3}", last.train_class_acc);
    println!("test class acc  {:.3}", last.test_class_acc.unwrap_or(f64::NAN));
    println!("rnd label acc   {:.3}", last.rnd_label_acc.unwrap_or(f64::NAN));
    Ok(())
}
