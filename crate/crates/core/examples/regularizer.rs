//! Sweeps the memorization regularizer weight λ and prints the summary table.

use randlabel::config::{Axis, RunConfig};
use randlabel::experiment::{report, sweep, SweepAxis};

const CONFIG: &str = include_str!("../../../configs/regularizer.json");

fn main() -> randlabel::Result<()> {
    let config = RunConfig::from_json(CONFIG)?;
    let axis = SweepAxis { axis: Axis::Lambda, values: Axis::Lambda.parse_values("0,0.3,1,3,10")? };
    let dir = config.output_dir.join("lambda_sweep");
    sweep(&config, &[axis], &dir)?;
    print!("{}", report(&dir)?);
    Ok(())
}
