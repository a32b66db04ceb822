//! Effect of dropout, weight decay and label smoothing on random-label memorization.

use randlabel::config::{Axis, RunConfig};
use randlabel::experiment::{report, sweep, SweepAxis};

const CONFIG: &str = include_str!("../../../configs/common_regularizers.json");

fn main() -> randlabel::Result<()> {
    let config = RunConfig::from_json(CONFIG)?;
    for (axis, values) in [(Axis::Dropout, "0,0.25,0.5"), (Axis::WeightDecay, "0,1e-3,1e-2"), (Axis::Delta, "0,0.1,0.3")] {
        let dir = config.output_dir.join(axis.name());
        sweep(&config, &[SweepAxis { axis, values: axis.parse_values(values)? }], &dir)?;
        print!("{}\n", report(&dir)?);
    }
    Ok(())
}
