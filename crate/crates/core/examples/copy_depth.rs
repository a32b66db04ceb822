//! Random-label accuracy on toy_cnn as the heads copy more of the base network,
//! at two head widths. Widening needs a hidden layer inside the copied suffix, so
//! the wide sweep starts at depth 3.

use randlabel::config::{Axis, RunConfig};
use randlabel::experiment::{report, sweep, SweepAxis};

const CONFIG: &str = include_str!("../../../configs/copy_depth_cnn.json");

fn main() -> randlabel::Result<()> {
    let base = RunConfig::from_json(CONFIG)?;
    for (width, depths) in [(1.0, "1,2,3,7,full"), (2.0, "3,7,full")] {
        let mut config = base.clone();
        config.heads.head_width_factor = width;
        let dir = config.output_dir.join(format!("width_{width}"));
        let axis = SweepAxis { axis: Axis::CopyDepth, values: Axis::CopyDepth.parse_values(depths)? };
        sweep(&config, &[axis], &dir)?;
        println!("head width factor {width}");
        print!("{}\n", report(&dir)?);
    }
    Ok(())
}
