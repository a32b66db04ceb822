//! Exact and sampled Rademacher values for small finite classes, then the
//! network estimate and bound on a binary blobs task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use randlabel::config::RunConfig;
use randlabel::experiment::rademacher_run;
use randlabel::rademacher::{rademacher_exact, rademacher_sampled, FiniteClass};

const CONFIG: &str = include_str!("../../../configs/rademacher.json");

fn main() -> randlabel::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for m in [2, 5, 10] {
        let exact = rademacher_exact(&mut FiniteClass::constants(m)?)?;
        let est = rademacher_sampled(&mut FiniteClass::constants(m)?, 10_000, &mut rng)?;
        println!("constants m={m:2}: exact {exact:.4}, sampled {:.4} ± {:.4}", est.mean, est.std_error);
    }
    let points: Vec<f64> = (0..8).map(f64::from).collect();
    let exact = rademacher_exact(&mut FiniteClass::thresholds(&points)?)?;
    println!("thresholds m=8: exact {exact:.4}");

    let report = rademacher_run(&RunConfig::from_json(CONFIG)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
