//! Interrupts training, saves a checkpoint, resumes and matches the uninterrupted run.

use randlabel::checkpoint::Checkpoint;
use randlabel::config::RunConfig;
use randlabel::experiment::Experiment;

const CONFIG: &str = include_str!("../../../configs/memorization.json");

fn main() -> randlabel::Result<()> {
    let mut config = RunConfig::from_json(CONFIG)?;
    config.training.epochs = 20;
    config.training.dropout = 0.2;

    let mut full = Experiment::new(&config)?;
    full.train_all()?;

    let path = std::env::temp_dir().join("randlabel_resume.bin");
    let mut first = Experiment::new(&config)?;
    for _ in 0..10 {
        first.epoch()?;
    }
    first.checkpoint().save(&path)?;
    let mut resumed = Experiment::new(&config)?;
    Checkpoint::load(&path)?.restore_into(&mut resumed.trainer)?;
    resumed.train_all()?;
    println!("checkpoint: {}", path.display());
    println!("resumed run identical to uninterrupted run: {}", resumed.checkpoint() == full.checkpoint());
    Ok(())
}
