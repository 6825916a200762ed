//! Checkpoint selection by downstream metric.
//!
//! Pre-training loss keeps falling early while the downstream metric
//! peaks much later; the selector reports both steps so the divergence
//! is visible.

use framesift::metrics::{checkpoint_report, select_checkpoint, CheckpointEntry, CheckpointSeries};

fn main() -> framesift::Result<()> {
    let entries: Vec<CheckpointEntry> = (1..=25)
        .map(|i| {
            let step = i * 25_000;
            CheckpointEntry {
                step,
                ssl_loss: 1.0 + ((step as f64 - 150_000.0) / 100_000.0).powi(2),
                downstream_metric: 0.9 - 0.8 * ((step as f64 - 450_000.0) / 450_000.0).powi(2),
            }
        })
        .collect();
    let series = CheckpointSeries::new(entries)?;

    println!("{:>8} {:>9} {:>7}", "step", "ssl_loss", "metric");
    for entry in series.entries().iter().step_by(4) {
        println!(
            "{:>8} {:>9.4} {:>7.4}",
            entry.step, entry.ssl_loss, entry.downstream_metric
        );
    }

    let choice = select_checkpoint(&series)?;
    print!("{}", checkpoint_report(&choice));
    assert_ne!(choice.best_step, choice.loss_argmin_step);
    println!("note: the best downstream checkpoint comes long after the loss minimum");
    Ok(())
}
