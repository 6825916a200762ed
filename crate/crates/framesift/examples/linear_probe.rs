//! Linear probing of frozen features, with an l2 sweep.
//!
//! Trains a softmax probe on synthetic 3-class features and evaluates it,
//! then sweeps the regularization grid against a validation set.

use framesift::probe::{
    predict_proba, sweep_l2, train_linear_probe, AssemblyMode, FeatureMatrix, TrainConfig,
    DEFAULT_L2_GRID,
};
use framesift::rng::chacha;
use rand::Rng;

fn blobs(seed: u64, per_class: usize) -> (FeatureMatrix, Vec<usize>) {
    let centers = [(0.0f32, 0.0f32), (3.0, 1.0), (-2.0, 2.5)];
    let mut rng = chacha(seed);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (class, &(cx, cy)) in centers.iter().enumerate() {
        for _ in 0..per_class {
            values.push(cx + rng.random::<f32>() - 0.5);
            values.push(cy + rng.random::<f32>() - 0.5);
            labels.push(class);
        }
    }
    (
        FeatureMatrix::new(labels.len(), 2, values, AssemblyMode::ClsLast).unwrap(),
        labels,
    )
}

fn main() -> framesift::Result<()> {
    let (train_features, train_labels) = blobs(1, 60);
    let (val_features, val_labels) = blobs(2, 20);

    let config = TrainConfig {
        epochs: 300,
        ..TrainConfig::default()
    };
    let model = train_linear_probe(&train_features, &train_labels, &config)?;
    println!(
        "probe: {} params, loss {:.4} -> {:.4} over {} accepted steps",
        model.param_count(),
        model.training_log[0],
        model.final_loss(),
        model.training_log.len() - 1
    );

    let proba = predict_proba(&model, &val_features)?;
    let correct = (0..val_labels.len())
        .filter(|&i| proba.predicted_class(i) == val_labels[i])
        .count();
    println!("validation accuracy: {correct}/{}", val_labels.len());

    let sweep = sweep_l2(
        &train_features,
        &train_labels,
        &val_features,
        &val_labels,
        &DEFAULT_L2_GRID,
        &config,
    )?;
    for (l2, accuracy) in &sweep.results {
        println!("  l2 {l2:>7.0e}: val accuracy {accuracy:.3}");
    }
    println!("best l2: {:?}", sweep.best_l2);
    Ok(())
}
