//! Classification and segmentation metrics plus cross-validation
//! aggregation and results-table rows.

use framesift::metrics::{
    aggregate_cv, auroc_ovr_macro, confusion, f1_scores, table_header, table_row,
};
use framesift::rng::chacha;
use rand::Rng;

fn main() -> framesift::Result<()> {
    // a fixed 2-class confusion matrix
    let y_true: Vec<usize> = [vec![0; 10], vec![1; 10]].concat();
    let y_pred: Vec<usize> = [vec![0; 8], vec![1; 2], vec![0; 3], vec![1; 7]].concat();
    let cm = confusion(&y_true, &y_pred, 2)?;
    let f1 = f1_scores(&cm)?;
    println!(
        "confusion [[{}, {}], [{}, {}]]",
        cm.get(0, 0),
        cm.get(0, 1),
        cm.get(1, 0),
        cm.get(1, 1)
    );
    println!("per-class F1 {:?}", f1.per_class);
    println!(
        "macro F1 {:.4}, micro F1 {:.4} (= accuracy {:.4})",
        f1.macro_f1,
        f1.micro_f1,
        cm.accuracy()
    );

    // AUROC on noisy scores: add class-correlated signal and watch it rise
    let mut rng = chacha(31);
    let n = 400;
    let classes = 4;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    for signal in [0.0f64, 0.4, 2.0] {
        let mut scores = Vec::with_capacity(n * classes);
        for &label in &labels {
            for c in 0..classes {
                let boost = if label == c { signal } else { 0.0 };
                scores.push(boost + rng.random::<f64>());
            }
        }
        let result = auroc_ovr_macro(&labels, &scores, classes)?;
        println!("signal {signal:>3}: macro AUROC {:.4}", result.macro_auroc);
    }

    // cross-validation aggregation and a results-table row
    let report = aggregate_cv("mes/macro_f1", "2fold", 7, &[0.71, 0.76])?;
    print!("{}", report.to_text());
    let metrics = [("macro_f1", report.mean), ("micro_f1", 0.78)];
    println!("{}", table_header(&metrics));
    println!("{}", table_row("vit-b14", "curated-1m", &metrics));
    Ok(())
}
