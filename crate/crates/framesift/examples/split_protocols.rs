//! Dataset split protocols: stratified fractions, holdout + k-fold, and
//! few-shot train subsetting.

use framesift::splits::{few_shot_subset, holdout_kfold, stratified_split, LabeledIndex};

fn class_counts(part: &[usize], items: &[LabeledIndex], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &index in part {
        counts[items[index].label] += 1;
    }
    counts
}

fn main() -> framesift::Result<()> {
    // three classes with imbalanced sizes
    let sizes = [201usize, 441, 143];
    let mut items = Vec::new();
    let mut index = 0;
    for (label, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            items.push(LabeledIndex::new(index, label));
            index += 1;
        }
    }

    let split = stratified_split(&items, &[0.8, 0.1, 0.1], 42)?;
    println!("stratified 80/10/10 over class sizes {sizes:?}:");
    for (name, part) in &split.parts {
        println!("  {name:<5} {:?}", class_counts(part, &items, 3));
    }

    // 15% holdout plus 10-fold cross-validation over the remainder
    let kfold = holdout_kfold(&items, 0.15, 10, 42)?;
    let test = kfold.part("test").unwrap().len();
    let fold_sizes: Vec<usize> = (0..10)
        .map(|f| kfold.part(&format!("fold_{f}")).unwrap().len())
        .collect();
    println!("holdout 15% -> test {test}, folds {fold_sizes:?}");

    // few-shot: keep 1% of the train pool, at most 7 per class
    let few = few_shot_subset(&split, &items, 0.01, Some(7), 42)?;
    println!(
        "few-shot train: {:?} (was {:?})",
        class_counts(few.part("train").unwrap(), &items, 3),
        class_counts(split.part("train").unwrap(), &items, 3),
    );
    Ok(())
}
