//! Per-patch segmentation with a linear head.
//!
//! Builds token grids with a bright square planted in the patch features,
//! trains a binary head on patch labels, and predicts an upsampled mask.

use framesift::embedding::{LayerTokenSet, LayerTokens};
use framesift::metrics::{seg_metrics, BinaryMask};
use framesift::probe::{
    assemble_features, predict_mask, train_seg_head, AssemblyMode, TrainConfig,
};
use framesift::rng::chacha;
use rand::Rng;

const DIM: usize = 12;
const GRID: usize = 6;

/// One image: patches inside the planted square carry a strong positive
/// first channel.
fn image(seed: u64, square: (usize, usize, usize, usize)) -> (LayerTokenSet, Vec<bool>) {
    let mut rng = chacha(seed);
    let (y0, x0, y1, x1) = square;
    let mut labels = Vec::new();
    let mut layers = Vec::new();
    for _ in 0..4 {
        let mut patches = Vec::new();
        for y in 0..GRID {
            for x in 0..GRID {
                let inside = (y0..y1).contains(&y) && (x0..x1).contains(&x);
                let mut token: Vec<f32> =
                    (0..DIM).map(|_| rng.random::<f32>() * 0.4 - 0.2).collect();
                if inside {
                    token[0] += 2.0;
                }
                patches.extend_from_slice(&token);
            }
        }
        layers.push(LayerTokens {
            cls: vec![0.0; DIM],
            patches,
        });
    }
    for y in 0..GRID {
        for x in 0..GRID {
            labels.push((y0..y1).contains(&y) && (x0..x1).contains(&x));
        }
    }
    (LayerTokenSet::new(DIM, GRID, GRID, layers).unwrap(), labels)
}

fn main() -> framesift::Result<()> {
    let (train_tokens, train_labels) = image(3, (1, 1, 4, 4));
    let features = assemble_features(std::slice::from_ref(&train_tokens), AssemblyMode::PatchGrid)?;
    let head = train_seg_head(
        &features,
        &train_labels,
        &TrainConfig {
            learning_rate: 1.0,
            epochs: 300,
            ..TrainConfig::default()
        },
    )?;
    println!(
        "head: {} parameters, final loss {:.4}",
        head.param_count(),
        head.final_loss()
    );

    // predict on a fresh image with the square somewhere else
    let (test_tokens, test_labels) = image(4, (2, 2, 5, 5));
    let out = 24;
    let mask = predict_mask(&head, &test_tokens, out, out)?;
    let scale = out / GRID;
    let gt = BinaryMask::new(
        out,
        out,
        (0..out * out)
            .map(|i| test_labels[(i / out / scale) * GRID + (i % out) / scale])
            .collect(),
    )?;
    let scores = seg_metrics(std::slice::from_ref(&mask), &[gt])?;
    println!(
        "upsampled {}x{} mask vs ground truth: dice {:.3}, iou {:.3}, prec {:.3}, rec {:.3}",
        out, out, scores.m_dice, scores.m_iou, scores.m_prec, scores.m_rec
    );

    for y in 0..out {
        let row: String = (0..out)
            .map(|x| if mask.data[y * out + x] { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }
    Ok(())
}
