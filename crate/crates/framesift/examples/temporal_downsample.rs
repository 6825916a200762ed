//! Temporal downsampling of per-video frame sequences.
//!
//! Builds two synthetic 30 fps videos and resamples them to 5 fps and to
//! a non-integer 4 fps, printing which frames survive.

use framesift::embedding::{temporal_downsample, Fps, FrameRecord};

fn main() -> framesift::Result<()> {
    let mut frames = Vec::new();
    for video in ["colon-a", "colon-b"] {
        for i in 0..24u64 {
            frames.push(FrameRecord::new(video, i, i * 1000 / 30));
        }
    }

    let source = Fps::from_hz(30)?;
    for target_hz in [5u32, 4] {
        let target = Fps::from_hz(target_hz)?;
        let kept = temporal_downsample(&frames, source, target)?;
        println!(
            "30 fps -> {target_hz} fps keeps {}/{} frames:",
            kept.len(),
            frames.len()
        );
        for frame in &kept {
            println!(
                "  {} frame {:>2} @ {:>4} ms",
                frame.video_id, frame.frame_number, frame.timestamp_ms
            );
        }
    }

    // equal rates are the identity
    let same = temporal_downsample(&frames, source, source)?;
    assert_eq!(same.len(), frames.len());
    println!("30 fps -> 30 fps keeps everything (identity)");
    Ok(())
}
