//! The two length adapters and the projection on one synthetic utterance.
//!
//! `cargo run --example adapters`

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stllm::adapters::{
    conv_forward, conv_output_len, ctc_collapse, label_runs, projection_forward, ConvAdapterParams,
    FrameLabels, ProjectionParams,
};
use stllm::tensor::Matrix;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // 11 frames of 4-dim features; label 0 is the CTC blank
    let labels = vec![0, 3, 3, 3, 0, 0, 5, 5, 3, 3, 0];
    let frames = Matrix::randn(labels.len(), 4, 1.0, &mut rng);
    let fl = FrameLabels {
        labels,
        blank_id: 0,
    };

    for run in label_runs(&fl.labels) {
        println!(
            "run label={} frames {}..{}",
            run.label,
            run.start,
            run.start + run.len
        );
    }
    let collapsed = ctc_collapse(&frames, &fl, false)?;
    let with_blanks = ctc_collapse(&frames, &fl, true)?;
    println!(
        "collapse: {} frames -> {} (blanks dropped) / {} (blanks kept)",
        frames.rows(),
        collapsed.rows(),
        with_blanks.rows()
    );

    let conv = ConvAdapterParams::init(4, 6, &mut rng);
    let shortened = conv_forward(&frames, &conv)?;
    println!(
        "conv k5/s5: {} frames -> {} (= ceil(T/5) = {})",
        frames.rows(),
        shortened.rows(),
        conv_output_len(frames.rows())
    );

    let proj = ProjectionParams::init(6, 16, &mut rng);
    let audio = projection_forward(&shortened, &proj)?;
    println!("projection: {:?} -> {:?}", shortened.shape(), audio.shape());
    Ok(())
}
