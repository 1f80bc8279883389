//! Recurrent classifier over per-frame feature vectors.

mod checkpoint;
mod kernel;
pub mod lstm;
mod train;

use ndarray::Array2;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use lstm::{
    balanced_pos_weight, batch_loss, forward, gradients, loss_and_gradient, predict,
    weighted_bce, BatchResult, LstmParams, Sample, PROB_EPS,
};
pub use kernel::Real;
pub use train::{train, Adam, Precision, TrainOutcome, TrainingConfig, TrainingCurves};

use crate::error::{Error, Result};
use crate::stream::{Channel, FeatureFrame};

/// Stacks the selected channels of every frame into a `(frames, features)` matrix.
pub fn frames_to_sequence(frames: &[FeatureFrame], channels: &[Channel]) -> Result<Array2<f64>> {
    if channels.is_empty() {
        return Err(Error::invalid("no input channels selected"));
    }
    let Some(first) = frames.first() else {
        return Err(Error::invalid("cannot build a sequence from zero frames"));
    };
    let mut width = 0;
    for &ch in channels {
        width += first
            .channel(ch)
            .ok_or_else(|| Error::invalid(format!("frames lack the `{}` channel", ch.name())))?
            .len();
    }
    let mut data = Vec::with_capacity(frames.len() * width);
    for f in frames {
        let before = data.len();
        for &ch in channels {
            let values = f.channel(ch).ok_or_else(|| {
                Error::invalid(format!("frame {} lacks the `{}` channel", f.index, ch.name()))
            })?;
            data.extend_from_slice(values);
        }
        if data.len() - before != width {
            return Err(Error::invalid(format!(
                "frame {} has {} input features, expected {width}",
                f.index,
                data.len() - before
            )));
        }
    }
    Ok(Array2::from_shape_vec((frames.len(), width), data).expect("sizes checked"))
}

/// Keeps rows `0, n, 2n, ...`.
pub fn decimate_rows(sequence: &Array2<f64>, n: usize) -> Array2<f64> {
    if n <= 1 {
        return sequence.clone();
    }
    sequence.slice(ndarray::s![..;n, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::tests::blend_frame;

    #[test]
    fn sequence_layout() {
        let frames: Vec<FeatureFrame> = (0..4)
            .map(|i| blend_frame(i, (0..52).map(|j| (i * 52 + j) as f64 / 1000.0).collect()))
            .collect();
        let seq = frames_to_sequence(&frames, &[Channel::Blendshapes]).unwrap();
        assert_eq!(seq.dim(), (4, 52));
        assert_eq!(seq[[2, 10]], frames[2].blendshapes.as_ref().unwrap()[10]);
        assert!(frames_to_sequence(&frames, &[Channel::Keypoints]).is_err());
        assert!(frames_to_sequence(&[], &[Channel::Blendshapes]).is_err());
        assert!(frames_to_sequence(&frames, &[]).is_err());

        let fifth = decimate_rows(&seq, 3);
        assert_eq!(fifth.nrows(), 2);
        assert_eq!(fifth.row(1), seq.row(3));
        assert_eq!(decimate_rows(&seq, 1), seq);
    }
}
