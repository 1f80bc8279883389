//! Per-frame facial feature streams, their `.fstream` file format, dataset
//! manifests and the participant-grouped splitter.
//!
//! A [`FeatureStream`] is the interchange unit between every stage of the
//! pipeline. Each frame carries up to three channels:
//!
//! * `blendshapes`: blendshape activations in `[0, 1]` (52 per frame for
//!   MediaPipe-style face meshes),
//! * `keypoints`: facial landmarks as a flat `x0, y0, x1, y1, ...` array of
//!   image-normalized coordinates in `[0, 1]` (936 values for 468 landmarks),
//! * `embedding`: an arbitrary fixed-width vector of finite reals, e.g. a
//!   CNN embedding produced elsewhere.
//!
//! Frames where no face was detected keep `face_detected = false` and carry
//! the previous frame's values forward (see [`carry_forward_missing`]).

mod format;
pub(crate) mod record;
mod split;

pub use format::{parse_stream, read_stream_file, write_stream, write_stream_file};
pub use record::{read_manifest, validate_records, write_manifest, ExchangeRecord};
pub use split::{
    make_splits, read_split_file, write_split_file, SplitAssignment, SplitItem, SplitSummary,
    Subset,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLENDSHAPE_DIM: usize = 52;
pub const KEYPOINT_COUNT: usize = 468;
/// Flat length of the keypoint channel (x and y per landmark).
pub const KEYPOINT_DIM: usize = 2 * KEYPOINT_COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Blendshapes,
    Keypoints,
    Embedding,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Blendshapes, Channel::Keypoints, Channel::Embedding];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Blendshapes => "blendshapes",
            Channel::Keypoints => "keypoints",
            Channel::Embedding => "embedding",
        }
    }

    fn in_range(self, value: f64) -> bool {
        match self {
            Channel::Blendshapes | Channel::Keypoints => (0.0..=1.0).contains(&value),
            Channel::Embedding => value.is_finite(),
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown channel `{s}`")))
    }
}

/// Which channels a stream carries and their flat dimensions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blendshapes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<usize>,
}

impl ChannelSpec {
    pub fn blendshapes_only() -> Self {
        ChannelSpec {
            blendshapes: Some(BLENDSHAPE_DIM),
            ..Default::default()
        }
    }

    pub fn face_mesh() -> Self {
        ChannelSpec {
            blendshapes: Some(BLENDSHAPE_DIM),
            keypoints: Some(KEYPOINT_DIM),
            embedding: None,
        }
    }

    pub fn dim(&self, channel: Channel) -> Option<usize> {
        match channel {
            Channel::Blendshapes => self.blendshapes,
            Channel::Keypoints => self.keypoints,
            Channel::Embedding => self.embedding,
        }
    }

    pub fn channels(&self) -> impl Iterator<Item = (Channel, usize)> + '_ {
        Channel::ALL
            .into_iter()
            .filter_map(|c| self.dim(c).map(|d| (c, d)))
    }

    fn validate(&self) -> Result<()> {
        if self.channels().next().is_none() {
            return Err(Error::invalid("channel spec declares no channels"));
        }
        for (channel, dim) in self.channels() {
            if dim == 0 {
                return Err(Error::invalid(format!(
                    "channel `{}` declared with dimension 0",
                    channel.name()
                )));
            }
        }
        if self.keypoints.is_some_and(|d| d % 2 != 0) {
            return Err(Error::invalid(
                "keypoints dimension must be even (x, y pairs)",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFrame {
    pub index: usize,
    pub face_detected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blendshapes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl FeatureFrame {
    pub fn channel(&self, channel: Channel) -> Option<&[f64]> {
        match channel {
            Channel::Blendshapes => self.blendshapes.as_deref(),
            Channel::Keypoints => self.keypoints.as_deref(),
            Channel::Embedding => self.embedding.as_deref(),
        }
    }

    fn check(&self, position: usize, spec: &ChannelSpec) -> Result<()> {
        if self.index != position {
            return Err(Error::invalid(format!(
                "frame at position {position} has index {}, indices must be consecutive from 0",
                self.index
            )));
        }
        for channel in Channel::ALL {
            match (spec.dim(channel), self.channel(channel)) {
                (Some(expected), Some(values)) => {
                    if values.len() != expected {
                        return Err(Error::DimensionMismatch {
                            frame: position,
                            channel: channel.name(),
                            expected,
                            found: values.len(),
                        });
                    }
                    if let Some(&value) = values.iter().find(|v| !channel.in_range(**v)) {
                        return Err(Error::OutOfRange {
                            frame: position,
                            channel: channel.name(),
                            value,
                        });
                    }
                }
                (Some(expected), None) => {
                    return Err(Error::DimensionMismatch {
                        frame: position,
                        channel: channel.name(),
                        expected,
                        found: 0,
                    })
                }
                (None, Some(_)) => {
                    return Err(Error::invalid(format!(
                        "frame {position} carries undeclared channel `{}`",
                        channel.name()
                    )))
                }
                (None, None) => {}
            }
        }
        Ok(())
    }
}

/// A validated sequence of feature frames.
///
/// Construction goes through [`FeatureStream::new`], so every value of this
/// type satisfies the stream invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    source_id: String,
    fps: f64,
    channel_spec: ChannelSpec,
    frames: Vec<FeatureFrame>,
}

impl FeatureStream {
    pub fn new(
        source_id: impl Into<String>,
        fps: f64,
        channel_spec: ChannelSpec,
        frames: Vec<FeatureFrame>,
    ) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        channel_spec.validate()?;
        for (position, frame) in frames.iter().enumerate() {
            frame.check(position, &channel_spec)?;
        }
        Ok(FeatureStream {
            source_id: source_id.into(),
            fps,
            channel_spec,
            frames,
        })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn channel_spec(&self) -> &ChannelSpec {
        &self.channel_spec
    }

    pub fn frames(&self) -> &[FeatureFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_channel(&self, channel: Channel) -> bool {
        self.channel_spec.dim(channel).is_some()
    }

    /// Per-frame values of one channel, or an error if the stream lacks it.
    pub fn channel_rows(&self, channel: Channel) -> Result<Vec<&[f64]>> {
        if !self.has_channel(channel) {
            return Err(Error::invalid(format!(
                "stream `{}` has no {} channel",
                self.source_id,
                channel.name()
            )));
        }
        Ok(self
            .frames
            .iter()
            .map(|f| f.channel(channel).expect("validated channel"))
            .collect())
    }

    pub fn into_frames(self) -> Vec<FeatureFrame> {
        self.frames
    }
}

/// Fills frames without a detected face with the previous frame's channel
/// values, leaving `face_detected` untouched. Leading frames without a face
/// take the first detected frame's values. Returns an error when no frame
/// has a face.
pub fn carry_forward_missing(frames: &mut [FeatureFrame]) -> Result<()> {
    let first = frames
        .iter()
        .position(|f| f.face_detected)
        .ok_or_else(|| Error::invalid("no frame has a detected face"))?;
    let seed = frames[first].clone();
    for frame in &mut frames[..first] {
        copy_channels(&seed, frame);
    }
    for i in first + 1..frames.len() {
        if !frames[i].face_detected {
            let (done, rest) = frames.split_at_mut(i);
            copy_channels(&done[i - 1], &mut rest[0]);
        }
    }
    Ok(())
}

fn copy_channels(from: &FeatureFrame, to: &mut FeatureFrame) {
    to.blendshapes.clone_from(&from.blendshapes);
    to.keypoints.clone_from(&from.keypoints);
    to.embedding.clone_from(&from.embedding);
}
