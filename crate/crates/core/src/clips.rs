//! Classifier inputs built from fixed-size windows around salient moments.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::salience::SalientMoment;
use crate::stream::record::{read_json_lines, write_json_lines};
use crate::stream::{ChannelSpec, FeatureFrame, FeatureStream, SplitItem};

pub const DEFAULT_CONTEXT: usize = 60;

/// Where a piece of a compilation came from: source frames `start..end`
/// around the moment at `moment_frame`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub moment_frame: usize,
    pub start: usize,
    pub end: usize,
}

impl ClipWindow {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipCompilation {
    pub source_id: String,
    /// Frame rate of the compiled sequence (source rate divided by `decimation`).
    pub fps: f64,
    pub channel_spec: ChannelSpec,
    /// Decimated frames, re-indexed from 0.
    pub frames: Vec<FeatureFrame>,
    pub provenance: Vec<ClipWindow>,
    pub decimation: usize,
    pub label: Option<bool>,
}

impl ClipCompilation {
    /// Length of the concatenation before decimation.
    pub fn raw_len(&self) -> usize {
        self.provenance.iter().map(ClipWindow::len).sum()
    }

    /// Maps an output position back to `(window index, source frame)`.
    pub fn source_of(&self, position: usize) -> Option<(usize, usize)> {
        if position >= self.frames.len() {
            return None;
        }
        let mut raw = position * self.decimation;
        for (i, w) in self.provenance.iter().enumerate() {
            if raw < w.len() {
                return Some((i, w.start + raw));
            }
            raw -= w.len();
        }
        None
    }

    pub fn to_stream(&self) -> Result<FeatureStream> {
        FeatureStream::new(
            self.source_id.clone(),
            self.fps,
            self.channel_spec.clone(),
            self.frames.clone(),
        )
    }
}

/// Source frame range of the `context`-frame window around `moment`.
///
/// The window is centered (`context / 2` frames before the moment), shifted
/// inward at the stream edges, and collapses to the whole stream when the
/// stream is shorter than `context`.
pub fn clip_window(stream_len: usize, moment: usize, context: usize) -> Range<usize> {
    if stream_len <= context {
        return 0..stream_len;
    }
    let start = moment
        .saturating_sub(context / 2)
        .min(stream_len - context);
    start..start + context
}

pub fn extract_clip(
    stream: &FeatureStream,
    moment: &SalientMoment,
    context: usize,
) -> Result<Vec<FeatureFrame>> {
    check_moment(stream, moment.frame_index, context)?;
    Ok(stream.frames()[clip_window(stream.len(), moment.frame_index, context)].to_vec())
}

fn check_moment(stream: &FeatureStream, frame: usize, context: usize) -> Result<()> {
    if context == 0 {
        return Err(Error::invalid("clip context must be at least one frame"));
    }
    if frame >= stream.len() {
        return Err(Error::invalid(format!(
            "moment at frame {frame} lies outside stream `{}` of {} frames",
            stream.source_id(),
            stream.len()
        )));
    }
    Ok(())
}

/// Concatenates the windows around `moments` (in frame order) and keeps
/// every `decimate`-th frame of the concatenation.
pub fn assemble_compilation(
    stream: &FeatureStream,
    moments: &[SalientMoment],
    context: usize,
    decimate: usize,
    label: Option<bool>,
) -> Result<ClipCompilation> {
    if moments.is_empty() {
        return Err(Error::invalid(format!(
            "no salient moments to assemble for `{}`",
            stream.source_id()
        )));
    }
    if decimate == 0 {
        return Err(Error::invalid("decimation factor must be at least 1"));
    }
    let mut frames_in_order: Vec<usize> = moments.iter().map(|m| m.frame_index).collect();
    frames_in_order.sort_unstable();

    let mut provenance = Vec::with_capacity(frames_in_order.len());
    for &frame in &frames_in_order {
        check_moment(stream, frame, context)?;
        let range = clip_window(stream.len(), frame, context);
        provenance.push(ClipWindow {
            moment_frame: frame,
            start: range.start,
            end: range.end,
        });
    }

    let frames = provenance
        .iter()
        .flat_map(|w| &stream.frames()[w.start..w.end])
        .step_by(decimate)
        .enumerate()
        .map(|(i, f)| FeatureFrame {
            index: i,
            ..f.clone()
        })
        .collect();

    Ok(ClipCompilation {
        source_id: stream.source_id().to_string(),
        fps: stream.fps() / decimate as f64,
        channel_spec: stream.channel_spec().clone(),
        frames,
        provenance,
        decimation: decimate,
        label,
    })
}

/// One single-moment compilation per moment, all carrying `label`.
pub fn split_into_moment_samples(
    stream: &FeatureStream,
    moments: &[SalientMoment],
    context: usize,
    decimate: usize,
    label: Option<bool>,
) -> Result<Vec<ClipCompilation>> {
    let mut sorted = moments.to_vec();
    sorted.sort_by_key(|m| m.frame_index);
    sorted
        .iter()
        .map(|m| assemble_compilation(stream, std::slice::from_ref(m), context, decimate, label))
        .collect()
}

/// Manifest line for an assembled clip file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub participant_id: String,
    pub session_id: String,
    pub exchange_index: u32,
    /// Index of the moment when compilations were split per moment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment: Option<usize>,
    pub mistake_label: bool,
    /// Clip `.fstream` path, relative to the clip manifest.
    pub stream: String,
    pub source_stream: String,
    pub decimation: usize,
    pub provenance: Vec<ClipWindow>,
}

impl SplitItem for ClipRecord {
    fn participant(&self) -> &str {
        &self.participant_id
    }

    fn label(&self) -> bool {
        self.mistake_label
    }
}

pub fn read_clip_manifest(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
    read_json_lines(path.as_ref())
}

pub fn write_clip_manifest(path: impl AsRef<Path>, records: &[ClipRecord]) -> Result<()> {
    write_json_lines(path.as_ref(), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::salience::Method;
    use proptest::prelude::*;

    fn stream(len: usize) -> FeatureStream {
        let frames = (0..len)
            .map(|i| FeatureFrame {
                index: i,
                face_detected: true,
                blendshapes: None,
                keypoints: None,
                // carries the source frame number so windows are easy to check
                embedding: Some(vec![i as f64]),
            })
            .collect();
        let spec = ChannelSpec {
            embedding: Some(1),
            ..Default::default()
        };
        FeatureStream::new("src", 60.0, spec, frames).unwrap()
    }

    fn at(frame: usize) -> SalientMoment {
        SalientMoment {
            frame_index: frame,
            score: 1.0,
            method: Method::KeypointTopK,
        }
    }

    fn source_frames(frames: &[FeatureFrame]) -> Vec<usize> {
        frames
            .iter()
            .map(|f| f.embedding.as_ref().unwrap()[0] as usize)
            .collect()
    }

    #[test]
    fn centered_window() {
        let clip = extract_clip(&stream(400), &at(150), 60).unwrap();
        assert_eq!(source_frames(&clip), (120..180).collect::<Vec<_>>());
    }

    #[test]
    fn window_shifts_inward_at_edges() {
        let s = stream(400);
        assert_eq!(source_frames(&extract_clip(&s, &at(5), 60).unwrap()), (0..60).collect::<Vec<_>>());
        assert_eq!(
            source_frames(&extract_clip(&s, &at(399), 60).unwrap()),
            (340..400).collect::<Vec<_>>()
        );
    }

    #[test]
    fn short_stream_is_kept_whole() {
        let clip = extract_clip(&stream(40), &at(20), 60).unwrap();
        assert_eq!(clip.len(), 40);
        assert!(extract_clip(&stream(40), &at(40), 60).is_err());
    }

    #[test]
    fn three_moments_make_three_seconds() {
        let s = stream(600);
        let moments = [at(400), at(100), at(250)];
        let full = assemble_compilation(&s, &moments, 60, 1, Some(true)).unwrap();
        assert_eq!(full.frames.len(), 180);
        assert_eq!(full.provenance.iter().map(|w| w.moment_frame).collect::<Vec<_>>(), vec![100, 250, 400]);
        assert_eq!(full.to_stream().unwrap().len(), 180);

        let fifth = assemble_compilation(&s, &moments, 60, 5, None).unwrap();
        assert_eq!(fifth.frames.len(), 36);
        assert_eq!(fifth.fps, 12.0);
        assert_eq!(source_frames(&fifth.frames)[..3], [70, 75, 80]);

        let single = assemble_compilation(&s, &moments[..1], 60, 60, None).unwrap();
        assert_eq!(single.frames.len(), 1);
    }

    #[test]
    fn assemble_errors() {
        let s = stream(100);
        assert!(assemble_compilation(&s, &[], 60, 1, None).is_err());
        assert!(assemble_compilation(&s, &[at(10)], 60, 0, None).is_err());
        assert!(assemble_compilation(&s, &[at(100)], 60, 1, None).is_err());
    }

    #[test]
    fn per_moment_samples() {
        let s = stream(600);
        let moments = [at(100), at(250), at(400)];
        for n in [1, 5, 7] {
            let samples = split_into_moment_samples(&s, &moments, 60, n, Some(false)).unwrap();
            assert_eq!(samples.len(), 3);
            for c in &samples {
                assert_eq!(c.frames.len(), 60usize.div_ceil(n));
                assert_eq!(c.label, Some(false));
            }
        }
        assert!(split_into_moment_samples(&s, &[], 60, 5, Some(true)).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn lengths_and_provenance(
            len in 1usize..500,
            raw_moments in prop::collection::vec(0usize..500, 1..5),
            context in 1usize..90,
            n in 1usize..12,
        ) {
            let s = stream(len);
            let moments: Vec<SalientMoment> = raw_moments.iter().map(|&m| at(m % len)).collect();
            let c = assemble_compilation(&s, &moments, context, n, None).unwrap();
            let raw: usize = c.provenance.iter().map(|w| w.len()).sum();
            prop_assert_eq!(raw, moments.len() * context.min(len));
            prop_assert_eq!(c.frames.len(), raw.div_ceil(n));
            for w in &c.provenance {
                prop_assert!(w.len() <= context);
            }
            // every output frame traces to exactly the source frame it holds
            let src = source_frames(&c.frames);
            for (pos, &frame) in src.iter().enumerate() {
                let (_, traced) = c.source_of(pos).unwrap();
                prop_assert_eq!(traced, frame);
            }
            prop_assert!(c.source_of(c.frames.len()).is_none());

            if n == 1 {
                let ident: Vec<usize> = c.provenance.iter().flat_map(|w| w.start..w.end).collect();
                prop_assert_eq!(src, ident);
            }
        }
    }
}
