//! The `.fstream` text format.
//!
//! Line 1 is a JSON header:
//!
//! ```text
//! {"format":"fstream","version":1,"source_id":"p01/s2/7","fps":60.0,"channels":{"blendshapes":52,"keypoints":936}}
//! ```
//!
//! Every following line is one frame:
//!
//! ```text
//! {"index":0,"face_detected":true,"blendshapes":[0.01,...],"keypoints":[0.41,0.37,...]}
//! ```
//!
//! Channel dimensions are flat array lengths. Floats are written in shortest
//! round-trip decimal form, so parsing a written stream reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelSpec, FeatureFrame, FeatureStream};
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "fstream";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    source_id: String,
    fps: f64,
    channels: ChannelSpec,
}

pub fn parse_stream(bytes: &[u8]) -> Result<FeatureStream> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::parse(1, e.to_string()))?;
    let mut lines = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate()
        .map(|(i, l)| (i + 1, l));

    let header: Header = match lines.next() {
        Some((_, line)) if !line.trim().is_empty() => {
            serde_json::from_str(line).map_err(|e| Error::parse(1, format!("header: {e}")))?
        }
        _ => return Err(Error::parse(1, "missing header")),
    };
    if header.format != FORMAT_TAG {
        return Err(Error::parse(
            1,
            format!("unexpected format tag `{}`", header.format),
        ));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::parse(
            1,
            format!("unsupported version {}", header.version),
        ));
    }

    let mut frames = Vec::new();
    let mut trailing_blank = false;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            trailing_blank = true;
            continue;
        }
        if trailing_blank {
            return Err(Error::parse(line_no, "blank line inside frame list"));
        }
        let frame: FeatureFrame =
            serde_json::from_str(line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        frames.push(frame);
    }

    FeatureStream::new(header.source_id, header.fps, header.channels, frames)
}

#[derive(Serialize)]
struct FrameOut<'a> {
    index: usize,
    face_detected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    blendshapes: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    keypoints: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<&'a [f64]>,
}

pub fn write_stream(stream: &FeatureStream) -> Result<Vec<u8>> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        source_id: stream.source_id().to_string(),
        fps: stream.fps(),
        channels: stream.channel_spec().clone(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    out.push(b'\n');
    for frame in stream.frames() {
        // serde_json would silently write NaN/inf as null.
        let all_finite = [&frame.blendshapes, &frame.keypoints, &frame.embedding]
            .into_iter()
            .flatten()
            .all(|values| values.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::invalid(format!(
                "frame {} holds a non-finite value",
                frame.index
            )));
        }
        let line = FrameOut {
            index: frame.index,
            face_detected: frame.face_detected,
            blendshapes: frame.blendshapes.as_deref(),
            keypoints: frame.keypoints.as_deref(),
            embedding: frame.embedding.as_deref(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::invalid(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_stream_file(path: impl AsRef<Path>) -> Result<FeatureStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_stream(&bytes).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_stream_file(path: impl AsRef<Path>, stream: &FeatureStream) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_stream(stream)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
