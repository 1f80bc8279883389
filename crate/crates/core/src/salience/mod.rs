//! Salient-moment extraction from feature streams.
//!
//! Three extraction methods are supported, all operating on a single scalar
//! "activity" signal derived from the stream:
//!
//! * [`Method::BlendshapePeak`]: every blendshape channel is smoothed with a
//!   moving average and the channels are summed; salient frames come from the
//!   causal z-score [`PeakDetector`].
//! * [`Method::KeypointPeak`]: per-frame sum of squared keypoint
//!   displacements, smoothed, then the same peak detector.
//! * [`Method::KeypointTopK`]: the same keypoint signal, keeping the `k`
//!   highest frames that are at least `min_separation` frames apart.

mod matching;
mod peaks;
mod topk;

pub use matching::{
    match_moments, read_annotations, write_annotations, Annotation, MatchReport, RecallTally,
};
pub use peaks::{detect_peaks_realtime, peak_flags, PeakDetector, PeakDetectorParams};
pub use topk::select_top_k;

use std::fmt;

use crate::error::{Error, Result};
use crate::stream::{Channel, FeatureStream};

pub const DEFAULT_SMOOTHING_WINDOW: usize = 45;
pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_MIN_SEPARATION: usize = 60;
/// Predicted moments count as hits when strictly closer than this to an
/// annotation (one second at 60 fps).
pub const DEFAULT_MATCH_TOLERANCE: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    BlendshapePeak,
    KeypointPeak,
    KeypointTopK,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::BlendshapePeak,
        Method::KeypointPeak,
        Method::KeypointTopK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BlendshapePeak => "blendshape-peak",
            Method::KeypointPeak => "keypoint-peak",
            Method::KeypointTopK => "keypoint-topk",
        }
    }

    pub fn uses_peak_detector(self) -> bool {
        !matches!(self, Method::KeypointTopK)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown salience method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SalientMoment {
    pub frame_index: usize,
    /// Signal value at `frame_index`.
    pub score: f64,
    pub method: Method,
}

/// Parameters for [`extract_moments`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SalienceConfig {
    pub method: Method,
    pub window: usize,
    pub peak: PeakDetectorParams,
    pub k: usize,
    pub min_separation: usize,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        SalienceConfig {
            method: Method::KeypointTopK,
            window: DEFAULT_SMOOTHING_WINDOW,
            peak: PeakDetectorParams::default(),
            k: DEFAULT_TOP_K,
            min_separation: DEFAULT_MIN_SEPARATION,
        }
    }
}

/// Runs the configured method end to end on one stream.
pub fn extract_moments(stream: &FeatureStream, config: &SalienceConfig) -> Result<Vec<SalientMoment>> {
    match config.method {
        Method::BlendshapePeak => {
            let signal = blendshape_sum_signal(stream, config.window)?;
            detect_peaks_realtime(&signal, &config.peak, Method::BlendshapePeak)
        }
        Method::KeypointPeak => {
            let signal = keypoint_displacement_signal(stream, config.window)?;
            detect_peaks_realtime(&signal, &config.peak, Method::KeypointPeak)
        }
        Method::KeypointTopK => {
            let signal = keypoint_displacement_signal(stream, config.window)?;
            Ok(select_top_k(
                &signal,
                config.k,
                config.min_separation,
                Method::KeypointTopK,
            ))
        }
    }
}

/// Centered moving average with edge replication; output has the input's length.
///
/// For even windows the extra sample is taken from the right.
pub fn moving_average(signal: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("moving average window must be at least 1"));
    }
    if signal.is_empty() {
        return Err(Error::invalid("cannot smooth an empty signal"));
    }
    let n = signal.len() as isize;
    let left = ((window - 1) / 2) as isize;
    let scale = 1.0 / window as f64;
    Ok((0..n)
        .map(|t| {
            let sum: f64 = (t - left..t - left + window as isize)
                .map(|j| signal[j.clamp(0, n - 1) as usize])
                .sum();
            sum * scale
        })
        .collect())
}

/// Smooths each blendshape channel, then sums the channels per frame.
pub fn blendshape_sum_signal(stream: &FeatureStream, window: usize) -> Result<Vec<f64>> {
    let rows = stream.channel_rows(Channel::Blendshapes)?;
    if rows.is_empty() {
        return Err(Error::invalid("cannot build a signal from an empty stream"));
    }
    let dim = rows[0].len();
    let mut total = vec![0.0; rows.len()];
    let mut column = Vec::with_capacity(rows.len());
    for c in 0..dim {
        column.clear();
        column.extend(rows.iter().map(|r| r[c]));
        for (acc, v) in total.iter_mut().zip(moving_average(&column, window)?) {
            *acc += v;
        }
    }
    Ok(total)
}

/// Unsmoothed per-frame sum of squared keypoint displacements; frame 0 is 0.
pub fn raw_keypoint_displacement(stream: &FeatureStream) -> Result<Vec<f64>> {
    let rows = stream.channel_rows(Channel::Keypoints)?;
    if rows.len() < 2 {
        return Err(Error::invalid(
            "keypoint displacement needs at least two frames",
        ));
    }
    let mut raw = Vec::with_capacity(rows.len());
    raw.push(0.0);
    raw.extend(rows.windows(2).map(|w| {
        w[1].iter()
            .zip(w[0])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }));
    Ok(raw)
}

pub fn keypoint_displacement_signal(stream: &FeatureStream, window: usize) -> Result<Vec<f64>> {
    moving_average(&raw_keypoint_displacement(stream)?, window)
}
