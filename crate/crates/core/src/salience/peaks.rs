use std::collections::VecDeque;

use super::{Method, SalientMoment};
use crate::error::{Error, Result};

/// Settings of the causal z-score peak detector.
///
/// `lag` is the history length in frames, `threshold` the number of standard
/// deviations above the running mean a value must reach, and `influence` the
/// weight a signalled value gets when it enters the history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakDetectorParams {
    pub lag: usize,
    pub threshold: f64,
    pub influence: f64,
}

impl Default for PeakDetectorParams {
    fn default() -> Self {
        PeakDetectorParams {
            lag: 120,
            threshold: 3.0,
            influence: 0.1,
        }
    }
}

impl PeakDetectorParams {
    pub fn validate(&self) -> Result<()> {
        if self.lag < 2 {
            return Err(Error::invalid(format!("lag must be >= 2, got {}", self.lag)));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(Error::invalid(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.influence) {
            return Err(Error::invalid(format!(
                "influence must lie in [0, 1], got {}",
                self.influence
            )));
        }
        Ok(())
    }
}

/// Streaming detector: feed one value per frame, get the frame's decision.
///
/// Only upward deviations trigger.
#[derive(Clone, Debug)]
pub struct PeakDetector {
    params: PeakDetectorParams,
    filtered: VecDeque<f64>,
}

impl PeakDetector {
    pub fn new(params: PeakDetectorParams) -> Result<Self> {
        params.validate()?;
        Ok(PeakDetector {
            params,
            filtered: VecDeque::with_capacity(params.lag + 1),
        })
    }

    pub fn push(&mut self, value: f64) -> bool {
        let lag = self.params.lag;
        if self.filtered.len() < lag {
            self.filtered.push_back(value);
            return false;
        }
        let n = lag as f64;
        let mean = self.filtered.iter().sum::<f64>() / n;
        let var = self.filtered.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();

        let salient = value - mean > self.params.threshold * std;
        let next = if salient {
            let prev = *self.filtered.back().expect("history is full");
            self.params.influence * value + (1.0 - self.params.influence) * prev
        } else {
            value
        };
        self.filtered.pop_front();
        self.filtered.push_back(next);
        salient
    }
}

/// Per-frame salient/not-salient decisions; the first `lag` frames are never salient.
pub fn peak_flags(signal: &[f64], params: &PeakDetectorParams) -> Result<Vec<bool>> {
    let mut detector = PeakDetector::new(*params)?;
    Ok(signal.iter().map(|&v| detector.push(v)).collect())
}

/// Runs the detector and merges each run of consecutive salient frames into
/// one moment located at the run's maximum (earliest frame on ties).
pub fn detect_peaks_realtime(
    signal: &[f64],
    params: &PeakDetectorParams,
    method: Method,
) -> Result<Vec<SalientMoment>> {
    params.validate()?;
    if signal.len() <= params.lag {
        return Err(Error::invalid(format!(
            "signal of {} frames is too short for lag {}",
            signal.len(),
            params.lag
        )));
    }
    let flags = peak_flags(signal, params)?;

    let mut moments = Vec::new();
    let mut run: Option<usize> = None;
    for (t, &flag) in flags.iter().enumerate() {
        match (flag, run) {
            (true, None) => run = Some(t),
            (true, Some(best)) if signal[t] > signal[best] => run = Some(t),
            (false, Some(best)) => {
                moments.push(SalientMoment {
                    frame_index: best,
                    score: signal[best],
                    method,
                });
                run = None;
            }
            _ => {}
        }
    }
    if let Some(best) = run {
        moments.push(SalientMoment {
            frame_index: best,
            score: signal[best],
            method,
        });
    }
    Ok(moments)
}
