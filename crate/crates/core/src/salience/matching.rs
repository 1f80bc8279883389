use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SalientMoment;
use crate::error::Result;
use crate::stream::record::{read_json_lines, write_json_lines};

/// Hand-annotated (or planted) salient frames of one stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub stream: String,
    pub frames: Vec<usize>,
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    read_json_lines(path.as_ref())
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    write_json_lines(path.as_ref(), annotations)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchReport {
    /// `(predicted_frame, annotated_frame)`, sorted by predicted frame.
    pub matched_pairs: Vec<(usize, usize)>,
    pub recall: f64,
    pub precision: f64,
    pub tolerance_frames: usize,
    pub predicted: usize,
    pub annotated: usize,
}

/// Matches predicted moments to annotated frames one-to-one.
///
/// A pair is admissible when the frames are strictly closer than
/// `tolerance`. Pairs are first taken greedily by ascending distance, then
/// augmenting paths are followed until the matching has maximum cardinality,
/// so the counts always equal those of an optimal assignment.
///
/// With nothing annotated recall is 1; with nothing predicted precision is 1.
pub fn match_moments(
    predicted: &[SalientMoment],
    annotated: &[usize],
    tolerance: usize,
) -> MatchReport {
    let pred: Vec<usize> = predicted.iter().map(|m| m.frame_index).collect();

    // admissible annotations per prediction, nearest first
    let adjacency: Vec<Vec<usize>> = pred
        .iter()
        .map(|&p| {
            let mut near: Vec<usize> = (0..annotated.len())
                .filter(|&a| p.abs_diff(annotated[a]) < tolerance)
                .collect();
            near.sort_by_key(|&a| (p.abs_diff(annotated[a]), annotated[a]));
            near
        })
        .collect();

    let mut pairs: Vec<(usize, usize, usize)> = adjacency
        .iter()
        .enumerate()
        .flat_map(|(p, near)| near.iter().map(move |&a| (p, a)))
        .map(|(p, a)| (pred[p].abs_diff(annotated[a]), a, p))
        .collect();
    pairs.sort_unstable_by_key(|&(d, a, p)| (d, annotated[a], pred[p], a, p));

    let mut owner_of_annotation: Vec<Option<usize>> = vec![None; annotated.len()];
    let mut partner_of_prediction: Vec<Option<usize>> = vec![None; pred.len()];
    for (_, a, p) in pairs {
        if owner_of_annotation[a].is_none() && partner_of_prediction[p].is_none() {
            owner_of_annotation[a] = Some(p);
            partner_of_prediction[p] = Some(a);
        }
    }

    for p in 0..pred.len() {
        if partner_of_prediction[p].is_none() {
            let mut visited = vec![false; annotated.len()];
            augment(
                p,
                &adjacency,
                &mut visited,
                &mut owner_of_annotation,
                &mut partner_of_prediction,
            );
        }
    }

    let mut matched_pairs: Vec<(usize, usize)> = partner_of_prediction
        .iter()
        .enumerate()
        .filter_map(|(p, a)| a.map(|a| (pred[p], annotated[a])))
        .collect();
    matched_pairs.sort_unstable();

    let hits = matched_pairs.len();
    let ratio = |n: usize| if n == 0 { 1.0 } else { hits as f64 / n as f64 };
    MatchReport {
        recall: ratio(annotated.len()),
        precision: ratio(pred.len()),
        matched_pairs,
        tolerance_frames: tolerance,
        predicted: pred.len(),
        annotated: annotated.len(),
    }
}

fn augment(
    p: usize,
    adjacency: &[Vec<usize>],
    visited: &mut [bool],
    owner: &mut [Option<usize>],
    partner: &mut [Option<usize>],
) -> bool {
    for &a in &adjacency[p] {
        if visited[a] {
            continue;
        }
        visited[a] = true;
        let free = match owner[a] {
            None => true,
            Some(q) => augment(q, adjacency, visited, owner, partner),
        };
        if free {
            owner[a] = Some(p);
            partner[p] = Some(a);
            return true;
        }
    }
    false
}

/// Accumulates hit counts over many fragments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecallTally {
    pub matched: usize,
    pub annotated: usize,
    pub predicted: usize,
}

impl RecallTally {
    pub fn add(&mut self, report: &MatchReport) {
        self.matched += report.matched_pairs.len();
        self.annotated += report.annotated;
        self.predicted += report.predicted;
    }

    pub fn recall(&self) -> f64 {
        if self.annotated == 0 {
            1.0
        } else {
            self.matched as f64 / self.annotated as f64
        }
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            1.0
        } else {
            self.matched as f64 / self.predicted as f64
        }
    }
}
