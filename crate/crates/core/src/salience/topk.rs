use super::{Method, SalientMoment};

/// Greedily picks up to `k` frames by descending signal value, skipping any
/// frame closer than `min_separation` to one already picked. Equal values
/// prefer the lower frame index. The result is sorted by frame index.
pub fn select_top_k(
    signal: &[f64],
    k: usize,
    min_separation: usize,
    method: Method,
) -> Vec<SalientMoment> {
    let mut order: Vec<usize> = (0..signal.len()).collect();
    order.sort_by(|&a, &b| signal[b].total_cmp(&signal[a]).then(a.cmp(&b)));

    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for t in order {
        if picked.len() == k {
            break;
        }
        if picked.iter().all(|&p| p.abs_diff(t) >= min_separation) {
            picked.push(t);
        }
    }
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|t| SalientMoment {
            frame_index: t,
            score: signal[t],
            method,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frames(moments: &[SalientMoment]) -> Vec<usize> {
        moments.iter().map(|m| m.frame_index).collect()
    }

    /// Best total value over every 3-subset whose members are pairwise
    /// at least `sep` apart.
    fn brute_force_best3(signal: &[f64], sep: usize) -> (f64, Vec<usize>) {
        let n = signal.len();
        let mut best = (f64::NEG_INFINITY, vec![]);
        for a in 0..n {
            for b in a + sep..n {
                for c in b + sep..n {
                    let total = signal[a] + signal[b] + signal[c];
                    if total > best.0 {
                        best = (total, vec![a, b, c]);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn three_isolated_spikes() {
        let mut signal = vec![0.0; 300];
        for (t, v) in [(20, 5.0), (90, 3.0), (200, 4.0)] {
            signal[t] = v;
        }
        let picked = select_top_k(&signal, 3, 60, Method::KeypointTopK);
        let (_, oracle) = brute_force_best3(&signal, 60);
        assert_eq!(frames(&picked), oracle);
        assert_eq!(frames(&picked), vec![20, 90, 200]);
    }

    #[test]
    fn constant_signal_breaks_ties_by_index() {
        let picked = select_top_k(&[1.0; 300], 3, 60, Method::KeypointTopK);
        assert_eq!(frames(&picked), vec![0, 60, 120]);
    }

    #[test]
    fn short_signal_yields_fewer() {
        let picked = select_top_k(&[1.0; 100], 3, 60, Method::KeypointTopK);
        assert_eq!(frames(&picked), vec![0, 60]);
        assert!(select_top_k(&[], 3, 60, Method::KeypointTopK).is_empty());
    }

    proptest! {
        #[test]
        fn separation_and_dominance(
            signal in prop::collection::vec(0.0f64..1.0, 1..400),
            k in 1usize..6,
            sep in 1usize..80,
        ) {
            let picked = select_top_k(&signal, k, sep, Method::KeypointTopK);
            let idx = frames(&picked);
            prop_assert!(idx.len() <= k);
            prop_assert!(idx.windows(2).all(|w| w[1] - w[0] >= sep));
            let min_sel = picked.iter().map(|m| m.score).fold(f64::INFINITY, f64::min);
            for (t, &v) in signal.iter().enumerate() {
                if idx.iter().all(|&p| p.abs_diff(t) >= sep) {
                    // an unpicked compatible frame means we ran out of k
                    prop_assert_eq!(idx.len(), k);
                    prop_assert!(v <= min_sel);
                }
            }
        }
    }
}
