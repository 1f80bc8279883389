//! Participant-grouped, label-stratified train/validation/test splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ExchangeRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Validation, Subset::Test];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Validation => "validation",
            Subset::Test => "test",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown subset `{s}`")))
    }
}

/// Anything that belongs to a participant and carries a binary label.
pub trait SplitItem {
    fn participant(&self) -> &str;
    fn label(&self) -> bool;
}

impl SplitItem for ExchangeRecord {
    fn participant(&self) -> &str {
        &self.participant_id
    }

    fn label(&self) -> bool {
        self.mistake_label
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Subset>,
    pub target_fractions: [f64; 3],
}

impl SplitAssignment {
    pub fn subset_of(&self, participant: &str) -> Option<Subset> {
        self.assignment.get(participant).copied()
    }

    /// Indices of `items` falling into `subset`, in input order.
    pub fn indices<T: SplitItem>(&self, items: &[T], subset: Subset) -> Vec<usize> {
        items
            .iter()
            .enumerate()
            .filter(|(_, it)| self.subset_of(it.participant()) == Some(subset))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn summary<T: SplitItem>(&self, items: &[T]) -> SplitSummary {
        let mut counts = [0usize; 3];
        let mut positives = [0usize; 3];
        for it in items {
            if let Some(s) = self.subset_of(it.participant()) {
                counts[s.slot()] += 1;
                positives[s.slot()] += usize::from(it.label());
            }
        }
        SplitSummary {
            counts,
            positives,
            target_fractions: self.target_fractions,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub counts: [usize; 3],
    pub positives: [usize; 3],
    pub target_fractions: [f64; 3],
}

impl SplitSummary {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn sample_fraction(&self, s: Subset) -> f64 {
        self.counts[s.slot()] as f64 / self.total().max(1) as f64
    }

    pub fn positive_rate(&self, s: Subset) -> f64 {
        self.positives[s.slot()] as f64 / self.counts[s.slot()].max(1) as f64
    }

    pub fn global_positive_rate(&self) -> f64 {
        self.positives.iter().sum::<usize>() as f64 / self.total().max(1) as f64
    }

    /// Largest absolute gap between realised and target sample fractions.
    pub fn max_fraction_deviation(&self) -> f64 {
        Subset::ALL
            .into_iter()
            .map(|s| (self.sample_fraction(s) - self.target_fractions[s.slot()]).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute gap between a subset's positive rate and the global one.
    pub fn max_rate_deviation(&self) -> f64 {
        let global = self.global_positive_rate();
        Subset::ALL
            .into_iter()
            .map(|s| (self.positive_rate(s) - global).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
struct Group {
    count: usize,
    positives: usize,
}

/// Working state for the splitter: per-subset totals for a candidate assignment.
struct Tally<'a> {
    groups: &'a [Group],
    slot_of: Vec<usize>,
    counts: [usize; 3],
    positives: [usize; 3],
    members: [usize; 3],
    total: f64,
    total_pos: f64,
    targets: [f64; 3],
}

impl Tally<'_> {
    fn place(&mut self, g: usize, slot: usize) {
        self.slot_of[g] = slot;
        self.counts[slot] += self.groups[g].count;
        self.positives[slot] += self.groups[g].positives;
        self.members[slot] += 1;
    }

    fn remove(&mut self, g: usize) {
        let slot = self.slot_of[g];
        self.counts[slot] -= self.groups[g].count;
        self.positives[slot] -= self.groups[g].positives;
        self.members[slot] -= 1;
        self.slot_of[g] = usize::MAX;
    }

    fn deficit(&self, slot: usize) -> f64 {
        let sample = self.targets[slot] - self.counts[slot] as f64 / self.total;
        let pos = if self.total_pos > 0.0 {
            self.targets[slot] - self.positives[slot] as f64 / self.total_pos
        } else {
            0.0
        };
        sample + pos
    }

    /// Lexicographic cost: (empty subsets, worst deviation, sum of squares).
    fn cost(&self) -> (usize, f64, f64) {
        let empty = self.members.iter().filter(|&&m| m == 0).count();
        let global = self.total_pos / self.total;
        let mut worst = 0.0f64;
        let mut squares = 0.0;
        for slot in 0..3 {
            let frac = self.counts[slot] as f64 / self.total - self.targets[slot];
            let rate = if self.counts[slot] > 0 {
                self.positives[slot] as f64 / self.counts[slot] as f64 - global
            } else {
                0.0
            };
            worst = worst.max(frac.abs()).max(rate.abs());
            squares += frac * frac + rate * rate;
        }
        (empty, worst, squares)
    }
}

fn better(a: (usize, f64, f64), b: (usize, f64, f64)) -> bool {
    const EPS: f64 = 1e-12;
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    if (a.1 - b.1).abs() > EPS {
        return a.1 < b.1;
    }
    a.2 < b.2 - EPS
}

/// Above this many participants the pairwise-swap refinement is skipped;
/// participants are then small enough relative to the subsets that the
/// greedy pass and single moves already land close to the targets.
const SWAP_LIMIT: usize = 300;

/// Assigns every participant to train, validation or test.
///
/// Participants are shuffled with `seed`, ordered largest first, and
/// greedily placed into the subset with the largest combined deficit in
/// sample share and positive-label share. A deterministic local search then
/// applies single moves and pairwise swaps while they reduce the worst
/// deviation from the targets.
pub fn make_splits<T: SplitItem>(
    items: &[T],
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::invalid(format!(
            "split fractions must all be positive, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }

    let mut by_participant: BTreeMap<&str, Group> = BTreeMap::new();
    for it in items {
        let g = by_participant.entry(it.participant()).or_insert(Group {
            count: 0,
            positives: 0,
        });
        g.count += 1;
        g.positives += usize::from(it.label());
    }
    if by_participant.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 participants to fill 3 subsets, got {}",
            by_participant.len()
        )));
    }

    let names: Vec<&str> = by_participant.keys().copied().collect();
    let groups: Vec<Group> = by_participant.values().copied().collect();

    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| groups[b].count.cmp(&groups[a].count));

    let mut tally = Tally {
        groups: &groups,
        slot_of: vec![usize::MAX; groups.len()],
        counts: [0; 3],
        positives: [0; 3],
        members: [0; 3],
        total: items.len() as f64,
        total_pos: groups.iter().map(|g| g.positives).sum::<usize>() as f64,
        targets: fractions,
    };

    for &g in &order {
        let slot = (0..3)
            .max_by(|&a, &b| {
                tally
                    .deficit(a)
                    .partial_cmp(&tally.deficit(b))
                    .unwrap()
                    // ties go to the earlier subset
                    .then(b.cmp(&a))
            })
            .unwrap();
        tally.place(g, slot);
    }

    refine(&mut tally, &order);

    let assignment = order
        .iter()
        .map(|&g| (names[g].to_string(), Subset::ALL[tally.slot_of[g]]))
        .collect();
    Ok(SplitAssignment {
        assignment,
        target_fractions: fractions,
    })
}

fn refine(tally: &mut Tally<'_>, order: &[usize]) {
    let swaps = order.len() <= SWAP_LIMIT;
    for _ in 0..10 * order.len() {
        let current = tally.cost();
        let mut best: Option<((usize, f64, f64), Move)> = None;
        let consider = |cost, mv, best: &mut Option<((usize, f64, f64), Move)>| {
            if better(cost, current) && best.is_none_or(|(b, _)| better(cost, b)) {
                *best = Some((cost, mv));
            }
        };

        for &g in order {
            let from = tally.slot_of[g];
            for to in (0..3).filter(|&s| s != from) {
                tally.remove(g);
                tally.place(g, to);
                let cost = tally.cost();
                tally.remove(g);
                tally.place(g, from);
                consider(cost, Move::Shift(g, to), &mut best);
            }
        }
        if swaps {
            for (i, &a) in order.iter().enumerate() {
                for &b in &order[i + 1..] {
                    let (sa, sb) = (tally.slot_of[a], tally.slot_of[b]);
                    if sa == sb {
                        continue;
                    }
                    tally.remove(a);
                    tally.remove(b);
                    tally.place(a, sb);
                    tally.place(b, sa);
                    let cost = tally.cost();
                    tally.remove(a);
                    tally.remove(b);
                    tally.place(a, sa);
                    tally.place(b, sb);
                    consider(cost, Move::Swap(a, b), &mut best);
                }
            }
        }

        match best {
            None => return,
            Some((_, Move::Shift(g, to))) => {
                tally.remove(g);
                tally.place(g, to);
            }
            Some((_, Move::Swap(a, b))) => {
                let (sa, sb) = (tally.slot_of[a], tally.slot_of[b]);
                tally.remove(a);
                tally.remove(b);
                tally.place(a, sb);
                tally.place(b, sa);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Move {
    Shift(usize, usize),
    Swap(usize, usize),
}

/// Writes `participant<TAB>subset` lines, sorted by participant.
pub fn write_split_file(path: impl AsRef<Path>, split: &SplitAssignment) -> Result<()> {
    let path = path.as_ref();
    let mut text = format!(
        "# fractions {} {} {}\n",
        split.target_fractions[0], split.target_fractions[1], split.target_fractions[2]
    );
    for (participant, subset) in &split.assignment {
        text.push_str(&format!("{participant}\t{subset}\n"));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_split_file(path: impl AsRef<Path>) -> Result<SplitAssignment> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut target_fractions = [f64::NAN; 3];
    let mut assignment = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if let Some(rest) = line.strip_prefix("# fractions") {
            let parsed: Vec<f64> = rest
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(line_no, format!("fractions: {e}")))?;
            target_fractions = parsed
                .try_into()
                .map_err(|_| Error::parse(line_no, "expected three fractions"))?;
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (participant, subset) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(line_no, "expected participant<TAB>subset"))?;
        let subset: Subset = subset.trim().parse()?;
        if assignment.insert(participant.to_string(), subset).is_some() {
            return Err(Error::parse(
                line_no,
                format!("participant `{participant}` listed twice"),
            ));
        }
    }
    Ok(SplitAssignment {
        assignment,
        target_fractions,
    })
}
