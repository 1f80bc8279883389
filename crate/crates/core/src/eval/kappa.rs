use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Item by category rating counts with the same number of raters per item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationMatrix {
    counts: Vec<Vec<u32>>,
    raters_per_item: u32,
}

impl AnnotationMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self> {
        let first = counts
            .first()
            .ok_or_else(|| Error::invalid("annotation matrix has no items"))?;
        let categories = first.len();
        if categories < 2 {
            return Err(Error::invalid("annotation matrix needs at least 2 categories"));
        }
        let raters_per_item: u32 = first.iter().sum();
        if raters_per_item < 2 {
            return Err(Error::invalid("annotation matrix needs at least 2 raters per item"));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != categories {
                return Err(Error::invalid(format!(
                    "item {i} has {} categories, expected {categories}",
                    row.len()
                )));
            }
            let sum: u32 = row.iter().sum();
            if sum != raters_per_item {
                return Err(Error::invalid(format!(
                    "item {i} has {sum} ratings, expected {raters_per_item}"
                )));
            }
        }
        Ok(Self {
            counts,
            raters_per_item,
        })
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    pub fn raters_per_item(&self) -> u32 {
        self.raters_per_item
    }

    pub fn num_items(&self) -> usize {
        self.counts.len()
    }

    pub fn num_categories(&self) -> usize {
        self.counts[0].len()
    }
}

/// Rows of non-negative integers separated by whitespace or commas.
pub fn read_annotation_matrix(path: impl AsRef<Path>) -> Result<AnnotationMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::parse(i + 1, format!("`{t}` is not a count")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    AnnotationMatrix::new(rows)
}

pub fn fleiss_kappa(matrix: &AnnotationMatrix) -> Result<f64> {
    let n = f64::from(matrix.raters_per_item);
    let items = matrix.num_items() as f64;
    let mut totals = vec![0.0; matrix.num_categories()];
    let mut p_bar = 0.0;
    for row in &matrix.counts {
        let mut agree = 0.0;
        for (t, &c) in totals.iter_mut().zip(row) {
            let c = f64::from(c);
            *t += c;
            agree += c * (c - 1.0);
        }
        p_bar += agree / (n * (n - 1.0));
    }
    p_bar /= items;
    let p_e: f64 = totals.iter().map(|t| (t / (items * n)).powi(2)).sum();
    if p_e >= 1.0 {
        return Err(Error::invalid(
            "kappa is undefined: every rating falls in one category",
        ));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanEvalReport {
    pub rater_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    /// Fraction of raters who labelled each item correctly.
    pub item_fraction_correct: Vec<f64>,
    pub truth: Vec<bool>,
    /// `None` with a single rater or when every answer is the same.
    pub kappa: Option<f64>,
}

impl HumanEvalReport {
    fn mean_fraction(&self, label: bool) -> Option<f64> {
        let picked: Vec<f64> = self
            .item_fraction_correct
            .iter()
            .zip(&self.truth)
            .filter(|(_, &t)| t == label)
            .map(|(&f, _)| f)
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }

    /// Mean fraction correct over items whose true label is positive.
    pub fn positive_item_fraction(&self) -> Option<f64> {
        self.mean_fraction(true)
    }

    pub fn negative_item_fraction(&self) -> Option<f64> {
        self.mean_fraction(false)
    }

    /// `name value` lines; per-rater and per-item values carry an index suffix.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, value: String| {
            writeln!(out, "{name} {value}").expect("writing to a String");
        };
        line("raters", self.rater_accuracy.len().to_string());
        line("items", self.truth.len().to_string());
        line("mean_accuracy", self.mean_accuracy.to_string());
        line("min_accuracy", self.min_accuracy.to_string());
        line("max_accuracy", self.max_accuracy.to_string());
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| v.to_string());
        line("kappa", opt(self.kappa));
        line("positive_item_fraction", opt(self.positive_item_fraction()));
        line("negative_item_fraction", opt(self.negative_item_fraction()));
        for (i, a) in self.rater_accuracy.iter().enumerate() {
            line(&format!("rater_accuracy_{i}"), a.to_string());
        }
        for (i, f) in self.item_fraction_correct.iter().enumerate() {
            line(&format!("item_fraction_correct_{i}"), f.to_string());
        }
        out
    }
}

pub fn human_eval_report(annotations: &[Vec<bool>], truth: &[bool]) -> Result<HumanEvalReport> {
    if annotations.is_empty() {
        return Err(Error::invalid("no raters"));
    }
    if truth.is_empty() {
        return Err(Error::invalid("no items"));
    }
    for (r, a) in annotations.iter().enumerate() {
        if a.len() != truth.len() {
            return Err(Error::invalid(format!(
                "rater {r} labelled {} items, expected {}",
                a.len(),
                truth.len()
            )));
        }
    }
    let raters = annotations.len() as f64;
    let items = truth.len() as f64;
    let correct = |a: &Vec<bool>, i: usize| a[i] == truth[i];

    let rater_accuracy: Vec<f64> = annotations
        .iter()
        .map(|a| (0..truth.len()).filter(|&i| correct(a, i)).count() as f64 / items)
        .collect();
    let item_fraction_correct: Vec<f64> = (0..truth.len())
        .map(|i| annotations.iter().filter(|a| correct(a, i)).count() as f64 / raters)
        .collect();

    let kappa = if annotations.len() < 2 {
        None
    } else {
        let counts = (0..truth.len())
            .map(|i| {
                let yes = annotations.iter().filter(|a| a[i]).count() as u32;
                vec![yes, annotations.len() as u32 - yes]
            })
            .collect();
        fleiss_kappa(&AnnotationMatrix::new(counts)?).ok()
    };

    Ok(HumanEvalReport {
        mean_accuracy: rater_accuracy.iter().sum::<f64>() / raters,
        min_accuracy: rater_accuracy.iter().copied().fold(f64::INFINITY, f64::min),
        max_accuracy: rater_accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        rater_accuracy,
        item_fraction_correct,
        truth: truth.to_vec(),
        kappa,
    })
}
