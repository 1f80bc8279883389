use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decimate_rows;
use super::kernel::Real;
use super::lstm::{loss_and_gradient, predict, LstmParams, Sample};
use crate::error::{Error, Result};

/// Element type used for the forward and backward passes during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            _ => Err(Error::invalid(format!("unknown precision `{s}` (single or double)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pos_weight: f64,
    pub seed: u64,
    /// Extra temporal decimation applied to every sequence before training.
    pub decimate_n: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            pos_weight: 1.0,
            seed: 0,
            decimate_n: 1,
            hidden_dim: 256,
            precision: Precision::Single,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_int = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("decimate_n", self.decimate_n),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in positive_int {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("pos_weight", self.pos_weight)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-epoch statistics. Training figures are averaged over the epoch's
/// mini-batches as they were seen (before each update).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurves {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation accuracy.
    pub params: LstmParams,
    pub curves: TrainingCurves,
    /// 0-based; the earliest epoch wins ties.
    pub best_epoch: usize,
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F = f64> {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: LstmParams<F>,
    v: LstmParams<F>,
    step: i32,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &LstmParams<F>, learning_rate: f64) -> Self {
        let zeros = LstmParams::zeros(params.input_dim(), params.hidden_dim());
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut LstmParams<F>, grad: &LstmParams<F>) {
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::from_f64(1.0);
        let c1 = F::from_f64(1.0 - self.beta1.powi(self.step));
        let c2 = F::from_f64(1.0 - self.beta2.powi(self.step));
        let lr = F::from_f64(self.learning_rate);
        let eps = F::from_f64(self.eps);
        let blocks = params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut());
        for (((p, g), m), v) in blocks {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn check_dims(set: &[Sample], dim: usize, name: &str) -> Result<()> {
    for (i, s) in set.iter().enumerate() {
        if s.sequence.nrows() == 0 {
            return Err(Error::invalid(format!("{name} sample {i} is empty")));
        }
        if s.sequence.ncols() != dim {
            return Err(Error::invalid(format!(
                "{name} sample {i} has {} features, expected {dim}",
                s.sequence.ncols()
            )));
        }
    }
    Ok(())
}

fn prepare<F: Real>(set: &[Sample], n: usize) -> Vec<(Array2<F>, bool)> {
    set.iter()
        .map(|s| (decimate_rows(&s.sequence, n).map(|&v| F::from_f64(v)), s.label))
        .collect()
}

fn accuracy(probs: &[f64], labels: impl Iterator<Item = bool>) -> f64 {
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, l)| (p >= 0.5) == *l)
        .count();
    correct as f64 / probs.len() as f64
}

/// Mini-batch Adam on the weighted cross-entropy.
///
/// Initialization and per-epoch shuffling both draw from one generator
/// seeded with `config.seed`, so a run is fully reproducible.
pub fn train(train_set: &[Sample], val_set: &[Sample], config: &TrainingConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let input_dim = train_set[0].sequence.ncols();
    check_dims(train_set, input_dim, "training")?;
    check_dims(val_set, input_dim, "validation")?;
    match config.precision {
        Precision::Single => train_in::<f32>(train_set, val_set, input_dim, config),
        Precision::Double => train_in::<f64>(train_set, val_set, input_dim, config),
    }
}

fn train_in<F: Real>(
    train_set: &[Sample],
    val_set: &[Sample],
    input_dim: usize,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    let train_set = prepare::<F>(train_set, config.decimate_n);
    let val_set = prepare::<F>(val_set, config.decimate_n);
    let val_views: Vec<ArrayView2<F>> = val_set.iter().map(|(s, _)| s.view()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = LstmParams::<F>::init(input_dim, config.hidden_dim, &mut rng);
    let mut adam = Adam::new(&params, config.learning_rate);

    let mut curves = TrainingCurves::default();
    let mut best: Option<(f64, usize, LstmParams<F>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(ArrayView2<F>, bool)> = chunk
                .iter()
                .map(|&i| (train_set[i].0.view(), train_set[i].1))
                .collect();
            let result = loss_and_gradient(&params, &batch, config.pos_weight)?;
            if !result.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {} in epoch {} (learning rate {})",
                    result.loss,
                    epoch + 1,
                    config.learning_rate
                )));
            }
            loss_sum += result.loss * chunk.len() as f64;
            correct += result
                .probs
                .iter()
                .zip(&batch)
                .filter(|(&p, (_, l))| (p >= 0.5) == *l)
                .count();
            adam.step(&mut params, &result.gradient);
        }
        let val_probs = predict(&params, &val_views)?;
        let val_acc = accuracy(&val_probs, val_set.iter().map(|(_, l)| *l));
        let n = train_set.len() as f64;
        curves.train_loss.push(loss_sum / n);
        curves.train_accuracy.push(correct as f64 / n);
        curves.val_accuracy.push(val_acc);
        log::debug!(
            "epoch {:>3}: loss {:.5} train acc {:.4} val acc {:.4}",
            epoch + 1,
            loss_sum / n,
            correct as f64 / n,
            val_acc
        );
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, params.clone()));
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: params.cast(),
        curves,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lstm::batch_loss;
    use ndarray::Array2;

    fn toy_set() -> Vec<Sample> {
        let pattern = |a: f64, b: f64| Array2::from_shape_fn((4, 2), |(t, j)| if j == 0 { a * t as f64 } else { b });
        vec![
            Sample { sequence: pattern(0.5, 0.1), label: true },
            Sample { sequence: pattern(-0.5, 0.2), label: false },
            Sample { sequence: pattern(0.3, -0.4), label: true },
            Sample { sequence: pattern(-0.2, 0.9), label: false },
        ]
    }

    #[test]
    fn memorizes_four_samples() {
        let set = toy_set();
        let batch: Vec<(ArrayView2<f64>, bool)> = set.iter().map(|s| (s.sequence.view(), s.label)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = LstmParams::init(2, 8, &mut rng);
        let mut adam = Adam::new(&params, 1e-2);
        let start = batch_loss(&params, &batch, 1.0).unwrap();
        let mut steps = 0;
        while steps < 2000 {
            let r = loss_and_gradient(&params, &batch, 1.0).unwrap();
            if r.loss < 0.05 {
                break;
            }
            adam.step(&mut params, &r.gradient);
            steps += 1;
        }
        let end = batch_loss(&params, &batch, 1.0).unwrap();
        assert!(end < 0.05, "loss {start} -> {end} after {steps} steps");
    }

    #[test]
    fn same_seed_same_parameters() {
        let set = toy_set();
        let config = TrainingConfig {
            epochs: 5,
            batch_size: 3,
            learning_rate: 1e-2,
            hidden_dim: 6,
            seed: 17,
            ..Default::default()
        };
        let a = train(&set, &set[..2], &config).unwrap();
        let b = train(&set, &set[..2], &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.curves.train_loss.len(), 5);
        assert_eq!(a.curves.val_accuracy.len(), 5);

        let c = train(&set, &set[..2], &TrainingConfig { seed: 18, ..config }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn returns_best_validation_epoch() {
        let set = toy_set();
        let config = TrainingConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 5e-2,
            hidden_dim: 4,
            seed: 3,
            precision: Precision::Double,
            ..Default::default()
        };
        let out = train(&set, &set, &config).unwrap();
        let best = out.curves.val_accuracy[out.best_epoch];
        assert!(out.curves.val_accuracy.iter().all(|&a| a <= best));
        assert!(out.curves.val_accuracy[..out.best_epoch].iter().all(|&a| a < best));
        let views: Vec<_> = set.iter().map(|s| s.sequence.view()).collect();
        let probs = predict(&out.params, &views).unwrap();
        assert_eq!(accuracy(&probs, set.iter().map(|s| s.label)), best);
    }

    #[test]
    fn rejects_bad_input() {
        let set = toy_set();
        let config = TrainingConfig { epochs: 1, hidden_dim: 2, ..Default::default() };
        assert!(train(&[], &set, &config).is_err());
        assert!(train(&set, &[], &config).is_err());
        let odd = vec![Sample { sequence: Array2::zeros((3, 5)), label: true }];
        assert!(train(&set, &odd, &config).is_err());
        assert!(train(&set, &set, &TrainingConfig { learning_rate: 0.0, ..config.clone() }).is_err());
        assert!(train(&set, &set, &TrainingConfig { batch_size: 0, ..config }).is_err());
    }

    #[test]
    fn diverging_run_reports_numeric_error() {
        let mut set = toy_set();
        set[0].sequence[[0, 0]] = f64::NAN;
        let config = TrainingConfig { epochs: 2, hidden_dim: 3, batch_size: 4, ..Default::default() };
        assert!(matches!(train(&set, &set, &config), Err(Error::Numeric(_))));
    }
}
