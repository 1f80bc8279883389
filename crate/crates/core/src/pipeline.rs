//! End-to-end runs: data, salience, clips, split, training, evaluation.
//!
//! A run is described by flat `key = value` settings whose keys are the
//! `pipeline` flag names. All randomness comes from `seed`:
//! the generated data uses `derive_seed(seed, 101, 0)`, the split
//! `derive_seed(seed, 102, 0)` and training `derive_seed(seed, 103, 0)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::clips::{assemble_compilation, split_into_moment_samples, ClipCompilation};
use crate::datagen::{derive_seed, generate_sample, GenSpec, Regime};
use crate::error::{Error, Result};
use crate::eval::{evaluate, roc_table, write_text, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{
    balanced_pos_weight, decimate_rows, frames_to_sequence, predict, train, write_checkpoint,
    Checkpoint, Precision, Sample, TrainOutcome, TrainingConfig,
};
use crate::salience::{
    blendshape_sum_signal, extract_moments, keypoint_displacement_signal, Method,
    PeakDetectorParams, SalienceConfig, SalientMoment,
};
use crate::stream::{
    make_splits, read_manifest, read_stream_file, write_split_file, Channel, ExchangeRecord,
    FeatureStream, SplitItem, SplitSummary, Subset,
};

const DATA_SEED_TAG: u64 = 101;
const SPLIT_SEED_TAG: u64 = 102;
const TRAIN_SEED_TAG: u64 = 103;

/// Every accepted key, in run-manifest order.
pub const KEYS: [&str; 31] = [
    "out",
    "manifest",
    "regime",
    "n",
    "pos-frac",
    "fps",
    "length",
    "noise",
    "amplitude",
    "participants",
    "moments",
    "method",
    "window",
    "k",
    "min-sep",
    "lag",
    "threshold",
    "influence",
    "context",
    "decimate",
    "split-moments",
    "channels",
    "splits",
    "epochs",
    "batch",
    "lr",
    "hidden",
    "weighted-loss",
    "pos-weight",
    "precision",
    "seed",
];

const DATAGEN_KEYS: [&str; 9] = [
    "regime",
    "n",
    "pos-frac",
    "fps",
    "length",
    "noise",
    "amplitude",
    "participants",
    "moments",
];
const TOPK_KEYS: [&str; 2] = ["k", "min-sep"];
const PEAK_KEYS: [&str; 3] = ["lag", "threshold", "influence"];

/// Raw settings; later assignments win.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::usage(format!("unknown setting `{key}`")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::usage(format!("bad value `{v}` for `{key}`")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Manifest(PathBuf),
    /// Generated in memory; the spec seed is ignored in favour of the run seed.
    Generate(GenSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub out: PathBuf,
    pub source: Source,
    /// `None` feeds whole streams to the model.
    pub salience: Option<SalienceConfig>,
    pub context: usize,
    pub decimate: usize,
    pub split_moments: bool,
    pub channels: Vec<Channel>,
    pub fractions: [f64; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    /// Sets the positive weight to `(1 - p) / p` of the training set.
    pub weighted_loss: bool,
    pub pos_weight: f64,
    pub precision: Precision,
    pub seed: u64,
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::usage(format!("bad value `{value}` for `{key}`")))
        })
        .collect()
}

/// Comma-separated channel names.
pub fn parse_channels(value: &str) -> Result<Vec<Channel>> {
    value
        .split(',')
        .map(|c| c.trim().parse::<Channel>().map_err(|e| Error::usage(e.to_string())))
        .collect()
}

/// Salience settings from `method`, `window`, `k`, `min-sep`, `lag`,
/// `threshold` and `influence`; `None` for method `none`. Setting a key the
/// chosen method does not use is a usage error.
pub fn salience_config(s: &Settings) -> Result<Option<SalienceConfig>> {
    let method = s.or("method", "keypoint-topk".to_string())?;
    if method == "none" {
        let unused = TOPK_KEYS.iter().chain(&PEAK_KEYS).chain(&["window", "context"]);
        if let Some(k) = unused.into_iter().find(|k| s.is_set(k)) {
            return Err(Error::usage(format!("`{k}` has no effect with method none")));
        }
        return Ok(None);
    }
    let method: Method = method.parse().map_err(|e: Error| Error::usage(e.to_string()))?;
    let (unused, wanted): (&[&str], &str) = if method.uses_peak_detector() {
        (&TOPK_KEYS, "keypoint-topk")
    } else {
        (&PEAK_KEYS, "a peak method")
    };
    if let Some(k) = unused.iter().find(|k| s.is_set(k)) {
        return Err(Error::usage(format!("`{k}` needs {wanted}, not {method}")));
    }
    let d = SalienceConfig::default();
    let peak = PeakDetectorParams {
        lag: s.or("lag", d.peak.lag)?,
        threshold: s.or("threshold", d.peak.threshold)?,
        influence: s.or("influence", d.peak.influence)?,
    };
    peak.validate().map_err(|e| Error::usage(e.to_string()))?;
    let config = SalienceConfig {
        method,
        window: s.or("window", d.window)?,
        peak,
        k: s.or("k", d.k)?,
        min_separation: s.or("min-sep", d.min_separation)?,
    };
    if config.window == 0 || config.k == 0 {
        return Err(Error::usage("`window` and `k` must be positive"));
    }
    Ok(Some(config))
}

impl PipelineConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let seed: u64 = s.or("seed", 0)?;
        let source = match (s.get("manifest"), s.parsed::<String>("regime")?) {
            (Some(_), Some(_)) => {
                return Err(Error::usage("set either `manifest` or `regime`, not both"))
            }
            (None, None) => return Err(Error::usage("one of `manifest` or `regime` is required")),
            (Some(m), None) => {
                if let Some(k) = DATAGEN_KEYS.iter().find(|k| s.is_set(k)) {
                    return Err(Error::usage(format!("`{k}` needs `regime`, not `manifest`")));
                }
                Source::Manifest(PathBuf::from(m))
            }
            (None, Some(r)) => {
                let d = GenSpec::new(r.parse::<Regime>().map_err(|e| Error::usage(e.to_string()))?);
                let n = s.or("n", d.n_samples)?;
                let participants = match d.regime {
                    Regime::Null => d.participants.min(n),
                    _ => n,
                };
                let spec = GenSpec {
                    n_samples: n,
                    positive_fraction: s.or("pos-frac", d.positive_fraction)?,
                    fps: s.or("fps", d.fps)?,
                    length_frames: s.or("length", d.length_frames)?,
                    noise_scale: s.or("noise", d.noise_scale)?,
                    burst_amplitude: s.or("amplitude", d.burst_amplitude)?,
                    participants: s.or("participants", participants)?,
                    planted_moments: s.or("moments", d.planted_moments)?,
                    seed: derive_seed(seed, DATA_SEED_TAG, 0),
                    ..d
                };
                spec.validate().map_err(|e| Error::usage(e.to_string()))?;
                Source::Generate(spec)
            }
        };

        let salience = salience_config(s)?;

        let channels = match s.get("channels") {
            Some(v) => parse_channels(v)?,
            None => vec![Channel::Blendshapes],
        };
        let fractions: Vec<f64> = match s.get("splits") {
            Some(v) => parse_list("splits", v)?,
            None => vec![0.675, 0.225, 0.1],
        };
        let fractions: [f64; 3] = fractions
            .try_into()
            .map_err(|_| Error::usage("`splits` needs three fractions"))?;

        let config = PipelineConfig {
            out: PathBuf::from(s.or("out", "run".to_string())?),
            source,
            salience,
            context: s.or("context", crate::clips::DEFAULT_CONTEXT)?,
            decimate: s.or("decimate", 1)?,
            split_moments: s.or("split-moments", false)?,
            channels,
            fractions,
            epochs: s.or("epochs", 50)?,
            batch_size: s.or("batch", 16)?,
            learning_rate: s.or("lr", 1e-4)?,
            hidden_dim: s.or("hidden", 256)?,
            weighted_loss: s.or("weighted-loss", false)?,
            pos_weight: s.or("pos-weight", 1.0)?,
            precision: s.or("precision", Precision::default())?,
            seed,
        };
        if config.weighted_loss && s.is_set("pos-weight") {
            return Err(Error::usage("`pos-weight` conflicts with `weighted-loss = true`"));
        }
        if config.salience.is_none() && config.split_moments {
            return Err(Error::usage("`split-moments` needs a salience method"));
        }
        if config.context == 0 {
            return Err(Error::usage("`context` must be positive"));
        }
        config
            .training_config(1.0)
            .validate()
            .map_err(|e| Error::usage(e.to_string()))?;
        Ok(config)
    }

    pub fn training_config(&self, pos_weight: f64) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            pos_weight,
            seed: derive_seed(self.seed, TRAIN_SEED_TAG, 0),
            decimate_n: self.decimate,
            hidden_dim: self.hidden_dim,
            precision: self.precision,
        }
    }

    /// Resolved settings that reproduce this configuration.
    pub fn to_settings_text(&self) -> String {
        let mut lines: Vec<(&str, String)> = vec![("out", self.out.display().to_string())];
        match &self.source {
            Source::Manifest(p) => lines.push(("manifest", p.display().to_string())),
            Source::Generate(g) => lines.extend([
                ("regime", g.regime.to_string()),
                ("n", g.n_samples.to_string()),
                ("pos-frac", g.positive_fraction.to_string()),
                ("fps", g.fps.to_string()),
                ("length", g.length_frames.to_string()),
                ("noise", g.noise_scale.to_string()),
                ("amplitude", g.burst_amplitude.to_string()),
                ("participants", g.participants.to_string()),
                ("moments", g.planted_moments.to_string()),
            ]),
        }
        match &self.salience {
            None => lines.push(("method", "none".into())),
            Some(c) => {
                lines.push(("method", c.method.to_string()));
                lines.push(("window", c.window.to_string()));
                if c.method.uses_peak_detector() {
                    lines.push(("lag", c.peak.lag.to_string()));
                    lines.push(("threshold", c.peak.threshold.to_string()));
                    lines.push(("influence", c.peak.influence.to_string()));
                } else {
                    lines.push(("k", c.k.to_string()));
                    lines.push(("min-sep", c.min_separation.to_string()));
                }
                lines.push(("context", self.context.to_string()));
            }
        }
        let channels: Vec<&str> = self.channels.iter().map(|c| c.name()).collect();
        let fractions: Vec<String> = self.fractions.iter().map(f64::to_string).collect();
        lines.extend([
            ("decimate", self.decimate.to_string()),
            ("split-moments", self.split_moments.to_string()),
            ("channels", channels.join(",")),
            ("splits", fractions.join(",")),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch_size.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("hidden", self.hidden_dim.to_string()),
            ("weighted-loss", self.weighted_loss.to_string()),
        ]);
        if !self.weighted_loss {
            lines.push(("pos-weight", self.pos_weight.to_string()));
        }
        lines.push(("precision", self.precision.to_string()));
        lines.push(("seed", self.seed.to_string()));
        lines
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// One classifier input with its owner.
#[derive(Clone, Debug)]
pub struct PipelineSample {
    pub participant_id: String,
    pub source_stream: String,
    pub sample: Sample,
}

impl SplitItem for PipelineSample {
    fn participant(&self) -> &str {
        &self.participant_id
    }

    fn label(&self) -> bool {
        self.sample.label
    }
}

/// Moments for `stream`; peak methods that flag nothing fall back to the
/// frame with the largest signal value.
pub fn moments_with_fallback(
    stream: &FeatureStream,
    config: &SalienceConfig,
) -> Result<Vec<SalientMoment>> {
    let moments = extract_moments(stream, config)?;
    if !moments.is_empty() {
        return Ok(moments);
    }
    let signal = match config.method {
        Method::BlendshapePeak => blendshape_sum_signal(stream, config.window)?,
        _ => keypoint_displacement_signal(stream, config.window)?,
    };
    let (frame, &score) = signal
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
    Ok(vec![SalientMoment {
        frame_index: frame,
        score,
        method: config.method,
    }])
}

/// Classifier inputs built from one exchange, undecimated.
pub fn exchange_samples(
    stream: &FeatureStream,
    record: &ExchangeRecord,
    config: &PipelineConfig,
) -> Result<Vec<PipelineSample>> {
    let compilations: Vec<Vec<_>> = match &config.salience {
        None => vec![stream.frames().to_vec()],
        Some(sal) => {
            let moments = moments_with_fallback(stream, sal)?;
            let label = Some(record.mistake_label);
            let clips: Vec<ClipCompilation> = if config.split_moments {
                split_into_moment_samples(stream, &moments, config.context, 1, label)?
            } else {
                vec![assemble_compilation(stream, &moments, config.context, 1, label)?]
            };
            clips.into_iter().map(|c| c.frames).collect()
        }
    };
    compilations
        .into_iter()
        .map(|frames| {
            Ok(PipelineSample {
                participant_id: record.participant_id.clone(),
                source_stream: record.stream.clone(),
                sample: Sample {
                    sequence: frames_to_sequence(&frames, &config.channels)?,
                    label: record.mistake_label,
                },
            })
        })
        .collect()
}

/// Loads or generates every exchange and turns it into classifier inputs.
pub fn load_samples(config: &PipelineConfig) -> Result<Vec<PipelineSample>> {
    /// Exchanges generated per parallel batch, bounding peak memory.
    const CHUNK: usize = 64;
    let mut out = Vec::new();
    match &config.source {
        Source::Manifest(path) => {
            let records = read_manifest(path)?;
            let dir = path.parent().unwrap_or(Path::new(""));
            for chunk in records.chunks(CHUNK) {
                let batch = chunk
                    .par_iter()
                    .map(|r| {
                        let stream = read_stream_file(r.stream_path(dir))?;
                        exchange_samples(&stream, r, config)
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.extend(batch.into_iter().flatten());
            }
        }
        Source::Generate(spec) => {
            let indices: Vec<usize> = (0..spec.n_samples).collect();
            for chunk in indices.chunks(CHUNK) {
                let batch = chunk
                    .par_iter()
                    .map(|&i| {
                        let g = generate_sample(spec, i)?;
                        exchange_samples(&g.stream, &g.record, config)
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.extend(batch.into_iter().flatten());
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("the dataset has no exchanges"));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: EvalReport,
    pub outcome: TrainOutcome,
    pub summary: SplitSummary,
    pub pos_weight: f64,
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<bool>,
}

impl RunOutput {
    /// Evaluation report plus run facts, as `name value` lines.
    pub fn metrics_text(&self) -> String {
        let mut out = self.report.to_text();
        let c = &self.outcome.curves;
        let best = self.outcome.best_epoch;
        for (name, value) in [
            ("best_epoch", best.to_string()),
            ("best_validation_accuracy", c.val_accuracy[best].to_string()),
            ("final_train_loss", c.train_loss.last().copied().unwrap_or(f64::NAN).to_string()),
            ("pos_weight", self.pos_weight.to_string()),
            ("train_samples", self.summary.counts[0].to_string()),
            ("validation_samples", self.summary.counts[1].to_string()),
            ("test_samples", self.summary.counts[2].to_string()),
        ] {
            writeln!(out, "{name} {value}").expect("writing to a String");
        }
        out
    }
}

/// Runs every stage in memory without writing files.
pub fn run_in_memory(config: &PipelineConfig) -> Result<(RunOutput, Checkpoint, crate::stream::SplitAssignment)> {
    let samples = load_samples(config)?;
    log::info!("{} classifier inputs", samples.len());
    let split = make_splits(&samples, config.fractions, derive_seed(config.seed, SPLIT_SEED_TAG, 0))?;
    let summary = split.summary(&samples);

    let mut subsets: [Vec<Sample>; 3] = Default::default();
    for s in samples {
        let subset = split
            .subset_of(&s.participant_id)
            .expect("every participant is assigned");
        subsets[Subset::ALL.iter().position(|&x| x == subset).expect("known subset")].push(s.sample);
    }
    let [train_set, val_set, test_set] = subsets;
    if test_set.is_empty() {
        return Err(Error::invalid("the test subset is empty"));
    }

    let pos_weight = if config.weighted_loss {
        balanced_pos_weight(train_set.iter().map(|s| s.label))?
    } else {
        config.pos_weight
    };
    let training = config.training_config(pos_weight);
    let outcome = train(&train_set, &val_set, &training)?;

    let decimated: Vec<Array2<f64>> = test_set
        .iter()
        .map(|s| decimate_rows(&s.sequence, config.decimate))
        .collect();
    let views: Vec<ArrayView2<f64>> = decimated.iter().map(|a| a.view()).collect();
    let test_scores = predict(&outcome.params, &views)?;
    let test_labels: Vec<bool> = test_set.iter().map(|s| s.label).collect();
    let report = evaluate(&test_scores, &test_labels, DEFAULT_THRESHOLD)?;

    let checkpoint = Checkpoint {
        params: outcome.params.clone(),
        config: training,
        channels: config.channels.clone(),
        best_epoch: outcome.best_epoch,
    };
    Ok((
        RunOutput {
            report,
            outcome,
            summary,
            pos_weight,
            test_scores,
            test_labels,
        },
        checkpoint,
        split,
    ))
}

pub const METRICS_FILE: &str = "metrics.txt";
pub const ROC_FILE: &str = "roc.tsv";
pub const CURVES_FILE: &str = "curves.tsv";
pub const SCORES_FILE: &str = "scores.tsv";
pub const MODEL_FILE: &str = "model.json";
pub const SPLIT_FILE: &str = "split.tsv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

/// Runs the pipeline and writes its outputs under `config.out`.
pub fn run(config: &PipelineConfig) -> Result<RunOutput> {
    let (output, checkpoint, split) = run_in_memory(config)?;
    let dir = &config.out;
    let metrics = output.metrics_text();
    write_text(dir.join(METRICS_FILE), &metrics)?;
    write_text(dir.join(ROC_FILE), &roc_table(&output.report.roc))?;
    write_text(dir.join(CURVES_FILE), &curves_table(&output.outcome))?;

    let mut scores = String::from("label\tscore\n");
    for (l, s) in output.test_labels.iter().zip(&output.test_scores) {
        writeln!(scores, "{}\t{s}", u8::from(*l)).expect("writing to a String");
    }
    write_text(dir.join(SCORES_FILE), &scores)?;
    write_checkpoint(dir.join(MODEL_FILE), &checkpoint)?;
    write_split_file(dir.join(SPLIT_FILE), &split)?;

    let mut manifest = String::from("# reproduce with: misdetect pipeline --config <this file>\n");
    manifest.push_str(&config.to_settings_text());
    manifest.push_str("# metrics\n");
    for line in metrics.lines() {
        writeln!(manifest, "# {line}").expect("writing to a String");
    }
    write_text(dir.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(output)
}

/// `epoch train_loss train_accuracy val_accuracy` rows with a header.
pub fn curves_table(outcome: &TrainOutcome) -> String {
    let c = &outcome.curves;
    let mut out = String::from("epoch\ttrain_loss\ttrain_accuracy\tval_accuracy\n");
    for e in 0..c.train_loss.len() {
        writeln!(
            out,
            "{e}\t{}\t{}\t{}",
            c.train_loss[e], c.train_accuracy[e], c.val_accuracy[e]
        )
        .expect("writing to a String");
    }
    out
}
