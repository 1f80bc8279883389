//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::clips::{
    assemble_compilation, split_into_moment_samples, write_clip_manifest, ClipRecord,
};
use crate::datagen::{generate, write_dataset, GenSpec, Regime};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, fleiss_kappa, human_eval_report, read_annotation_matrix, read_labels, read_scores,
    roc_table, write_text,
};
use crate::model::{
    balanced_pos_weight, decimate_rows, frames_to_sequence, predict, train, write_checkpoint,
    Checkpoint, Precision, Sample, TrainingConfig,
};
use crate::pipeline::{self, moments_with_fallback, parse_channels, PipelineConfig, Settings};
use crate::salience::{
    extract_moments, match_moments, read_annotations, write_annotations, Annotation, RecallTally,
    SalienceConfig,
};
use crate::stream::{
    make_splits, read_manifest, read_split_file, read_stream_file, write_split_file,
    write_stream_file, SplitItem, Subset,
};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "MISDETECT_WORKERS";

#[derive(Parser, Debug)]
#[command(
    name = "misdetect",
    version,
    about = "Miscommunication detection from facial feature streams",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Datagen(DatagenArgs),
    /// Find salient moments in every stream of a manifest.
    Extract(ExtractArgs),
    /// Cut clip compilations around salient moments.
    Assemble(AssembleArgs),
    /// Assign participants to train, validation and test.
    Split(SplitArgs),
    /// Train the classifier on assembled clips.
    Train(TrainArgs),
    /// ROC, AUC and point metrics for scored samples.
    Eval(EvalArgs),
    /// Fleiss' kappa and rater accuracy.
    Kappa(KappaArgs),
    /// Run every stage from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long)]
    regime: Regime,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "pos-frac")]
    pos_frac: Option<f64>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    participants: Option<usize>,
    /// Fixtures: bursts planted over all fragments.
    #[arg(long)]
    moments: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SalienceArgs {
    /// blendshape-peak, keypoint-peak or keypoint-topk.
    #[arg(long, default_value = "keypoint-topk")]
    method: String,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "min-sep")]
    min_sep: Option<usize>,
    #[arg(long)]
    lag: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    influence: Option<f64>,
}

impl SalienceArgs {
    fn config(&self) -> Result<SalienceConfig> {
        let mut s = Settings::default();
        s.set("method", &self.method)?;
        for (key, value) in [
            ("window", self.window.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("min-sep", self.min_sep.map(|v| v.to_string())),
            ("lag", self.lag.map(|v| v.to_string())),
            ("threshold", self.threshold.map(|v| v.to_string())),
            ("influence", self.influence.map(|v| v.to_string())),
        ] {
            if let Some(v) = value {
                s.set(key, &v)?;
            }
        }
        pipeline::salience_config(&s)?
            .ok_or_else(|| Error::usage("a salience method is required"))
    }
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    salience: SalienceArgs,
    /// Annotated frames to score the moments against.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value_t = crate::salience::DEFAULT_MATCH_TOLERANCE)]
    tolerance: usize,
    /// Moments as annotation lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AssembleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    salience: SalienceArgs,
    #[arg(long, default_value_t = crate::clips::DEFAULT_CONTEXT)]
    context: usize,
    #[arg(long, default_value_t = 1)]
    decimate: usize,
    /// One clip per moment instead of one compilation per exchange.
    #[arg(long = "split-moments")]
    split_moments: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Exchange manifest.
    #[arg(long, required_unless_present = "clips", conflicts_with = "clips")]
    manifest: Option<PathBuf>,
    /// Clip manifest.
    #[arg(long)]
    clips: Option<PathBuf>,
    #[arg(long, default_value = "0.675,0.225,0.1")]
    fractions: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Clip manifest.
    #[arg(long)]
    clips: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Weight positives by (1 - p) / p of the training set.
    #[arg(long = "weighted-loss", conflicts_with = "pos_weight")]
    weighted_loss: bool,
    #[arg(long = "pos-weight")]
    pos_weight: Option<f64>,
    #[arg(long, default_value_t = 1)]
    decimate: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "single")]
    precision: Precision,
    #[arg(long, default_value = "blendshapes")]
    channels: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Test-set scores, one per line.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Test-set labels, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long = "roc-out")]
    roc_out: Option<PathBuf>,
    #[arg(long, default_value_t = crate::eval::DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct KappaArgs {
    /// Item by category count matrix.
    #[arg(long, required_unless_present = "ratings", conflicts_with = "ratings")]
    matrix: Option<PathBuf>,
    /// One line of 0/1 answers per rater.
    #[arg(long, requires = "truth")]
    ratings: Option<PathBuf>,
    /// True labels, one per line.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// `key = value` settings; keys are the override names, e.g. `min-sep = 60`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`; a bare `--key` means true.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() || e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                1
            } else {
                0
            };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_workers().and_then(|()| dispatch(cli.command, out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                eprintln!("{}", Cli::command().render_usage());
            }
            e.exit_code()
        }
    }
}

fn configure_workers() -> Result<()> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::usage(format!("{WORKERS_ENV} must be a positive integer")))?;
    // a second call in one process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Datagen(a) => datagen(a, out),
        Command::Extract(a) => extract(a, out),
        Command::Assemble(a) => assemble(a, out),
        Command::Split(a) => split(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Kappa(a) => kappa(a, out),
        Command::Pipeline(a) => pipeline_cmd(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn datagen(a: DatagenArgs, out: &mut dyn Write) -> Result<()> {
    let d = GenSpec::new(a.regime);
    let n = a.n.unwrap_or(d.n_samples);
    let spec = GenSpec {
        n_samples: n,
        positive_fraction: a.pos_frac.unwrap_or(d.positive_fraction),
        fps: a.fps.unwrap_or(d.fps),
        length_frames: a.length.unwrap_or(d.length_frames),
        noise_scale: a.noise.unwrap_or(d.noise_scale),
        burst_amplitude: a.amplitude.unwrap_or(d.burst_amplitude),
        participants: a.participants.unwrap_or(match a.regime {
            Regime::Null => d.participants.min(n),
            _ => n,
        }),
        planted_moments: a.moments.unwrap_or(d.planted_moments),
        seed: a.seed,
        ..d
    };
    let data = generate(&spec)?;
    let files = write_dataset(&data, &a.out)?;
    let positives = data.samples.iter().filter(|s| s.record.mistake_label).count();
    let mut text = format!(
        "samples {}\npositives {positives}\nclipped_fraction {}\nmanifest {}\n",
        data.samples.len(),
        data.clipped_fraction(),
        files.manifest.display()
    );
    if let Some(ann) = files.annotations {
        let planted: usize = data.samples.iter().map(|s| s.planted.len()).sum();
        text.push_str(&format!("planted_moments {planted}\nannotations {}\n", ann.display()));
    }
    emit(out, &text)
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn extract(a: ExtractArgs, out: &mut dyn Write) -> Result<()> {
    let config = a.salience.config()?;
    let records = read_manifest(&a.manifest)?;
    let dir = manifest_dir(&a.manifest);
    let found = records
        .par_iter()
        .map(|r| {
            let stream = read_stream_file(r.stream_path(dir))?;
            extract_moments(&stream, &config)
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<Annotation> = records
        .iter()
        .zip(&found)
        .map(|(r, m)| Annotation {
            stream: r.stream.clone(),
            frames: m.iter().map(|x| x.frame_index).collect(),
        })
        .collect();
    if let Some(path) = &a.out {
        write_annotations(path, &predicted)?;
    }
    let total: usize = found.iter().map(Vec::len).sum();
    let mut text = format!("method {}\nstreams {}\nmoments {total}\n", config.method, records.len());
    if let Some(path) = &a.annotations {
        let annotations = read_annotations(path)?;
        let mut tally = RecallTally::default();
        for ann in &annotations {
            let i = records
                .iter()
                .position(|r| r.stream == ann.stream)
                .ok_or_else(|| {
                    Error::invalid(format!("annotated stream `{}` is not in the manifest", ann.stream))
                })?;
            tally.add(&match_moments(&found[i], &ann.frames, a.tolerance));
        }
        text.push_str(&format!(
            "tolerance {}\nannotated {}\nmatched {}\nrecall {}\nprecision {}\n",
            a.tolerance,
            tally.annotated,
            tally.matched,
            tally.recall(),
            tally.precision()
        ));
    }
    emit(out, &text)
}

fn assemble(a: AssembleArgs, out: &mut dyn Write) -> Result<()> {
    let config = a.salience.config()?;
    if a.context == 0 || a.decimate == 0 {
        return Err(Error::usage("--context and --decimate must be positive"));
    }
    let records = read_manifest(&a.manifest)?;
    let dir = manifest_dir(&a.manifest);
    let per_exchange = records
        .par_iter()
        .map(|r| {
            let stream = read_stream_file(r.stream_path(dir))?;
            let moments = moments_with_fallback(&stream, &config)?;
            let label = Some(r.mistake_label);
            let clips = if a.split_moments {
                split_into_moment_samples(&stream, &moments, a.context, a.decimate, label)?
            } else {
                vec![assemble_compilation(&stream, &moments, a.context, a.decimate, label)?]
            };
            let stem = Path::new(&r.stream)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{}_{}", r.participant_id, r.exchange_index));
            clips
                .into_iter()
                .enumerate()
                .map(|(m, clip)| {
                    let name = if a.split_moments {
                        format!("clips/{stem}_m{m}.fstream")
                    } else {
                        format!("clips/{stem}.fstream")
                    };
                    write_stream_file(a.out.join(&name), &clip.to_stream()?)?;
                    Ok(ClipRecord {
                        participant_id: r.participant_id.clone(),
                        session_id: r.session_id.clone(),
                        exchange_index: r.exchange_index,
                        moment: a.split_moments.then_some(m),
                        mistake_label: r.mistake_label,
                        stream: name,
                        source_stream: r.stream.clone(),
                        decimation: clip.decimation,
                        provenance: clip.provenance,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let clips: Vec<ClipRecord> = per_exchange.into_iter().flatten().collect();
    let manifest = a.out.join("clips.jsonl");
    write_clip_manifest(&manifest, &clips)?;
    emit(
        out,
        &format!("clips {}\nmanifest {}\n", clips.len(), manifest.display()),
    )
}

fn parse_fractions(text: &str) -> Result<[f64; 3]> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::usage(format!("bad fractions `{text}`")))?;
    values
        .try_into()
        .map_err(|_| Error::usage("--fractions needs three values"))
}

fn split(a: SplitArgs, out: &mut dyn Write) -> Result<()> {
    let fractions = parse_fractions(&a.fractions)?;
    let (split, summary) = match (&a.manifest, &a.clips) {
        (Some(m), _) => {
            let items = read_manifest(m)?;
            let s = make_splits(&items, fractions, a.seed)?;
            let summary = s.summary(&items);
            (s, summary)
        }
        (None, Some(c)) => {
            let items = crate::clips::read_clip_manifest(c)?;
            let s = make_splits(&items, fractions, a.seed)?;
            let summary = s.summary(&items);
            (s, summary)
        }
        (None, None) => return Err(Error::usage("--manifest or --clips is required")),
    };
    write_split_file(&a.out, &split)?;
    let mut text = String::new();
    for subset in Subset::ALL {
        text.push_str(&format!(
            "{0}_samples {1}\n{0}_positive_rate {2}\n",
            subset,
            summary.counts[Subset::ALL.iter().position(|&s| s == subset).expect("listed")],
            summary.positive_rate(subset)
        ));
    }
    text.push_str(&format!(
        "max_fraction_deviation {}\nmax_rate_deviation {}\n",
        summary.max_fraction_deviation(),
        summary.max_rate_deviation()
    ));
    emit(out, &text)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let channels = parse_channels(&a.channels)?;
    let records = crate::clips::read_clip_manifest(&a.clips)?;
    let split = read_split_file(&a.split)?;
    let dir = manifest_dir(&a.clips);
    let sequences = records
        .par_iter()
        .map(|r| {
            let stream = read_stream_file(dir.join(&r.stream))?;
            frames_to_sequence(stream.frames(), &channels)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut subsets: [Vec<Sample>; 3] = Default::default();
    for (r, sequence) in records.iter().zip(sequences) {
        let subset = split.subset_of(r.participant()).ok_or_else(|| {
            Error::invalid(format!("participant `{}` is not in the split", r.participant_id))
        })?;
        let slot = Subset::ALL.iter().position(|&s| s == subset).expect("listed");
        subsets[slot].push(Sample {
            sequence,
            label: r.mistake_label,
        });
    }
    let [train_set, val_set, test_set] = subsets;
    let pos_weight = if a.weighted_loss {
        balanced_pos_weight(train_set.iter().map(|s| s.label))?
    } else {
        a.pos_weight.unwrap_or(1.0)
    };
    let config = TrainingConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        pos_weight,
        seed: a.seed,
        decimate_n: a.decimate,
        hidden_dim: a.hidden,
        precision: a.precision,
    };
    config.validate().map_err(|e| Error::usage(e.to_string()))?;
    let outcome = train(&train_set, &val_set, &config)?;
    write_checkpoint(
        &a.out,
        &Checkpoint {
            params: outcome.params.clone(),
            config: config.clone(),
            channels,
            best_epoch: outcome.best_epoch,
        },
    )?;
    if let Some(path) = &a.curves {
        write_text(path, &pipeline::curves_table(&outcome))?;
    }
    let best = outcome.best_epoch;
    let mut text = format!(
        "train_samples {}\nvalidation_samples {}\ntest_samples {}\npos_weight {pos_weight}\nbest_epoch {best}\nbest_validation_accuracy {}\n",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        outcome.curves.val_accuracy[best]
    );
    if a.scores.is_some() || a.labels.is_some() {
        let decimated: Vec<Array2<f64>> = test_set
            .iter()
            .map(|s| decimate_rows(&s.sequence, a.decimate))
            .collect();
        let views: Vec<ArrayView2<f64>> = decimated.iter().map(|x| x.view()).collect();
        let scores = predict(&outcome.params, &views)?;
        if let Some(path) = &a.scores {
            let lines: String = scores.iter().map(|s| format!("{s}\n")).collect();
            write_text(path, &lines)?;
        }
        if let Some(path) = &a.labels {
            let lines: String = test_set
                .iter()
                .map(|s| format!("{}\n", u8::from(s.label)))
                .collect();
            write_text(path, &lines)?;
        }
        text.push_str(&format!("scored_test_samples {}\n", scores.len()));
    }
    emit(out, &text)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let scores = read_scores(&a.scores)?;
    let labels = read_labels(&a.labels)?;
    let report = evaluate(&scores, &labels, a.threshold)?;
    if let Some(path) = &a.roc_out {
        write_text(path, &roc_table(&report.roc))?;
    }
    emit(out, &report.to_text())
}

fn read_ratings(path: &Path) -> Result<Vec<Vec<bool>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| match t {
                    "1" | "true" => Ok(true),
                    "0" | "false" => Ok(false),
                    _ => Err(Error::parse(i + 1, format!("`{t}` is not a rating (0/1)"))),
                })
                .collect()
        })
        .collect()
}

fn kappa(a: KappaArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(path) = &a.matrix {
        let m = read_annotation_matrix(path)?;
        let k = fleiss_kappa(&m)?;
        return emit(
            out,
            &format!(
                "items {}\ncategories {}\nraters_per_item {}\nkappa {k}\n",
                m.num_items(),
                m.num_categories(),
                m.raters_per_item()
            ),
        );
    }
    let (Some(ratings), Some(truth)) = (&a.ratings, &a.truth) else {
        return Err(Error::usage("use --matrix, or --ratings with --truth"));
    };
    let report = human_eval_report(&read_ratings(ratings)?, &read_labels(truth)?)?;
    emit(out, &report.to_text())
}

/// Turns `--key value`, `--key=value` and bare `--key` into settings.
fn apply_overrides(settings: &mut Settings, args: &[String]) -> Result<()> {
    let mut i = 0;
    while i < args.len() {
        let Some(flag) = args[i].strip_prefix("--") else {
            return Err(Error::usage(format!("expected a --key, got `{}`", args[i])));
        };
        if let Some((key, value)) = flag.split_once('=') {
            settings.set(key, value)?;
            i += 1;
        } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
            settings.set(flag, &args[i + 1])?;
            i += 2;
        } else {
            settings.set(flag, "true")?;
            i += 1;
        }
    }
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs, out: &mut dyn Write) -> Result<()> {
    let mut settings = Settings::default();
    if let Some(path) = &a.config {
        settings.apply_file(path)?;
    }
    apply_overrides(&mut settings, &a.overrides)?;
    let config = PipelineConfig::from_settings(&settings)?;
    let output = pipeline::run(&config)?;
    emit(out, &output.metrics_text())?;
    emit(
        out,
        &format!("outputs {}\n", config.out.display()),
    )
}
