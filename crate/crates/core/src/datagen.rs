//! Seeded synthetic datasets.
//!
//! Every sample draws from its own generator, seeded from the top-level seed
//! and the sample index, so output does not depend on the worker count.
//! Features and labels use separate generators: in the null regime the
//! features of sample `i` are the same whatever its label turns out to be.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::salience::{write_annotations, Annotation};
use crate::stream::{
    write_manifest, write_stream, ChannelSpec, ExchangeRecord, FeatureFrame, FeatureStream,
    BLENDSHAPE_DIM, KEYPOINT_COUNT,
};

/// Brow and eye-region blendshapes that carry confusion bursts.
pub const BURST_CHANNELS: [usize; 7] = [1, 2, 3, 4, 5, 19, 20];

/// Generated values are rounded to this many decimals.
const DECIMALS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Positives carry bursts, negatives are noise only.
    Separable,
    /// Bursts and noise are independent of the label.
    Null,
    /// Bursts at recorded frames, for salience recall.
    Fixtures,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Separable => "separable",
            Regime::Null => "null",
            Regime::Fixtures => "fixtures",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Regime::Separable),
            "null" => Ok(Regime::Null),
            "fixtures" => Ok(Regime::Fixtures),
            _ => Err(Error::invalid(format!(
                "unknown regime `{s}` (expected separable, null or fixtures)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub regime: Regime,
    pub n_samples: usize,
    pub positive_fraction: f64,
    pub fps: f64,
    pub length_frames: usize,
    /// Standard deviation of the smoothed blendshape noise.
    pub noise_scale: f64,
    /// Peak height of a blendshape burst.
    pub burst_amplitude: f64,
    pub seed: u64,
    /// Samples are dealt to participants round-robin.
    pub participants: usize,
    /// Fixtures only: bursts spread over all fragments.
    pub planted_moments: usize,
}

impl GenSpec {
    pub fn new(regime: Regime) -> Self {
        let base = GenSpec {
            regime,
            n_samples: 139,
            positive_fraction: 0.7,
            fps: 10.0,
            length_frames: 40,
            noise_scale: 0.03,
            burst_amplitude: 0.35,
            seed: 0,
            participants: 139,
            planted_moments: 0,
        };
        match regime {
            Regime::Separable => base,
            Regime::Null => GenSpec {
                n_samples: 2600,
                positive_fraction: 0.272,
                fps: 60.0,
                length_frames: 240,
                participants: 40,
                ..base
            },
            Regime::Fixtures => GenSpec {
                n_samples: 20,
                positive_fraction: 0.5,
                fps: 60.0,
                length_frames: 600,
                participants: 20,
                planted_moments: 49,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.n_samples == 0 {
            return fail("n_samples must be positive".into());
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return fail(format!(
                "positive_fraction must be in (0, 1), got {}",
                self.positive_fraction
            ));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        if self.length_frames < 2 {
            return fail("length_frames must be at least 2".into());
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("burst_amplitude", self.burst_amplitude),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.participants == 0 || self.participants > self.n_samples {
            return fail(format!(
                "participants must be in 1..={}, got {}",
                self.n_samples, self.participants
            ));
        }
        if self.regime == Regime::Fixtures {
            let per = self.planted_moments.div_ceil(self.n_samples);
            if per > 0 && place_count(self, per).is_none() {
                return fail(format!(
                    "{} frames cannot hold {per} separated bursts",
                    self.length_frames
                ));
            }
        }
        Ok(())
    }

    fn burst_frames(&self) -> usize {
        (self.fps.round() as usize).clamp(2, self.length_frames)
    }

    fn smoothing_frames(&self) -> usize {
        ((self.fps / 4.0).round() as usize).max(1)
    }

    fn channel_spec(&self) -> ChannelSpec {
        match self.regime {
            Regime::Separable => ChannelSpec::blendshapes_only(),
            Regime::Null | Regime::Fixtures => ChannelSpec::face_mesh(),
        }
    }
}

/// SplitMix64 output for `seed` mixed with a stream tag and an index.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_FEATURES: u64 = 1;
const TAG_LABEL: u64 = 2;
const TAG_PARTICIPANT: u64 = 3;
const TAG_LAYOUT: u64 = 4;

fn rng_for(seed: u64, tag: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub record: ExchangeRecord,
    pub stream: FeatureStream,
    /// Centre frames of the planted bursts, ascending.
    pub planted: Vec<usize>,
    /// Values clamped into `[0, 1]`.
    pub clipped: usize,
    pub values: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: GenSpec,
    pub samples: Vec<GeneratedSample>,
}

impl Dataset {
    pub fn records(&self) -> Vec<ExchangeRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }

    pub fn clipped_fraction(&self) -> f64 {
        let clipped: usize = self.samples.iter().map(|s| s.clipped).sum();
        let values: usize = self.samples.iter().map(|s| s.values).sum();
        clipped as f64 / values.max(1) as f64
    }
}

/// Bursts per fixture fragment, summing to `planted_moments`.
fn fixture_counts(spec: &GenSpec) -> Vec<usize> {
    let n = spec.n_samples;
    let base = spec.planted_moments / n;
    let extra = spec.planted_moments % n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(spec.seed, TAG_LAYOUT, 0));
    let mut counts = vec![base; n];
    for &i in &order[..extra] {
        counts[i] += 1;
    }
    counts
}

fn sample_name(index: usize) -> String {
    format!("x{index:05}")
}

/// Participant, exchange index and label of sample `index`.
fn sample_identity(spec: &GenSpec, index: usize) -> (usize, u32, bool) {
    let participant = index % spec.participants;
    let exchange = (index / spec.participants) as u32;
    let label = rng_for(spec.seed, TAG_LABEL, index).random_bool(spec.positive_fraction);
    (participant, exchange, label)
}

/// Generates sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &GenSpec, index: usize) -> Result<GeneratedSample> {
    spec.validate()?;
    if index >= spec.n_samples {
        return Err(Error::invalid(format!(
            "sample {index} out of range for {} samples",
            spec.n_samples
        )));
    }
    let bursts = match spec.regime {
        Regime::Fixtures => fixture_counts(spec)[index],
        _ => 0,
    };
    build_sample(spec, index, bursts)
}

fn build_sample(spec: &GenSpec, index: usize, fixture_bursts: usize) -> Result<GeneratedSample> {
    let (participant, exchange, label) = sample_identity(spec, index);
    let mut rng = rng_for(spec.seed, TAG_FEATURES, index);
    let burst_count = match spec.regime {
        Regime::Separable if label => rng.random_range(1..=3),
        Regime::Separable => 0,
        Regime::Null => rng.random_range(1..=3),
        Regime::Fixtures => fixture_bursts,
    };
    let centres = place_bursts(spec, &mut rng, burst_count);
    let person = Person::new(spec, participant);
    let len = spec.length_frames;
    let envelope = burst_envelope(spec, &centres);

    let mut clipped = 0;
    let mut values = 0;
    let mut quantize = |x: f64| {
        values += 1;
        if !(0.0..=1.0).contains(&x) {
            clipped += 1;
        }
        (x.clamp(0.0, 1.0) * DECIMALS).round() / DECIMALS
    };

    let mut blend = vec![vec![0.0; BLENDSHAPE_DIM]; len];
    for c in 0..BLENDSHAPE_DIM {
        let noise = smoothed_noise(&mut rng, len, spec.smoothing_frames());
        let gain = if BURST_CHANNELS.contains(&c) {
            spec.burst_amplitude
        } else {
            0.0
        };
        for t in 0..len {
            blend[t][c] =
                quantize(person.blend_base[c] + spec.noise_scale * noise[t] + gain * envelope[t]);
        }
    }

    let keypoints = (spec.channel_spec().keypoints.is_some()).then(|| {
        let jitter = 0.02 * spec.noise_scale;
        let head_sd = 0.1 * spec.noise_scale;
        let lift = 0.1 * spec.burst_amplitude;
        let decay = (-1.0 / (2.0 * spec.fps)).exp();
        let step_sd = head_sd * (1.0 - decay * decay).sqrt();
        let mut head = [
            head_sd * rng.sample::<f64, _>(StandardNormal),
            head_sd * rng.sample::<f64, _>(StandardNormal),
        ];
        (0..len)
            .map(|t| {
                for h in &mut head {
                    *h = decay * *h + step_sd * rng.sample::<f64, _>(StandardNormal);
                }
                let mut frame = Vec::with_capacity(2 * KEYPOINT_COUNT);
                for (p, &(x, y)) in person.layout.iter().enumerate() {
                    let dy = if person.brow[p] { -lift * envelope[t] } else { 0.0 };
                    frame.push(quantize(
                        x + head[0] + jitter * rng.sample::<f64, _>(StandardNormal),
                    ));
                    frame.push(quantize(
                        y + head[1] + dy + jitter * rng.sample::<f64, _>(StandardNormal),
                    ));
                }
                frame
            })
            .collect::<Vec<_>>()
    });

    let mut keypoints = keypoints.map(Vec::into_iter);
    let frames = blend
        .into_iter()
        .enumerate()
        .map(|(t, b)| FeatureFrame {
            index: t,
            face_detected: true,
            blendshapes: Some(b),
            keypoints: keypoints.as_mut().and_then(Iterator::next),
            embedding: None,
        })
        .collect();

    let name = sample_name(index);
    let stream = FeatureStream::new(name.clone(), spec.fps, spec.channel_spec(), frames)?;
    Ok(GeneratedSample {
        record: ExchangeRecord {
            participant_id: format!("p{participant:03}"),
            session_id: "s1".to_string(),
            exchange_index: exchange,
            mistake_label: label,
            stream: format!("streams/{name}.fstream"),
        },
        stream,
        planted: centres,
        clipped,
        values,
    })
}

/// Participant-level traits: resting blendshape levels and face layout.
struct Person {
    blend_base: Vec<f64>,
    layout: Vec<(f64, f64)>,
    brow: Vec<bool>,
}

impl Person {
    fn new(spec: &GenSpec, participant: usize) -> Self {
        let mut rng = rng_for(spec.seed, TAG_PARTICIPANT, participant);
        let blend_base = (0..BLENDSHAPE_DIM)
            .map(|_| rng.random_range(0.1..0.3))
            .collect();
        let (cx, cy) = (rng.random_range(0.45..0.55), rng.random_range(0.45..0.55));
        let scale = rng.random_range(0.9..1.1);
        let canonical = canonical_layout();
        let layout = canonical
            .iter()
            .map(|&(x, y)| (cx + scale * x, cy + scale * y))
            .collect();
        let brow = canonical.iter().map(|&(_, y)| y < -0.1).collect();
        Person {
            blend_base,
            layout,
            brow,
        }
    }
}

/// Fixed face-shaped point cloud centred on the origin.
fn canonical_layout() -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(468);
    (0..KEYPOINT_COUNT)
        .map(|_| {
            let r = rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (0.16 * r * a.cos(), 0.22 * r * a.sin())
        })
        .collect()
}

/// Unit-variance noise smoothed by a moving average of `width` frames.
fn smoothed_noise(rng: &mut impl Rng, len: usize, width: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..len + width - 1)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let norm = 1.0 / (width as f64).sqrt();
    let mut sum: f64 = white[..width].iter().sum();
    let mut out = Vec::with_capacity(len);
    out.push(sum * norm);
    for t in 1..len {
        sum += white[t + width - 1] - white[t - 1];
        out.push(sum * norm);
    }
    out
}

/// Raised-cosine bumps of one burst length, peaking at 1 on each centre.
fn burst_envelope(spec: &GenSpec, centres: &[usize]) -> Vec<f64> {
    let d = spec.burst_frames();
    let mut env = vec![0.0; spec.length_frames];
    for &c in centres {
        let start = c - d / 2;
        for (k, e) in env[start..start + d].iter_mut().enumerate() {
            let phase = (k as f64 - (d / 2) as f64) / (d as f64 / 2.0);
            *e += 0.5 * (1.0 + (std::f64::consts::PI * phase).cos());
        }
    }
    env
}

/// Widest separation at which `count` bursts fit, two seconds if possible.
fn place_count(spec: &GenSpec, count: usize) -> Option<usize> {
    let d = spec.burst_frames();
    let span = spec.length_frames - d;
    let fits = |sep: usize| (count - 1) * sep <= span;
    let two_seconds = (2.0 * spec.fps).round() as usize;
    [two_seconds.max(d), d].into_iter().find(|&s| fits(s))
}

/// Burst centres, sorted, whole bursts inside the stream, separated as
/// [`place_count`] allows. Drops bursts that cannot fit.
fn place_bursts(spec: &GenSpec, rng: &mut impl Rng, mut count: usize) -> Vec<usize> {
    let d = spec.burst_frames();
    let sep = loop {
        if count == 0 {
            return Vec::new();
        }
        match place_count(spec, count) {
            Some(sep) => break sep,
            None => count -= 1,
        }
    };
    let slack = spec.length_frames - d - (count - 1) * sep;
    let mut offsets: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
    offsets.sort_unstable();
    offsets
        .into_iter()
        .enumerate()
        .map(|(i, o)| d / 2 + o + i * sep)
        .collect()
}

/// Generates every sample, in parallel on the current rayon pool.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = match spec.regime {
        Regime::Fixtures => fixture_counts(spec),
        _ => vec![0; spec.n_samples],
    };
    let samples = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| build_sample(spec, i, counts[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// One annotation per fixture fragment listing its planted frames.
pub fn plant_report(dataset: &Dataset) -> Result<Vec<Annotation>> {
    if dataset.spec.regime != Regime::Fixtures {
        return Err(Error::invalid(format!(
            "plant report needs the fixtures regime, got {}",
            dataset.spec.regime
        )));
    }
    Ok(dataset
        .samples
        .iter()
        .map(|s| Annotation {
            stream: s.record.stream.clone(),
            frames: s.planted.clone(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub annotations: Option<PathBuf>,
    pub spec: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const SPEC_FILE: &str = "gen_spec.json";

/// Writes streams, `manifest.jsonl`, `gen_spec.json` and, for fixtures,
/// `annotations.jsonl` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<DatasetFiles> {
    let dir = dir.as_ref();
    let streams = dir.join("streams");
    fs::create_dir_all(&streams).map_err(|e| Error::io(&streams, e))?;
    dataset.samples.par_iter().try_for_each(|s| {
        let path = dir.join(&s.record.stream);
        let bytes = write_stream(&s.stream)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    })?;
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &dataset.records())?;
    let spec = dir.join(SPEC_FILE);
    let json = serde_json::to_string_pretty(&dataset.spec)
        .map_err(|e| Error::invalid(format!("cannot serialize spec: {e}")))?;
    fs::write(&spec, json + "\n").map_err(|e| Error::io(&spec, e))?;
    let annotations = if dataset.spec.regime == Regime::Fixtures {
        let path = dir.join(ANNOTATION_FILE);
        write_annotations(&path, &plant_report(dataset)?)?;
        Some(path)
    } else {
        None
    };
    Ok(DatasetFiles {
        manifest,
        annotations,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::salience::read_annotations;
    use crate::stream::{read_manifest, read_stream_file, Channel};
    use proptest::prelude::*;

    fn small(regime: Regime, n: usize) -> GenSpec {
        GenSpec {
            n_samples: n,
            participants: n.min(GenSpec::new(regime).participants),
            planted_moments: if regime == Regime::Fixtures { n * 2 } else { 0 },
            seed: 11,
            ..GenSpec::new(regime)
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_same_files() {
        let spec = small(Regime::Fixtures, 4);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&generate(&spec).unwrap(), a.path()).unwrap();
        write_dataset(&generate(&spec).unwrap(), b.path()).unwrap();
        let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
        assert_eq!(fa.len(), 4 + 3);
        assert_eq!(fa, fb);

        let other = generate(&GenSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(other.samples[0].stream, generate(&small(Regime::Fixtures, 4)).unwrap().samples[0].stream);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let spec = small(Regime::Null, 6);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| generate(&spec).unwrap().samples)
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn files_read_back() {
        let spec = small(Regime::Fixtures, 3);
        let data = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_dataset(&data, dir.path()).unwrap();
        let records = read_manifest(&files.manifest).unwrap();
        assert_eq!(records, data.records());
        let stream = read_stream_file(records[1].stream_path(dir.path())).unwrap();
        assert_eq!(stream, data.samples[1].stream);
        let ann = read_annotations(files.annotations.unwrap()).unwrap();
        assert_eq!(ann, plant_report(&data).unwrap());
        let spec_back: GenSpec =
            serde_json::from_str(&fs::read_to_string(files.spec).unwrap()).unwrap();
        assert_eq!(spec_back, spec);
    }

    #[test]
    fn separable_shapes_and_bursts() {
        let spec = GenSpec {
            n_samples: 60,
            participants: 60,
            seed: 3,
            ..GenSpec::new(Regime::Separable)
        };
        let data = generate(&spec).unwrap();
        let mut in_burst = Vec::new();
        let mut baseline = Vec::new();
        for s in &data.samples {
            assert_eq!(s.stream.len(), 40);
            assert!(!s.stream.has_channel(Channel::Keypoints));
            assert_eq!(s.record.mistake_label, !s.planted.is_empty());
            let env = burst_envelope(&spec, &s.planted);
            for (t, f) in s.stream.frames().iter().enumerate() {
                let b = f.blendshapes.as_ref().unwrap();
                for &c in &BURST_CHANNELS {
                    if !s.record.mistake_label {
                        baseline.push(b[c]);
                    } else if env[t] > 0.0 {
                        in_burst.push(b[c]);
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&in_burst) - mean(&baseline) >= 3.0 * spec.noise_scale);
        let positives = data.samples.iter().filter(|s| s.record.mistake_label).count();
        assert!((30..=54).contains(&positives), "{positives}");
    }

    #[test]
    fn clipping_is_rare_at_default_noise() {
        for regime in [Regime::Separable, Regime::Null, Regime::Fixtures] {
            let data = generate(&small(regime, 8)).unwrap();
            assert!(data.clipped_fraction() < 0.01, "{regime}: {}", data.clipped_fraction());
        }
    }

    #[test]
    fn null_features_ignore_labels() {
        let a = small(Regime::Null, 10);
        let b = GenSpec {
            positive_fraction: 0.9,
            ..a.clone()
        };
        let (da, db) = (generate(&a).unwrap(), generate(&b).unwrap());
        for (x, y) in da.samples.iter().zip(&db.samples) {
            assert_eq!(x.stream, y.stream);
        }
        assert_ne!(
            da.samples.iter().map(|s| s.record.mistake_label).collect::<Vec<_>>(),
            db.samples.iter().map(|s| s.record.mistake_label).collect::<Vec<_>>()
        );
    }

    #[test]
    fn null_identity_layout() {
        let spec = GenSpec {
            n_samples: 120,
            ..GenSpec::new(Regime::Null)
        };
        let (p, x, _) = sample_identity(&spec, 83);
        assert_eq!((p, x), (3, 2));
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn default_fixtures_plant_49_moments() {
        let spec = GenSpec::new(Regime::Fixtures);
        let counts = fixture_counts(&spec);
        assert_eq!(counts.len(), 20);
        assert_eq!(counts.iter().sum::<usize>(), 49);
        assert_eq!(counts.iter().filter(|&&c| c == 3).count(), 9);
        // build only the fragments needed to check the report
        let data = Dataset {
            spec: spec.clone(),
            samples: (0..20)
                .map(|i| build_sample(&spec, i, counts[i]))
                .collect::<Result<_>>()
                .unwrap(),
        };
        let report = plant_report(&data).unwrap();
        assert_eq!(report.iter().map(|a| a.frames.len()).sum::<usize>(), 49);
        for a in &report {
            assert!(a.frames.windows(2).all(|w| w[1] - w[0] >= 120));
        }
    }

    #[test]
    fn empty_fixture_fragment() {
        let spec = GenSpec {
            n_samples: 1,
            participants: 1,
            planted_moments: 0,
            ..GenSpec::new(Regime::Fixtures)
        };
        let report = plant_report(&generate(&spec).unwrap()).unwrap();
        assert_eq!(report.len(), 1);
        assert!(report[0].frames.is_empty());
    }

    #[test]
    fn plant_report_needs_fixtures() {
        let data = generate(&small(Regime::Separable, 2)).unwrap();
        assert!(plant_report(&data).is_err());
    }

    #[test]
    fn invalid_specs() {
        let ok = GenSpec::new(Regime::Separable);
        for bad in [
            GenSpec { n_samples: 0, ..ok.clone() },
            GenSpec { positive_fraction: 1.0, ..ok.clone() },
            GenSpec { positive_fraction: 0.0, ..ok.clone() },
            GenSpec { fps: 0.0, ..ok.clone() },
            GenSpec { length_frames: 1, ..ok.clone() },
            GenSpec { noise_scale: -1.0, ..ok.clone() },
            GenSpec { burst_amplitude: f64::NAN, ..ok.clone() },
            GenSpec { participants: 140, ..ok.clone() },
            GenSpec { length_frames: 100, ..GenSpec::new(Regime::Fixtures) },
        ] {
            assert!(generate(&bad).is_err(), "{bad:?}");
        }
        assert!("bogus".parse::<Regime>().is_err());
        assert_eq!("null".parse::<Regime>().unwrap(), Regime::Null);
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(1, 1, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn planted_frames_in_bounds(
            len in 2usize..400,
            fps in 2.0f64..80.0,
            count in 0usize..5,
            seed in any::<u64>(),
        ) {
            let spec = GenSpec { length_frames: len, fps, ..GenSpec::new(Regime::Null) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centres = place_bursts(&spec, &mut rng, count);
            let d = spec.burst_frames();
            prop_assert!(centres.len() <= count);
            prop_assert!(centres.windows(2).all(|w| w[1] - w[0] >= d));
            for &c in &centres {
                prop_assert!(c >= d / 2 && c - d / 2 + d <= len);
            }
            let env = burst_envelope(&spec, &centres);
            for &c in &centres {
                prop_assert!((env[c] - 1.0).abs() < 1e-12);
            }
        }
    }
}
