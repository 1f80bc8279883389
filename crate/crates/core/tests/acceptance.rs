//! One line per acceptance criterion, written straight to stderr so it shows
//! up in captured test output. Criteria run one at a time so the runtime
//! bounds are measured on an otherwise idle machine.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use misdetect::datagen::{generate, write_dataset, GenSpec, Regime};
use misdetect::eval::{fleiss_kappa, roc_and_auc, AnnotationMatrix};
use misdetect::model::{batch_loss, gradients, LstmParams};
use misdetect::pipeline::{self, run_in_memory, PipelineConfig, Settings};
use misdetect::salience::{extract_moments, match_moments, Method, SalienceConfig};
use misdetect::stream::{make_splits, ExchangeRecord, Subset};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(pass: bool, name: &str, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "ACCEPTANCE {verdict} {name}: {detail}").unwrap();
}

fn config_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn bundled(name: &str, overrides: &[(&str, &str)]) -> PipelineConfig {
    let mut s = Settings::default();
    s.apply_file(config_file(name)).unwrap();
    for (k, v) in overrides {
        s.set(k, v).unwrap();
    }
    PipelineConfig::from_settings(&s).unwrap()
}

const FD_STEP: f64 = 1e-6;
const FD_TOLERANCE: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-5;
const FD_BUDGET: Duration = Duration::from_secs(30);

/// Worst relative error and worst absolute difference over every component.
fn gradient_errors(input_dim: usize, hidden_dim: usize, steps: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LstmParams::<f64>::init(input_dim, hidden_dim, &mut rng);
    p.head_bias = rng.random_range(-0.5..0.5);
    let seq = Array2::from_shape_fn((steps, input_dim), |_| rng.random_range(-1.0..1.0));
    // every shape sees both labels across the three seeds
    let label = (seed as usize + steps) % 2 == 1;
    let batch = [(seq.view(), label)];
    let pos_weight = rng.random_range(0.5..3.0);
    let analytic = gradients(&p, &batch, pos_weight).unwrap();
    let (mut floored, mut abs) = (0.0f64, 0.0f64);
    for block in 0..5 {
        for k in 0..p.slices()[block].len() {
            let orig = p.slices()[block][k];
            p.slices_mut()[block][k] = orig + FD_STEP;
            let up = batch_loss(&p, &batch, pos_weight).unwrap();
            p.slices_mut()[block][k] = orig - FD_STEP;
            let down = batch_loss(&p, &batch, pos_weight).unwrap();
            p.slices_mut()[block][k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.slices()[block][k];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            floored = floored.max(diff / scale.max(FD_FLOOR));
            abs = abs.max(diff);
        }
    }
    (floored, abs)
}

#[test]
fn gradient_correctness() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (mut worst, mut worst_abs) = (0.0f64, 0.0f64);
    let mut configs = 0;
    for seed in [11u64, 12, 13] {
        for input in [4, 52] {
            for hidden in [8, 32] {
                for steps in [3, 36] {
                    let (rel, abs) = gradient_errors(input, hidden, steps, seed);
                    worst = worst.max(rel);
                    worst_abs = worst_abs.max(abs);
                    configs += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < FD_TOLERANCE && elapsed < FD_BUDGET;
    report(
        pass,
        "gradient-check",
        &format!(
            "{configs} configs, worst relative error {worst:.2e} (denominator floor {FD_FLOOR:e}) < {FD_TOLERANCE:e}, \
             max absolute difference {worst_abs:.1e}; {:.1} s < {} s",
            elapsed.as_secs_f64(),
            FD_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (&si, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

#[test]
fn auc_oracle() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut sets = 0;
    while sets < 200 {
        let n = rng.random_range(2..=100);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        // a coarse grid half the time so ties occur
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..6) as f64 / 5.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let auc = roc_and_auc(&scores, &labels).unwrap().auc;
        worst = worst.max((auc - pairwise_auc(&scores, &labels)).abs());
        sets += 1;
    }
    let pass = worst < 1e-9;
    report(
        pass,
        "auc-oracle",
        &format!("{sets} sets of size 2-100, max |trapezoid - pairwise| = {worst:.1e} < 1e-9"),
    );
    assert!(pass);
}

#[test]
fn expressive_analog() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let config = bundled("separable.cfg", &[]);
    let start = Instant::now();
    let (out, _, _) = run_in_memory(&config).unwrap();
    let elapsed = start.elapsed();
    let (auc, acc) = (out.report.auc(), out.report.point.accuracy);
    let pass = auc >= 0.75 && acc >= 0.65 && elapsed < Duration::from_secs(300);
    report(
        pass,
        "expressive-analog",
        &format!(
            "n 139, hidden 512, 75 epochs: test AUC {auc:.3} >= 0.75, accuracy {acc:.3} >= 0.65 \
             (F1 {:.3}, best epoch {}); {:.0} s < 300 s",
            out.report.point.f1,
            out.outcome.best_epoch,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn null_result() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut aucs = Vec::new();
    for seed in ["1", "2", "3"] {
        let (out, _, _) = run_in_memory(&bundled("null.cfg", &[("seed", seed)])).unwrap();
        aucs.push(out.report.auc());
    }
    let elapsed = start.elapsed();
    let pass =
        aucs.iter().all(|a| (0.40..=0.60).contains(a)) && elapsed < Duration::from_secs(1200);
    let listed: Vec<String> = aucs.iter().map(|a| format!("{a:.3}")).collect();
    report(
        pass,
        "null-result",
        &format!(
            "n 2600, 3 seeds: test AUC [{}] all in [0.40, 0.60]; {:.0} s < 1200 s",
            listed.join(", "),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Largest one-to-one matching with every pair strictly closer than `tol`.
fn exhaustive_matching(pred: &[usize], ann: &[usize], tol: usize) -> usize {
    fn go(pred: &[usize], ann: &[usize], used: &mut Vec<bool>, tol: usize) -> usize {
        let Some((&p, rest)) = pred.split_first() else {
            return 0;
        };
        let mut best = go(rest, ann, used, tol);
        for (j, &a) in ann.iter().enumerate() {
            if !used[j] && p.abs_diff(a) < tol {
                used[j] = true;
                best = best.max(1 + go(rest, ann, used, tol));
                used[j] = false;
            }
        }
        best
    }
    go(pred, ann, &mut vec![false; ann.len()], tol)
}

#[test]
fn salience_recall_harness() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let spec = GenSpec {
        noise_scale: 0.01,
        ..GenSpec::new(Regime::Fixtures)
    };
    let data = generate(&spec).unwrap();
    let planted: usize = data.samples.iter().map(|s| s.planted.len()).sum();

    let mut compared = 0;
    let mut agree = 0;
    let mut topk = (0, 0);
    for method in Method::ALL {
        let config = SalienceConfig {
            method,
            ..SalienceConfig::default()
        };
        for s in &data.samples {
            let moments = extract_moments(&s.stream, &config).unwrap();
            let frames: Vec<usize> = moments.iter().map(|m| m.frame_index).collect();
            let report = match_moments(&moments, &s.planted, 60);
            if frames.len() <= 8 && s.planted.len() <= 8 {
                compared += 1;
                if report.matched_pairs.len() == exhaustive_matching(&frames, &s.planted, 60) {
                    agree += 1;
                }
            }
            if method == Method::KeypointTopK {
                topk.0 += report.matched_pairs.len();
                topk.1 += s.planted.len();
            }
        }
    }
    let recall = topk.0 as f64 / topk.1 as f64;
    let pass = data.samples.len() == 20 && planted == 49 && agree == compared && recall >= 0.9;
    report(
        pass,
        "salience-recall",
        &format!(
            "20 fragments / {planted} planted; matching equals exhaustive oracle on {agree}/{compared} \
             fragment-method pairs; top-k (k 3, min-sep 60) recall {}/{} = {recall:.3} >= 0.90",
            topk.0, topk.1
        ),
    );
    assert!(pass);
}

#[test]
fn fleiss_kappa_cases() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let all_agree = AnnotationMatrix::new(vec![vec![4, 0], vec![0, 4], vec![4, 0], vec![0, 4]]).unwrap();
    let k1 = fleiss_kappa(&all_agree).unwrap();
    let example = AnnotationMatrix::new(vec![vec![2, 0], vec![0, 2], vec![1, 1]]).unwrap();
    let k2 = fleiss_kappa(&example).unwrap();
    let one_category = AnnotationMatrix::new(vec![vec![3, 0], vec![3, 0]]).unwrap();
    let undefined = fleiss_kappa(&one_category).is_err();
    let pass = k1 == 1.0 && (k2 - 1.0 / 3.0).abs() < 1e-12 && undefined;
    report(
        pass,
        "fleiss-kappa",
        &format!(
            "all agree = {k1} (exactly 1), 3-item example = {k2:.15} (1/3 within 1e-12), \
             single category -> error: {undefined}"
        ),
    );
    assert!(pass);
}

#[test]
fn split_contract() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let fractions = [0.675, 0.225, 0.1];
    let (mut worst_fraction, mut worst_rate) = (0.0f64, 0.0f64);
    let mut exclusive = true;
    let datasets = 10;
    for seed in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for p in 0..40 {
            for x in 0..rng.random_range(40..90) {
                records.push(ExchangeRecord {
                    participant_id: format!("p{p:02}"),
                    session_id: "s1".into(),
                    exchange_index: x,
                    mistake_label: rng.random_bool(0.272),
                    stream: format!("p{p:02}_{x}.fstream"),
                });
            }
        }
        let split = make_splits(&records, fractions, seed).unwrap();
        let mut seen: BTreeMap<&str, HashSet<Subset>> = BTreeMap::new();
        for r in &records {
            seen.entry(&r.participant_id)
                .or_default()
                .insert(split.subset_of(&r.participant_id).unwrap());
        }
        exclusive &= seen.len() == 40 && seen.values().all(|s| s.len() == 1);
        let summary = split.summary(&records);
        worst_fraction = worst_fraction.max(summary.max_fraction_deviation());
        worst_rate = worst_rate.max(summary.max_rate_deviation());
    }
    let pass = exclusive && worst_fraction <= 0.05 && worst_rate <= 0.05;
    report(
        pass,
        "split-contract",
        &format!(
            "{datasets} datasets x 40 participants, targets 67.5/22.5/10: group-exclusive {exclusive}, \
             worst fraction deviation {:.2} pp <= 5 pp, worst positive-rate deviation {:.2} pp <= 5 pp",
            100.0 * worst_fraction,
            100.0 * worst_rate
        ),
    );
    assert!(pass);
}

#[test]
fn pipeline_determinism() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let spec = GenSpec {
        n_samples: 80,
        participants: 16,
        seed: 9,
        ..GenSpec::new(Regime::Null)
    };
    let files = write_dataset(&generate(&spec).unwrap(), dir.path().join("data")).unwrap();

    let run = |name: &str| {
        let mut clean = Settings::default();
        for line in fs::read_to_string(config_file("null.cfg")).unwrap().lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let k = k.trim();
            if !["regime", "n", "pos-frac", "fps", "length"].contains(&k) && !k.starts_with('#') {
                clean.set(k, v.trim()).unwrap();
            }
        }
        clean.set("manifest", files.manifest.to_str().unwrap()).unwrap();
        clean.set("out", dir.path().join(name).to_str().unwrap()).unwrap();
        clean.set("epochs", "3").unwrap();
        clean.set("hidden", "16").unwrap();
        clean.set("splits", "0.5,0.25,0.25").unwrap();
        pipeline::run(&PipelineConfig::from_settings(&clean).unwrap()).unwrap();
        let out = dir.path().join(name);
        [
            pipeline::METRICS_FILE,
            pipeline::ROC_FILE,
            pipeline::CURVES_FILE,
            pipeline::SCORES_FILE,
            pipeline::MODEL_FILE,
            pipeline::SPLIT_FILE,
        ]
        .map(|f| fs::read(out.join(f)).unwrap())
    };
    let (a, b) = (run("first"), run("second"));
    let pass = a == b;
    report(
        pass,
        "pipeline-determinism",
        &format!(
            "two runs on one manifest: metrics, ROC, curves, scores, model and split files byte-identical: {pass} \
             ({} metric bytes)",
            a[0].len()
        ),
    );
    assert!(pass);
}
