//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avsam::audio::{compute_log_spectrogram, SpectrogramParams, Waveform};
use avsam::config::{ApMode, EvalConfig, ModelConfig, TrainConfig};
use avsam::dataset::{Manifest, Sample, Split};
use avsam::fusion::{fuse_stage, StageFusion};
use avsam::metrics::{evaluate_dataset, evaluate_predictions, MetricReport, Prediction};
use avsam::nn::{Init, ModuleGroup, ParamStore};
use avsam::seg_head::{bce_loss, GroundTruthMask, MaskLogits};
use avsam::synth::{generate_dataset, SynthConfig};
use avsam::train::{
    gradcheck, gradcheck_samples, loss_csv, run_training, train_step, Checkpoint, FreezePlan, GradcheckOptions,
    TrainState,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn within(limit: Duration, elapsed: Duration, what: &str) -> Result<(), String> {
    if elapsed > limit {
        return Err(format!("{what} took {elapsed:.1?}, limit {limit:?}"));
    }
    Ok(())
}

// 1. Zero-initialized output projection leaves features untouched.
fn fusion_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 32;
    let mut store = ParamStore::<f64>::new();
    let stage = StageFusion::new(&mut Init::new(&mut store, 7), 0, dim, true);
    let store32: ParamStore<f32> = store.cast();
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let v = Array3::from_shape_fn((dim, h, w), |_| rng.random_range(-3.0..3.0));
        let a = Array1::from_shape_fn(dim, |_| rng.random_range(-3.0..3.0));
        let (z, _) = fuse_stage(&store, v.view(), a.view(), &stage, false).map_err(|e| e.to_string())?;
        ensure!(
            z.iter().zip(&v).all(|(x, y)| x.to_bits() == y.to_bits()),
            "f64 output differs from input at {h}x{w}"
        );
        let (v32, a32) = (v.mapv(|x| x as f32), a.mapv(|x| x as f32));
        let (z32, _) = fuse_stage(&store32, v32.view(), a32.view(), &stage, false).map_err(|e| e.to_string())?;
        ensure!(
            z32.iter().zip(&v32).all(|(x, y)| x.to_bits() == y.to_bits()),
            "f32 output differs from input at {h}x{w}"
        );
    }
    let t = start.elapsed();
    within(Duration::from_secs(1), t, "100 pairs")?;
    Ok(format!("100 pairs bit-exact in {t:.1?}"))
}

// 2. With the audio vector duplicated over pixels, every row of S is constant.
fn rank_one_similarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 32;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut store = ParamStore::<f64>::new();
        let stage = StageFusion::new(&mut Init::new(&mut store, i), 0, dim, false);
        let (h, w) = (rng.random_range(2..=16), rng.random_range(2..=16));
        let v = Array3::from_shape_fn((dim, h, w), |_| rng.random_range(-3.0..3.0));
        let a = Array1::from_shape_fn(dim, |_| rng.random_range(-3.0..3.0));
        let (_, cache) = fuse_stage(&store, v.view(), a.view(), &stage, false).map_err(|e| e.to_string())?;
        let s = cache.similarity();
        ensure!(s.dim() == (h * w, h * w), "S has shape {:?}", s.dim());
        for row in s.rows() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            worst = worst.max(max - min);
        }
    }
    ensure!(worst <= 1e-9, "max row spread {worst:e} > 1e-9");
    Ok(format!("max row spread {worst:e} over 100 inputs"))
}

// 3. Analytic gradients against central differences on the tiny model.
fn end_to_end_gradcheck() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    ensure!(
        cfg.backbone.dim == 8 && cfg.backbone.image_size == 16,
        "tiny config is not D=8 at 16x16"
    );
    let report = gradcheck(&cfg, &GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let trainable = avsam::AvSamF64::new(&cfg).map_err(|e| e.to_string())?.num_params();
    ensure!(
        report.checked == trainable,
        "checked {} of {trainable} scalars",
        report.checked
    );
    ensure!(
        report.max_rel_err < 1e-4,
        "max relative error {:e}\n{}",
        report.max_rel_err,
        report.table()
    );
    within(Duration::from_secs(300), t, "gradcheck")?;
    Ok(format!(
        "max relative error {:.2e} over {} scalars in {t:.1?}",
        report.max_rel_err, report.checked
    ))
}

// 4. Mean BCE at closed-form points.
fn bce_values() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = Array2::from_shape_fn((64, 64), |_| u8::from(rng.random_bool(0.3)));
    let gt = GroundTruthMask::new(mask.clone()).map_err(|e| e.to_string())?;
    let zero64 = bce_loss(&MaskLogits { values: Array2::<f64>::zeros((64, 64)) }, &gt).map_err(|e| e.to_string())?;
    let zero32 = bce_loss(&MaskLogits { values: Array2::<f32>::zeros((64, 64)) }, &gt).map_err(|e| e.to_string())?;
    let ln2 = std::f64::consts::LN_2;
    ensure!((zero64 - ln2).abs() <= 1e-6, "f64 zero logits give {zero64}");
    ensure!((zero32 as f64 - ln2).abs() <= 1e-6, "f32 zero logits give {zero32}");
    let sat = mask.mapv(|m| if m == 1 { 30.0 } else { -30.0 });
    let sat64 = bce_loss(&MaskLogits { values: sat.clone() }, &gt).map_err(|e| e.to_string())?;
    let sat32 =
        bce_loss(&MaskLogits { values: sat.mapv(|v| v as f32) }, &gt).map_err(|e| e.to_string())?;
    ensure!((0.0..1e-6).contains(&sat64), "f64 saturated loss {sat64}");
    ensure!((0.0..1e-6).contains(&(sat32 as f64)), "f32 saturated loss {sat32}");
    Ok(format!("|zero − ln 2| = {:.1e}, saturated = {sat64:.1e}", (zero64 - ln2).abs()))
}

// 5. Metrics on hand-made 8x8 fixtures against plain-loop oracles.
fn parse_grid(rows: [&str; 8]) -> Array2<u8> {
    Array2::from_shape_fn((8, 8), |(y, x)| u8::from(rows[y].as_bytes()[x] == b'#'))
}

fn oracle_iou(p: &Array2<u8>, g: &Array2<u8>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..8 {
        for x in 0..8 {
            if p[[y, x]] == 1 && g[[y, x]] == 1 {
                inter += 1;
            }
            if p[[y, x]] == 1 || g[[y, x]] == 1 {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn oracle_f(p: &Array2<u8>, g: &Array2<u8>, b2: f64) -> f64 {
    let (mut tp, mut pp, mut gp) = (0.0, 0.0, 0.0);
    for y in 0..8 {
        for x in 0..8 {
            tp += f64::from(p[[y, x]] * g[[y, x]]);
            pp += f64::from(p[[y, x]]);
            gp += f64::from(g[[y, x]]);
        }
    }
    let prec = if pp > 0.0 { tp / pp } else { 0.0 };
    let rec = if gp > 0.0 { tp / gp } else { 0.0 };
    if b2 * prec + rec == 0.0 {
        0.0
    } else {
        (1.0 + b2) * prec * rec / (b2 * prec + rec)
    }
}

/// Mean over positive pixels of the precision among all pixels scoring at
/// least as high.
fn oracle_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut npos = 0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        npos += 1;
        let (mut above, mut pos_above) = (0, 0);
        for (j, &sj) in scores.iter().enumerate() {
            if sj >= si {
                above += 1;
                pos_above += usize::from(labels[j] == 1);
            }
        }
        sum += pos_above as f64 / above as f64;
    }
    sum / npos as f64
}

fn metric_fixtures() -> Vec<(Array2<f64>, Array2<u8>)> {
    let gts = [
        ["........", "..####..", "..####..", "..####..", "..####..", "........", "........", "........"],
        ["........", "........", "....###.", "...####.", "..#####.", "...####.", "....###.", "........"],
        ["##......", "##......", "........", "........", "........", "........", "......##", "......##"],
        ["........", ".######.", ".######.", ".######.", ".######.", ".######.", ".######.", "........"],
    ];
    // Probabilities on a coarse grid so that many pixels tie.
    let preds = [
        ["........", "..aaab..", ".baaaa..", "..aaac..", "..caaa..", "........", "....d...", "........"],
        ["dd......", "........", ".....aa.", "...baa..", "..bbbb..", "...ccc..", "........", "........"],
        ["a.......", "........", "..bbb...", "..bbb...", "........", "........", "......ca", "......aa"],
        ["........", ".aaaaaa.", ".a....a.", ".a....a.", ".a....a.", ".a....a.", ".aaaaaa.", "cccccccc"],
    ];
    let level = |c: u8| match c {
        b'a' => 0.9,
        b'b' => 0.7,
        b'c' => 0.55,
        b'd' => 0.5,
        _ => 0.1,
    };
    gts.iter()
        .zip(&preds)
        .map(|(g, p)| {
            let probs = Array2::from_shape_fn((8, 8), |(y, x)| level(p[y].as_bytes()[x]));
            (probs, parse_grid(*g))
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    let fixtures = metric_fixtures();
    let preds: Vec<Prediction> = fixtures
        .iter()
        .enumerate()
        .map(|(i, (probs, gt))| Prediction {
            id: format!("f{i}"),
            probs: probs.clone(),
            gt: GroundTruthMask::new(gt.clone()).expect("binary"),
        })
        .collect();
    let bins: Vec<Array2<u8>> = fixtures.iter().map(|(p, _)| p.mapv(|v| u8::from(v > 0.5))).collect();
    let ious: Vec<f64> = bins.iter().zip(&fixtures).map(|(b, (_, g))| oracle_iou(b, g)).collect();
    let n = ious.len() as f64;
    let miou = ious.iter().sum::<f64>() / n;
    let ciou = ious.iter().filter(|&&v| v > 0.5).count() as f64 / n;
    let auc = ious
        .iter()
        .map(|&v| (0..20).filter(|&k| v > k as f64 / 20.0).count() as f64 / 20.0)
        .sum::<f64>()
        / n;
    let all_scores: Vec<f64> = fixtures.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    let all_labels: Vec<u8> = fixtures.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    let ap = oracle_ap(&all_scores, &all_labels);
    ensure!(
        ious.iter().any(|&v| v > 0.5) && ious.iter().any(|&v| v <= 0.5),
        "fixtures should straddle the cIoU threshold: {ious:?}"
    );

    let mut worst = 0.0f64;
    for beta_sq in [0.3, 1.0] {
        let cfg = EvalConfig {
            beta_sq,
            threshold: 0.5,
            ap_mode: ApMode::Pooled,
        };
        let r = evaluate_predictions(&preds, &cfg, false).map_err(|e| e.to_string())?;
        let f = bins
            .iter()
            .zip(&fixtures)
            .map(|(b, (_, g))| oracle_f(b, g, beta_sq))
            .sum::<f64>()
            / n;
        for (name, got, want) in [
            ("mIoU", r.miou, miou),
            ("F", r.fscore, f),
            ("AP", r.ap, ap),
            ("cIoU", r.ciou, ciou),
            ("AUC", r.auc, auc),
        ] {
            let d = (got - want).abs();
            ensure!(d <= 1e-9, "{name} (β²={beta_sq}): got {got}, oracle {want}");
            worst = worst.max(d);
        }
        for (s, want) in r.per_sample.iter().zip(&ious) {
            ensure!((s.iou - want).abs() <= 1e-9, "IoU of {}: {} vs {want}", s.id, s.iou);
        }
    }
    Ok(format!(
        "mIoU {miou:.4}, AP {ap:.4}, cIoU {ciou:.2}, AUC {auc:.4}; max deviation {worst:.1e}"
    ))
}

// 6. Freezing rows keep frozen groups bit-identical and move the rest.
fn freeze_invariance() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let samples: Vec<Sample<f32>> = gradcheck_samples(&cfg, 6)
        .map_err(|e| e.to_string())?
        .iter()
        .map(Sample::cast)
        .collect();
    let train = TrainConfig {
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    for (label, plan) in FreezePlan::ablation_rows() {
        let mut state = TrainState::<f32>::new(&cfg, &train).map_err(|e| e.to_string())?;
        let before = state.model.params.clone();
        for _ in 0..10 {
            train_step(&mut state, &samples, &plan, None).map_err(|e| e.to_string())?;
        }
        let after = &state.model.params;
        for (id, name, group, value) in after.iter() {
            let old = before.get(id);
            let identical = value.iter().zip(old.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if plan.is_trainable(group) {
                ensure!(!identical, "row {label}: trainable {name} did not change");
            } else {
                ensure!(identical, "row {label}: frozen {name} changed");
            }
        }
        let frozen: Vec<&str> = ModuleGroup::ALL
            .iter()
            .filter(|g| !plan.is_trainable(**g))
            .map(|g| g.name())
            .collect();
        lines.push(format!("{label} fine-tuned ({} frozen)", frozen.len()));
    }
    let t = start.elapsed();
    within(Duration::from_secs(60), t, "four rows")?;
    Ok(format!("{} in {t:.1?}", lines.join(", ")))
}

// 7. Spectrogram shape and the silence floor.
fn spectrogram_contract() -> Outcome {
    let p = SpectrogramParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 3 * 22_050;
    let inputs: Vec<(&str, Vec<f64>)> = vec![
        ("noise", (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
        (
            "chirp",
            (0..n)
                .map(|i| {
                    let t = i as f64 / 22_050.0;
                    (2.0 * std::f64::consts::PI * (200.0 + 1500.0 * t) * t).sin()
                })
                .collect(),
        ),
        ("impulse", (0..n).map(|i| f64::from(u8::from(i == n / 2))).collect()),
    ];
    for (name, samples) in inputs {
        let w = Waveform::new(samples, 22_050).map_err(|e| e.to_string())?;
        let s = compute_log_spectrogram::<f32>(&w, &p).map_err(|e| e.to_string())?;
        ensure!(s.shape() == (257, 300), "{name}: shape {:?}", s.shape());
        ensure!(s.values.iter().all(|v| v.is_finite()), "{name}: non-finite values");
    }
    let silence = compute_log_spectrogram::<f64>(&Waveform::silence(n, 22_050), &p).map_err(|e| e.to_string())?;
    ensure!(silence.shape() == (257, 300), "silence: shape {:?}", silence.shape());
    let floor = silence.floor();
    ensure!(
        silence.values.iter().all(|&v| v == floor),
        "silence is not uniformly at the floor {floor}"
    );
    Ok(format!("(257, 300) for noise, chirp and impulse; silence uniformly {floor:.3}"))
}

// 8-10 share training runs.
struct LearnRun {
    csv: String,
    report: MetricReport,
    ablated: MetricReport,
    state: TrainState<f32>,
    manifest: Manifest,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn learn_run() -> Result<LearnRun, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        n_samples: 3000,
        image_size: 64,
        seed: 0,
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(dir.path(), &synth).map_err(|e| e.to_string())?;
    let cfg = ModelConfig::default();
    ensure!(
        cfg.backbone.dim == 32 && cfg.backbone.image_size == 64,
        "default model is not D=32 at 64x64"
    );
    let train = TrainConfig::default();
    ensure!(train.epochs == 20, "default schedule is {} epochs", train.epochs);
    let train_set: Vec<Sample<f32>> = manifest
        .source(Split::Train, &cfg)
        .load_all()
        .map_err(|e| e.to_string())?;
    let mut state = TrainState::<f32>::new(&cfg, &train).map_err(|e| e.to_string())?;
    let records = run_training(&mut state, &train_set, &train, &FreezePlan::all_trainable(), |_| Ok(()))
        .map_err(|e| e.to_string())?;
    drop(train_set);
    let test = manifest.source(Split::Test, &cfg);
    let eval = EvalConfig::default();
    let report = evaluate_dataset(&state.model, &test, &eval, false).map_err(|e| e.to_string())?;
    let ablated = evaluate_dataset(&state.model, &test, &eval, true).map_err(|e| e.to_string())?;
    Ok(LearnRun {
        csv: loss_csv(&records),
        report,
        ablated,
        state,
        manifest,
        elapsed: start.elapsed(),
        _dir: dir,
    })
}

fn learnability(run: &Result<LearnRun, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let n_test = r.manifest.split(Split::Test).len();
    let summary = format!(
        "mIoU {:.4}, audio-ablated mIoU {:.4} on {n_test} test samples, {:.1?}",
        r.report.miou, r.ablated.miou, r.elapsed
    );
    ensure!(r.manifest.entries.len() == 3000, "generated {} samples", r.manifest.entries.len());
    within(Duration::from_secs(30 * 60), r.elapsed, "generation + training + evaluation")?;
    ensure!(r.report.miou >= 0.70, "{summary}: mIoU below 0.70");
    ensure!(r.ablated.miou <= 0.55, "{summary}: ablated mIoU above 0.55");
    Ok(summary)
}

fn determinism(first: &Result<LearnRun, String>) -> Outcome {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = learn_run()?;
    ensure!(a.csv == b.csv, "loss CSVs differ");
    ensure!(a.report.to_json() == b.report.to_json(), "metric JSONs differ");
    ensure!(a.ablated.to_json() == b.ablated.to_json(), "ablated metric JSONs differ");
    Ok(format!(
        "{} CSV lines and both metric JSONs identical across runs",
        a.csv.lines().count()
    ))
}

fn checkpoint_round_trip(run: &Result<LearnRun, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    r.state.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let restored = TrainState::<f32>::from_checkpoint(&loaded, &TrainConfig::default()).map_err(|e| e.to_string())?;
    ensure!(restored.model.params == r.state.model.params, "parameters differ after reload");
    ensure!(restored.adam.t == r.state.adam.t, "optimizer step differs");
    ensure!(
        restored.adam.m == r.state.adam.m && restored.adam.v == r.state.adam.v,
        "optimizer moments differ"
    );
    let test = r.manifest.source(Split::Test, &restored.model.config);
    let again = evaluate_dataset(&restored.model, &test, &EvalConfig::default(), false).map_err(|e| e.to_string())?;
    ensure!(again.to_json() == r.report.to_json(), "re-evaluation differs");
    let size = std::fs::metadata(&path).map_err(|e| e.to_string())?.len();
    Ok(format!("{size} bytes; parameters, moments and metrics bit-exact"))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .map_or_else(|| "panicked".to_string(), |s| format!("panicked: {s}"))),
    }
}

fn report(n: usize, name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL {n:>2} {name}: {detail}");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let quick: [(&str, fn() -> Outcome); 7] = [
        ("fusion residual identity", fusion_identity),
        ("rank-1 similarity", rank_one_similarity),
        ("end-to-end gradient check", end_to_end_gradcheck),
        ("BCE analytic values", bce_values),
        ("metric oracle equivalence", metric_oracles),
        ("freeze invariance", freeze_invariance),
        ("spectrogram contract", spectrogram_contract),
    ];
    for (i, (name, f)) in quick.into_iter().enumerate() {
        report(i + 1, name, guarded(f), &mut failures);
    }
    let run = guarded(learn_run);
    report(8, "synthetic learnability", guarded(|| learnability(&run)), &mut failures);
    report(9, "determinism", guarded(|| determinism(&run)), &mut failures);
    report(10, "checkpoint round trip", guarded(|| checkpoint_round_trip(&run)), &mut failures);
    if failures == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 10 criteria failed");
        ExitCode::FAILURE
    }
}
