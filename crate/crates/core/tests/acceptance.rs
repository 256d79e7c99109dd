//! End-to-end acceptance suite. Each test prints one `[acceptance N] PASS|FAIL`
//! line with the measured numbers before asserting.
//!
//! Tests take a shared lock so that timing and allocation measurements never
//! overlap with another test in this binary.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use s4mil::autograd::check::{check_gradients, GradCheckConfig};
use s4mil::autograd::NodeId;
use s4mil::bench::{random_bag, run_bench, BenchConfig};
use s4mil::data::Bag;
use s4mil::metrics::{auroc_binary, auroc_ovr, ScoredPrediction};
use s4mil::model::{count_parameters, MilModel, ModelConfig, Objective, Trainable};
use s4mil::ops::SsmMode;
use s4mil::ssm::{compute_kernel, convolve, run_recurrence, Discretization, KernelCache};
use s4mil::train::{
    fit, generate_synthetic, kfold, mil_loss, multitask_loss, SyntheticTaskSpec, TrainConfig,
};
use s4mil::verify::random_channel;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::SeqCst) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::SeqCst);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::SeqCst);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to the process stdout so the line survives test output
/// capture and shows up in a plain `cargo test` log.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn report(n: usize, title: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    say(&format!("[acceptance {n:2}] {verdict} {title}: {detail}"));
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn noise_bag(rng: &mut ChaCha8Rng, id: &str, len: usize, dim: usize) -> Bag {
    let f = Array2::from_shape_fn((len, dim), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    });
    let labels = (0..len).map(|_| rng.gen_range(0..2)).collect();
    Bag::new(id, f, rng.gen_range(0..2)).unwrap().with_patch_labels(labels).unwrap()
}

#[test]
fn criterion_01_parameter_counts() {
    let _g = serial();
    let cfg = |n| ModelConfig {
        input_dim: 1024,
        hidden_dim: 512,
        state_dim: n,
        num_classes: 2,
        num_ssm_layers: 1,
        ..ModelConfig::default()
    };
    let c32 = count_parameters(&cfg(32));
    let c128 = count_parameters(&cfg(128));
    let built = MilModel::init(cfg(32), 0).unwrap().num_parameters();
    let ok = c32 == 1_085_954 && c128 == 1_184_258 && built == c32;
    report(1, "parameter counts", ok, &format!("N=32 -> {c32} (instantiated {built}), N=128 -> {c128}"));
    assert!(ok);
}

#[test]
fn criterion_02_channel_duality() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_half = rng.gen_range(1..=8);
        let len = rng.gen_range(1..=512);
        let params = random_channel(&mut rng, n_half).unwrap();
        assert!(params.is_strictly_stable());
        let u: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        for rule in [Discretization::Bilinear, Discretization::Zoh] {
            let disc = params.discretize(rule).unwrap();
            let rec = run_recurrence(&disc, params.c(), params.d(), &u).unwrap();
            let k = compute_kernel(&disc, params.c(), len).unwrap().into_values();
            let conv = convolve(&KernelCache::from_values(k).unwrap(), &u, params.d()).unwrap();
            worst = worst.max(rel_err(&conv, &rec));
        }
    }
    let ok = worst <= 1e-6;
    report(2, "channel recurrence vs convolution", ok, &format!("100 channels x 2 rules, worst relative error {worst:.3e} (tol 1e-6)"));
    assert!(ok);
}

#[test]
fn criterion_03_model_duality() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for rule in [Discretization::Bilinear, Discretization::Zoh] {
        let model = MilModel::init(
            ModelConfig {
                input_dim: 12,
                hidden_dim: 16,
                state_dim: 8,
                discretization: rule,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        for i in 0..10 {
            let len = rng.gen_range(1..=256);
            let bag = noise_bag(&mut rng, &format!("b{i}"), len, 12);
            let conv = model.forward_with(&bag, SsmMode::Convolution).unwrap();
            let rec = model.forward_with(&bag, SsmMode::Recurrence).unwrap();
            let tok_conv = model.token_features(bag.features.view(), SsmMode::Convolution).unwrap();
            let tok_rec = model.token_features(bag.features.view(), SsmMode::Recurrence).unwrap();
            worst = worst
                .max(rel_err(&conv.probs, &rec.probs))
                .max(rel_err(tok_conv.as_slice().unwrap(), tok_rec.as_slice().unwrap()));
        }
    }
    let ok = worst <= 1e-5;
    report(3, "model recurrence vs convolution", ok, &format!("10 bags x 2 rules, worst relative error {worst:.3e} (tol 1e-5)"));
    assert!(ok);
}

#[test]
fn criterion_04_gradient_fidelity() {
    let _g = serial();
    let cfg = GradCheckConfig {
        step: 1e-5,
        rel_tol: 1e-4,
        ..GradCheckConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut failures = 0;
    let mut worst_rel = 0.0f64;
    let mut worst_small_abs = 0.0f64;
    for rule in [Discretization::Bilinear, Discretization::Zoh] {
        let model = MilModel::init(
            ModelConfig {
                input_dim: 8,
                hidden_dim: 4,
                state_dim: 4,
                multitask: true,
                discretization: rule,
                ..ModelConfig::default()
            },
            4,
        )
        .unwrap();
        let bag = noise_bag(&mut rng, "g", 16, 8);
        let mut rec = model.record(&bag, Objective::Multitask { lambda: 5.0 }).unwrap();
        let leaves: Vec<(String, NodeId)> =
            model.params().iter().zip(&rec.params).map(|(p, &id)| (p.name.clone(), id)).collect();
        let r = check_gradients(&mut rec.tape, &leaves, &cfg).unwrap();
        checked += r.entries.len();
        failures += r.failures().count();
        for e in &r.entries {
            if e.analytic.abs() >= cfg.abs_floor {
                worst_rel = worst_rel.max(e.relative_error());
            } else {
                worst_small_abs = worst_small_abs.max((e.analytic - e.numeric).abs());
            }
        }
    }
    let ok = failures == 0;
    report(
        4,
        "gradient fidelity",
        ok,
        &format!(
            "{checked} entries over 2 rules, {failures} failures, worst relative {worst_rel:.3e} (tol 1e-4), \
             worst absolute below |g|<{:.0e} is {worst_small_abs:.3e}",
            cfg.abs_floor
        ),
    );
    assert!(ok);
}

struct NeedleRun {
    slide_auroc: f64,
    patch_auroc: f64,
    epochs: usize,
}

/// Trains on the needle task and scores a held-out fold that neither training
/// nor early stopping has seen.
fn needle_run(seed: u64, objective: Objective) -> NeedleRun {
    let spec = SyntheticTaskSpec::default();
    let bags = generate_synthetic(&spec, seed).unwrap();
    let labels: Vec<usize> = bags.iter().map(|b| b.slide_label).collect();
    let folds = kfold(&labels, 5, seed).unwrap();
    let test: Vec<&Bag> = folds[0].validation.iter().map(|&i| &bags[i]).collect();
    let val: Vec<&Bag> = folds[1].validation.iter().map(|&i| &bags[i]).collect();
    let train: Vec<&Bag> = folds[0]
        .train
        .iter()
        .filter(|i| !folds[1].validation.contains(i))
        .map(|&i| &bags[i])
        .collect();

    let mut model = MilModel::init(
        ModelConfig {
            input_dim: spec.feature_dim,
            hidden_dim: 32,
            state_dim: 32,
            multitask: true,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap();
    let cfg = TrainConfig {
        max_epochs: 100,
        patience: 10,
        learning_rate: 2e-4,
        seed,
        ..TrainConfig::default()
    };
    let fitted = fit(&mut model, &train, &val, &cfg, objective).unwrap();

    let mut slide_scores = Vec::new();
    let mut slide_pos = Vec::new();
    let mut patch_scores = Vec::new();
    let mut patch_pos = Vec::new();
    for b in &test {
        let out = model.forward(b).unwrap();
        slide_scores.push(out.probs[1]);
        slide_pos.push(b.slide_label == 1);
        let probs = out.patch_probs.unwrap();
        for (t, &l) in b.patch_labels.as_ref().unwrap().iter().enumerate() {
            patch_scores.push(probs[[t, 1]]);
            patch_pos.push(l == 1);
        }
    }
    NeedleRun {
        slide_auroc: auroc_binary(&slide_scores, &slide_pos).unwrap(),
        patch_auroc: auroc_binary(&patch_scores, &patch_pos).unwrap(),
        epochs: fitted.history.len(),
    }
}

#[test]
fn criterion_05_needle_learning() {
    let _g = serial();
    let start = std::time::Instant::now();
    let run = needle_run(5, Objective::Slide);
    let ok = run.slide_auroc >= 0.95;
    report(
        5,
        "needle task learning",
        ok,
        &format!(
            "held-out AUROC {:.4} (>= 0.95) after {} epochs in {:.1}s",
            run.slide_auroc,
            run.epochs,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_06_multitask_benefit() {
    let _g = serial();
    let start = std::time::Instant::now();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in [61, 62, 63] {
        let a = needle_run(seed, Objective::Multitask { lambda: 5.0 });
        let b = needle_run(seed, Objective::Multitask { lambda: 0.0 });
        say(&format!(
            "    seed {seed}: lambda=5 slide {:.4} patch {:.4} ({} epochs) | lambda=0 slide {:.4} ({} epochs)",
            a.slide_auroc, a.patch_auroc, a.epochs, b.slide_auroc, b.epochs
        ));
        with.push(a);
        without.push(b);
    }
    let mean = |v: &[NeedleRun], f: fn(&NeedleRun) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let slide5 = mean(&with, |r| r.slide_auroc);
    let slide0 = mean(&without, |r| r.slide_auroc);
    let patch5 = mean(&with, |r| r.patch_auroc);
    let ok = patch5 >= 0.9 && slide5 >= slide0 - 0.02;
    report(
        6,
        "multitask benefit",
        ok,
        &format!(
            "mean over 3 seeds: patch AUROC {patch5:.4} (>= 0.9), slide AUROC {slide5:.4} vs lambda=0 {slide0:.4} (>= {:.4}) in {:.1}s",
            slide0 - 0.02,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

/// Peak bytes allocated above the pre-call baseline while `f` runs.
fn peak_additional<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst) - base)
}

#[test]
fn criterion_07_long_sequence() {
    let _g = serial();
    let start = std::time::Instant::now();
    let model = MilModel::init(
        ModelConfig {
            input_dim: 1024,
            state_dim: 32,
            ..ModelConfig::default()
        },
        7,
    )
    .unwrap();
    let mut finite = true;
    let mut peaks = Vec::new();
    for len in [62_235, 31_118] {
        let bag = random_bag(len, 1024, 7).unwrap();
        let (out, peak) = peak_additional(|| model.forward(&bag).unwrap());
        finite &= out.probs.iter().all(|p| p.is_finite());
        peaks.push(peak);
    }
    let ratio = peaks[0] as f64 / peaks[1] as f64;
    let ok = finite && (1.8..=2.3).contains(&ratio);
    report(
        7,
        "long-sequence robustness",
        ok,
        &format!(
            "finite={finite}, peak additional memory {:.1} MiB vs {:.1} MiB, ratio {ratio:.3} (in [1.8, 2.3]) in {:.1}s",
            peaks[0] as f64 / 1048576.0,
            peaks[1] as f64 / 1048576.0,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_bench_protocol() {
    let _g = serial();
    let cfg = BenchConfig {
        repeats: 3,
        ..BenchConfig::default()
    };
    let r = run_bench(&cfg).unwrap();
    let speedup = r.speedup();
    let ok = speedup >= 5.0;
    report(
        8,
        "bench protocol",
        ok,
        &format!(
            "L={} D={} over {} repeats: convolution {:.0} ms, recurrence {:.0} ms, speedup {speedup:.2}x (>= 5x); \
             SSM layer alone {:.0} ms vs {:.0} ms ({:.2}x); outputs differ by {:.1e}",
            r.length,
            r.dim,
            r.repeats,
            r.convolution.mean_ms,
            r.recurrence.mean_ms,
            r.ssm_convolution.mean_ms,
            r.ssm_recurrence.mean_ms,
            r.ssm_speedup(),
            r.max_abs_disagreement
        ),
    );
    assert!(ok, "convolution forward is only {speedup:.2}x faster than recurrence");
}

/// Pairs (positive, negative) with the positive scored higher, ties worth half.
fn brute_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &p) in positive.iter().enumerate() {
        for (j, &q) in positive.iter().enumerate() {
            if p && !q {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn criterion_09_metric_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Scores on a coarse grid so ties are common.
    let scores: Vec<f64> = (0..200).map(|_| f64::from(rng.gen_range(0..20u8)) / 20.0).collect();
    let positive: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.4)).collect();
    let fast = auroc_binary(&scores, &positive).unwrap();
    let brute = brute_auroc(&scores, &positive);

    let preds: Vec<ScoredPrediction> = (0..200)
        .map(|_| {
            let raw: Vec<f64> = (0..3).map(|_| f64::from(rng.gen_range(1..10u8))).collect();
            let total: f64 = raw.iter().sum();
            ScoredPrediction::new(raw.iter().map(|v| v / total).collect(), rng.gen_range(0..3)).unwrap()
        })
        .collect();
    let ovr = auroc_ovr(&preds, 3).unwrap();
    let per_class: Vec<f64> = (0..3)
        .map(|c| {
            let s: Vec<f64> = preds.iter().map(|p| p.scores[c]).collect();
            let y: Vec<bool> = preds.iter().map(|p| p.true_label == c).collect();
            brute_auroc(&s, &y)
        })
        .collect();
    let ovr_brute = per_class.iter().sum::<f64>() / 3.0;
    let ok = fast == brute && (ovr - ovr_brute).abs() <= 1e-15;
    report(9, "metric oracle", ok, &format!("binary {fast} vs brute {brute}; one-vs-rest {ovr} vs {ovr_brute}"));
    assert!(ok);
}

#[test]
fn criterion_10_loss_identities() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut equal = 0;
    for _ in 0..50 {
        let m = rng.gen_range(1..8);
        let mut slide = Vec::new();
        let mut labels = Vec::new();
        let mut patch_probs = Vec::new();
        let mut patch_labels = Vec::new();
        for _ in 0..m {
            let p: f64 = rng.gen_range(0.0..1.0);
            slide.push(vec![1.0 - p, p]);
            labels.push(rng.gen_range(0..2));
            let len = rng.gen_range(1..20);
            patch_probs.push(Array2::from_shape_fn((len, 2), |(t, c)| {
                let q = (t as f64 + 1.0) / (len as f64 + 2.0);
                if c == 1 {
                    q
                } else {
                    1.0 - q
                }
            }));
            patch_labels.push((0..len).map(|_| rng.gen_range(0..2)).collect::<Vec<usize>>());
        }
        let a = multitask_loss(&slide, &labels, &patch_probs, &patch_labels, 0.0).unwrap().value;
        let b = mil_loss(&slide, &labels).unwrap().value;
        equal += usize::from(a.to_bits() == b.to_bits());
    }
    let perfect = mil_loss(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], &[0, 1, 1]).unwrap().value;
    let ok = equal == 50 && perfect == 0.0;
    report(10, "loss identities", ok, &format!("{equal}/50 batches bit-equal at lambda=0; perfect predictions give {perfect}"));
    assert!(ok);
}
