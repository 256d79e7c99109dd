use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use s4mil::autograd::check::{check_gradients, GradCheckConfig};
use s4mil::autograd::NodeId;
use s4mil::bench::{random_bag, run_bench, BenchConfig};
use s4mil::data::{corpus_stats, load_manifest, percentile_threshold, write_dataset, Bag};
use s4mil::model::{
    count_parameters, read_checkpoint, write_checkpoint, MilModel, ModelConfig, Objective, Trainable,
};
use s4mil::ssm::Discretization;
use s4mil::train::{evaluate, fit, generate_synthetic, kfold, write_history, SyntheticTask};
use s4mil::verify::{duality_sweep, DualityConfig};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::heatmap::Heatmap;

#[derive(Debug, Parser)]
#[command(name = "s4mil", version, about = "Diagonal state space MIL aggregator for long feature sequences")]
pub struct Cli {
    /// TOML file with [model], [train], [synthetic], ... sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR", default_value = "s4mil-out")]
    pub output: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override one configuration value, e.g. `--set model.hidden_dim=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// k-fold training with per-fold checkpoints, histories and a summary.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Compare recurrent and convolutional SSM outputs on random channels.
    KernelCheck(KernelCheckArgs),
    /// Finite-difference check of every model gradient.
    GradCheck,
    /// Parameter count of the configured model.
    ParamCount,
    /// Forward-pass timing of convolution and recurrence modes.
    Bench(BenchArgs),
    /// Write a synthetic dataset with its manifest.
    Synth(SynthArgs),
    /// Grid of positive-class patch probabilities for one bag.
    ExportHeatmap(HeatmapArgs),
    /// Corpus statistics and the long-sequence threshold.
    Stats(DataArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Generate the synthetic task instead of loading a manifest.
    #[arg(long, value_name = "TASK")]
    pub synthetic: Option<SyntheticTask>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Add the patch-level loss term.
    #[arg(long)]
    pub multitask: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct KernelCheckArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub max_state: Option<usize>,
    #[arg(long)]
    pub max_length: Option<usize>,
    /// Negate every kernel so the check must fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "TASK")]
    pub synthetic: Option<SyntheticTask>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bag_id: String,
    #[command(flatten)]
    pub data: DataArgs,
}

/// Resolves the configuration, writes it to the output directory and runs
/// the command.
pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    apply_flags(&cli.command, &mut cfg)?;
    cfg.finish()?;

    let out = &cli.output;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    match &cli.command {
        Command::Train(_) => cmd_train(cfg, out),
        Command::Evaluate(a) => cmd_evaluate(&cfg, out, &a.checkpoint),
        Command::KernelCheck(a) => cmd_kernel_check(&cfg, out, a.inject_fault),
        Command::GradCheck => cmd_grad_check(&cfg, out),
        Command::ParamCount => cmd_param_count(&cfg, out),
        Command::Bench(_) => cmd_bench(&cfg, out),
        Command::Synth(_) => cmd_synth(&cfg, out),
        Command::ExportHeatmap(a) => cmd_export_heatmap(&cfg, out, &a.checkpoint, &a.bag_id),
        Command::Stats(_) => cmd_stats(&cfg, out),
    }
}

fn apply_data_flags(data: &DataArgs, cfg: &mut RunConfig) -> CliResult<()> {
    if let Some(path) = &data.manifest {
        let abs = fs::canonicalize(path).map_err(|e| CliError::io(path, e))?;
        cfg.data.manifest = abs.to_string_lossy().into_owned();
    }
    if let Some(task) = data.synthetic {
        cfg.synthetic.task = task;
        cfg.data.manifest.clear();
    }
    Ok(())
}

fn apply_flags(command: &Command, cfg: &mut RunConfig) -> CliResult<()> {
    match command {
        Command::Train(a) => {
            apply_data_flags(&a.data, cfg)?;
            if let Some(k) = a.folds {
                cfg.folds = k;
            }
            if a.multitask {
                cfg.model.multitask = true;
            }
            if let Some(l) = a.lambda {
                cfg.train.lambda = l;
            }
        }
        Command::Evaluate(a) => apply_data_flags(&a.data, cfg)?,
        Command::ExportHeatmap(a) => apply_data_flags(&a.data, cfg)?,
        Command::Stats(a) => apply_data_flags(a, cfg)?,
        Command::Synth(a) => {
            if let Some(task) = a.synthetic {
                cfg.synthetic.task = task;
            }
        }
        Command::KernelCheck(a) => {
            let k = &mut cfg.kernel_check;
            k.trials = a.trials.unwrap_or(k.trials);
            k.tolerance = a.tolerance.unwrap_or(k.tolerance);
            k.max_state = a.max_state.unwrap_or(k.max_state);
            k.max_length = a.max_length.unwrap_or(k.max_length);
        }
        Command::Bench(a) => {
            let b = &mut cfg.bench;
            b.length = a.length.unwrap_or(b.length);
            b.dim = a.dim.unwrap_or(b.dim);
            b.repeats = a.repeats.unwrap_or(b.repeats);
        }
        Command::GradCheck | Command::ParamCount => {}
    }
    Ok(())
}

fn load_bags(cfg: &RunConfig) -> CliResult<Vec<Bag>> {
    Ok(match cfg.manifest() {
        Some(path) => load_manifest(path)?,
        None => generate_synthetic(&cfg.synthetic, cfg.seed)?,
    })
}

/// Writes `rows` as CSV and checks that reading the file back yields them.
fn write_rows<T>(path: &Path, rows: &[T]) -> CliResult<()>
where
    T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug,
{
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    let back: Vec<T> = csv::Reader::from_path(path)?.deserialize().collect::<Result<_, _>>()?;
    if back != rows {
        return Err(CliError::CheckFailed(format!("{} did not read back identically", path.display())));
    }
    Ok(())
}

/// `NaN` for undefined metrics, so rows stay rectangular.
fn or_nan(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Float wrapper whose equality treats `NaN` as equal to itself, for
/// read-back checks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Num(pub f64);

impl PartialEq for Num {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits() || self.0 == other.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub fold: String,
    pub epochs: Num,
    pub best_epoch: Num,
    pub test_bags: Num,
    pub test_loss: Num,
    pub test_accuracy: Num,
    pub test_auroc: Num,
    pub long_bags: Num,
    pub long_accuracy: Num,
    pub long_auroc: Num,
}

struct SubsetMetrics {
    bags: usize,
    accuracy: f64,
    auroc: f64,
}

fn subset_metrics(model: &MilModel, bags: &[&Bag]) -> CliResult<SubsetMetrics> {
    if bags.is_empty() {
        return Ok(SubsetMetrics {
            bags: 0,
            accuracy: f64::NAN,
            auroc: f64::NAN,
        });
    }
    let eval = evaluate(model, bags)?;
    Ok(SubsetMetrics {
        bags: bags.len(),
        accuracy: eval.accuracy,
        auroc: or_nan(eval.auroc),
    })
}

fn mean_of(values: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut sum, mut weight) = (0.0, 0.0);
    for (v, w) in values.filter(|(v, w)| v.is_finite() && *w > 0.0) {
        sum += v * w;
        weight += w;
    }
    if weight > 0.0 {
        sum / weight
    } else {
        f64::NAN
    }
}

fn summarize(name: &str, rows: &[SummaryRow], weighted: bool) -> SummaryRow {
    let col = |f: fn(&SummaryRow) -> f64, w: fn(&SummaryRow) -> f64| {
        Num(mean_of(rows.iter().map(|r| (f(r), if weighted { w(r) } else { 1.0 }))))
    };
    let one = |_: &SummaryRow| 1.0;
    let test_w = |r: &SummaryRow| r.test_bags.0;
    let long_w = |r: &SummaryRow| r.long_bags.0;
    SummaryRow {
        fold: name.to_string(),
        epochs: col(|r| r.epochs.0, one),
        best_epoch: col(|r| r.best_epoch.0, one),
        test_bags: col(|r| r.test_bags.0, one),
        test_loss: col(|r| r.test_loss.0, test_w),
        test_accuracy: col(|r| r.test_accuracy.0, test_w),
        test_auroc: col(|r| r.test_auroc.0, test_w),
        long_bags: col(|r| r.long_bags.0, one),
        long_accuracy: col(|r| r.long_accuracy.0, long_w),
        long_auroc: col(|r| r.long_auroc.0, long_w),
    }
}

fn cmd_train(mut cfg: RunConfig, out: &Path) -> CliResult<()> {
    let bags = load_bags(&cfg)?;
    let k = cfg.folds;
    if k < 3 {
        return Err(CliError::Config(format!("folds = {k}: training needs at least 3 folds (test, validation, train)")));
    }
    if k > bags.len() {
        return Err(CliError::Config(format!("folds = {k} exceed the {} available bags", bags.len())));
    }
    let dim = bags[0].dim();
    if cfg.model.input_dim != dim {
        log::info!("model.input_dim set to {dim} to match the data");
        cfg.model.input_dim = dim;
    }
    let max_label = bags.iter().map(|b| b.slide_label).max().unwrap_or(0);
    if max_label >= cfg.model.num_classes {
        return Err(CliError::Config(format!(
            "label {max_label} needs model.num_classes > {max_label}, found {}",
            cfg.model.num_classes
        )));
    }
    let objective = if cfg.model.multitask {
        Objective::Multitask { lambda: cfg.train.lambda }
    } else {
        Objective::Slide
    };
    cfg.write_resolved(out)?;

    let labels: Vec<usize> = bags.iter().map(|b| b.slide_label).collect();
    let splits = kfold(&labels, k, cfg.seed)?;
    let lengths: Vec<usize> = bags.iter().map(Bag::len).collect();
    let threshold = percentile_threshold(&lengths, cfg.data.long_percentile)?;

    let mut rows = Vec::with_capacity(k);
    for fold in 0..k {
        let row = train_fold(&cfg, &bags, &splits, fold, threshold, objective, out)
            .map_err(|e| CliError::Fold { fold, source: Box::new(e) })?;
        println!(
            "fold {fold:02}: test accuracy {:.4} auroc {:.4} ({} epochs)",
            row.test_accuracy.0, row.test_auroc.0, row.epochs.0
        );
        rows.push(row);
    }
    let mean = summarize("mean", &rows, false);
    let weighted = summarize("weighted", &rows, true);
    println!(
        "mean over {k} folds: accuracy {:.4} auroc {:.4}; long sequences (L >= {threshold}) accuracy {:.4} weighted {:.4}",
        mean.test_accuracy.0, mean.test_auroc.0, mean.long_accuracy.0, weighted.long_accuracy.0
    );
    rows.push(mean);
    rows.push(weighted);
    write_rows(&out.join("summary.csv"), &rows)
}

fn train_fold(
    cfg: &RunConfig,
    bags: &[Bag],
    splits: &[s4mil::train::Split],
    fold: usize,
    threshold: usize,
    objective: Objective,
    out: &Path,
) -> CliResult<SummaryRow> {
    let k = splits.len();
    let pick = |idx: &[usize]| -> Vec<&Bag> { idx.iter().map(|&i| &bags[i]).collect() };
    let test = pick(&splits[fold].validation);
    let val_idx = &splits[(fold + 1) % k].validation;
    let val = pick(val_idx);
    let train_idx: Vec<usize> = splits[fold].train.iter().copied().filter(|i| !val_idx.contains(i)).collect();
    let train = pick(&train_idx);

    let fold_seed = cfg.seed.wrapping_add(fold as u64);
    let mut model = MilModel::init(cfg.model, fold_seed)?;
    let train_cfg = s4mil::train::TrainConfig {
        seed: fold_seed,
        ..cfg.train
    };
    let report = fit(&mut model, &train, &val, &train_cfg, objective)?;
    // Score exactly what the checkpoint holds.
    model.round_to_f32();

    let dir = out.join(format!("fold_{fold:02}"));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_checkpoint(dir.join("checkpoint.s4mc"), &model)?;
    write_history(dir.join("history.csv"), &report.history)?;

    let eval = evaluate(&model, &test)?;
    let long: Vec<&Bag> = test.iter().copied().filter(|b| b.len() >= threshold).collect();
    let long = subset_metrics(&model, &long)?;
    Ok(SummaryRow {
        fold: format!("{fold:02}"),
        epochs: Num(report.history.len() as f64),
        best_epoch: Num(report.best_epoch as f64),
        test_bags: Num(test.len() as f64),
        test_loss: Num(eval.loss.value),
        test_accuracy: Num(eval.accuracy),
        test_auroc: Num(or_nan(eval.auroc)),
        long_bags: Num(long.bags as f64),
        long_accuracy: Num(long.accuracy),
        long_auroc: Num(long.auroc),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: Num,
}

fn metric(name: &str, value: f64) -> MetricRow {
    MetricRow {
        metric: name.to_string(),
        value: Num(value),
    }
}

fn check_dims(model: &MilModel, bags: &[Bag]) -> CliResult<()> {
    let want = model.config().input_dim;
    match bags.iter().find(|b| b.dim() != want) {
        Some(b) => Err(CliError::Core(s4mil::Error::DimensionMismatch {
            expected: want,
            got: b.dim(),
        })),
        None => Ok(()),
    }
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> CliResult<()> {
    cfg.write_resolved(out)?;
    let model = read_checkpoint(checkpoint)?;
    let bags = load_bags(cfg)?;
    check_dims(&model, &bags)?;
    let refs: Vec<&Bag> = bags.iter().collect();
    let eval = evaluate(&model, &refs)?;

    let path = out.join("predictions.csv");
    let classes = model.config().num_classes;
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["id".to_string(), "label".into(), "predicted".into(), "length".into()];
    header.extend((0..classes).map(|c| format!("prob_{c}")));
    w.write_record(&header)?;
    for (b, p) in bags.iter().zip(&eval.predictions) {
        let mut rec = vec![b.id.clone(), b.slide_label.to_string(), p.argmax().to_string(), b.len().to_string()];
        rec.extend(p.scores.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let reread = csv::Reader::from_path(&path)?.records().count();
    if reread != bags.len() {
        return Err(CliError::CheckFailed(format!("{} holds {reread} rows", path.display())));
    }

    let lengths: Vec<usize> = bags.iter().map(Bag::len).collect();
    let threshold = percentile_threshold(&lengths, cfg.data.long_percentile)?;
    let long: Vec<&Bag> = refs.iter().copied().filter(|b| b.len() >= threshold).collect();
    let long = subset_metrics(&model, &long)?;
    let rows = vec![
        metric("bags", bags.len() as f64),
        metric("loss", eval.loss.value),
        metric("accuracy", eval.accuracy),
        metric("auroc", or_nan(eval.auroc)),
        metric("long_threshold", threshold as f64),
        metric("long_bags", long.bags as f64),
        metric("long_accuracy", long.accuracy),
        metric("long_auroc", long.auroc),
    ];
    write_rows(&out.join("metrics.csv"), &rows)?;
    println!(
        "{} bags: accuracy {:.4} auroc {:.4} loss {:.5}",
        bags.len(),
        eval.accuracy,
        or_nan(eval.auroc),
        eval.loss.value
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCheckRow {
    pub trial: usize,
    pub rule: String,
    pub n_half: usize,
    pub length: usize,
    pub relative_error: Num,
}

fn cmd_kernel_check(cfg: &RunConfig, out: &Path, inject_fault: bool) -> CliResult<()> {
    cfg.write_resolved(out)?;
    let k = &cfg.kernel_check;
    let report = duality_sweep(&DualityConfig {
        trials: k.trials,
        max_n_half: (k.max_state / 2).max(1),
        max_length: k.max_length,
        tolerance: k.tolerance,
        seed: cfg.seed,
        inject_fault,
    })?;
    let rows: Vec<KernelCheckRow> = report
        .trials
        .iter()
        .map(|t| KernelCheckRow {
            trial: t.trial,
            rule: t.rule.clone(),
            n_half: t.n_half,
            length: t.length,
            relative_error: Num(t.relative_error),
        })
        .collect();
    write_rows(&out.join("kernel_check.csv"), &rows)?;
    if k.trials == 0 {
        println!("kernel-check: PASS (vacuous, 0 trials)");
        return Ok(());
    }
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    println!(
        "kernel-check: {verdict}, {} trials x 2 rules, worst relative error {:.3e} (tolerance {:e})",
        k.trials, report.worst_relative_error, k.tolerance
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "worst relative error {:e} exceeds tolerance {:e}",
            report.worst_relative_error, k.tolerance
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub rule: String,
    pub name: String,
    pub index: usize,
    pub analytic: Num,
    pub numeric: Num,
    pub relative_error: Num,
    pub passed: bool,
}

fn cmd_grad_check(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.write_resolved(out)?;
    let g = &cfg.grad_check;
    let check = GradCheckConfig {
        step: g.step,
        rel_tol: g.tolerance,
        ..GradCheckConfig::default()
    };
    let bag = random_bag(g.length, g.input_dim, cfg.seed)?;
    let patches = (0..g.length).map(|t| t % 2).collect();
    let bag = bag.with_patch_labels(patches)?;
    let mut rows = Vec::new();
    for rule in [Discretization::Bilinear, Discretization::Zoh] {
        let model = MilModel::init(
            ModelConfig {
                input_dim: g.input_dim,
                hidden_dim: g.hidden_dim,
                state_dim: g.state_dim,
                multitask: true,
                discretization: rule,
                ..ModelConfig::default()
            },
            cfg.seed,
        )?;
        let mut rec = model.record(&bag, Objective::Multitask { lambda: cfg.train.lambda })?;
        let leaves: Vec<(String, NodeId)> =
            model.params().iter().zip(&rec.params).map(|(p, &id)| (p.name.clone(), id)).collect();
        let report = check_gradients(&mut rec.tape, &leaves, &check)?;
        rows.extend(report.entries.iter().map(|e| GradCheckRow {
            rule: rule.to_string(),
            name: e.name.clone(),
            index: e.index,
            analytic: Num(e.analytic),
            numeric: Num(e.numeric),
            relative_error: Num(e.relative_error()),
            passed: e.passed,
        }));
    }
    write_rows(&out.join("grad_check.csv"), &rows)?;
    let failures = rows.iter().filter(|r| !r.passed).count();
    println!("grad-check: {} entries, {failures} failures", rows.len());
    match rows.iter().find(|r| !r.passed) {
        None => Ok(()),
        Some(r) => Err(CliError::CheckFailed(format!(
            "{failures} gradient entries disagree, first {}:{}[{}] analytic {:e} numeric {:e}",
            r.rule, r.name, r.index, r.analytic.0, r.numeric.0
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
}

fn cmd_param_count(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.write_resolved(out)?;
    let mut rows: Vec<ParamRow> = cfg
        .model
        .layout()
        .into_iter()
        .map(|(name, r, c)| ParamRow {
            name,
            rows: r,
            cols: c,
            count: r * c,
        })
        .collect();
    let total = count_parameters(&cfg.model);
    let walked: usize = rows.iter().map(|r| r.count).sum();
    if walked != total {
        return Err(CliError::CheckFailed(format!("layout sums to {walked}, closed form gives {total}")));
    }
    rows.push(ParamRow {
        name: "total".into(),
        rows: 1,
        cols: total,
        count: total,
    });
    write_rows(&out.join("param_count.csv"), &rows)?;
    println!("{total}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub mean_ms: Num,
    pub std_ms: Num,
    pub repeats: usize,
}

fn cmd_bench(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.write_resolved(out)?;
    let b = &cfg.bench;
    let r = run_bench(&BenchConfig {
        length: b.length,
        dim: b.dim,
        repeats: b.repeats,
        hidden_dim: cfg.model.hidden_dim,
        state_dim: cfg.model.state_dim,
        seed: cfg.seed,
    })?;
    let rows: Vec<BenchRow> = [
        ("convolution", &r.convolution),
        ("recurrence", &r.recurrence),
        ("ssm_convolution", &r.ssm_convolution),
        ("ssm_recurrence", &r.ssm_recurrence),
        ("mean_pool", &r.mean_pool),
        ("max_pool", &r.max_pool),
    ]
    .into_iter()
    .map(|(mode, t)| BenchRow {
        mode: mode.into(),
        mean_ms: Num(t.mean_ms),
        std_ms: Num(t.std_ms),
        repeats: r.repeats,
    })
    .collect();
    write_rows(&out.join("bench.csv"), &rows)?;
    for row in &rows {
        println!("{:<16} {:>12.3} ms +/- {:.3}", row.mode, row.mean_ms.0, row.std_ms.0);
    }
    println!(
        "convolution is {:.2}x faster than recurrence (SSM layer alone {:.2}x); outputs differ by {:.1e}",
        r.speedup(),
        r.ssm_speedup(),
        r.max_abs_disagreement
    );
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.write_resolved(out)?;
    let bags = generate_synthetic(&cfg.synthetic, cfg.seed)?;
    let manifest = write_dataset(out.join("data"), &bags)?;
    if load_manifest(&manifest)? != bags {
        return Err(CliError::CheckFailed(format!("{} did not read back identically", manifest.display())));
    }
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub count: usize,
    pub mean_len: Num,
    pub min_len: usize,
    pub max_len: usize,
    pub long_percentile: Num,
    pub long_threshold: usize,
    pub long_bags: usize,
}

fn cmd_stats(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.write_resolved(out)?;
    let bags = load_bags(cfg)?;
    let stats = corpus_stats(&bags)?;
    let lengths: Vec<usize> = bags.iter().map(Bag::len).collect();
    let threshold = percentile_threshold(&lengths, cfg.data.long_percentile)?;
    let row = StatsRow {
        count: stats.count,
        mean_len: Num(stats.mean_len),
        min_len: stats.min_len,
        max_len: stats.max_len,
        long_percentile: Num(cfg.data.long_percentile),
        long_threshold: threshold,
        long_bags: lengths.iter().filter(|&&l| l >= threshold).count(),
    };
    write_rows(&out.join("stats.csv"), std::slice::from_ref(&row))?;
    println!("{stats}; {} bags with L >= {threshold}", row.long_bags);
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn cmd_export_heatmap(cfg: &RunConfig, out: &Path, checkpoint: &Path, bag_id: &str) -> CliResult<()> {
    cfg.write_resolved(out)?;
    let model = read_checkpoint(checkpoint)?;
    if !model.config().multitask {
        return Err(CliError::Heatmap(format!("{} has no patch head", checkpoint.display())));
    }
    let bags = load_bags(cfg)?;
    let bag = bags
        .iter()
        .find(|b| b.id == bag_id)
        .ok_or_else(|| CliError::Heatmap(format!("no bag with id `{bag_id}`")))?;
    let coords = bag
        .coords
        .as_ref()
        .ok_or_else(|| CliError::Heatmap(format!("bag `{bag_id}` has no coordinates")))?;
    check_dims(&model, std::slice::from_ref(bag))?;
    let probs = model.forward(bag)?.patch_probs.expect("multitask model has a patch head");
    if probs.ncols() < 2 {
        return Err(CliError::Heatmap("patch head needs a positive class (index 1)".into()));
    }
    let positive: Vec<f64> = probs.column(1).to_vec();
    let map = Heatmap::from_patches(bag_id, coords, &positive)?;
    let path = out.join(format!("heatmap_{}.txt", file_stem(bag_id)));
    let text = map.render();
    fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    if Heatmap::parse(&text)? != map {
        return Err(CliError::CheckFailed(format!("{} did not parse back identically", path.display())));
    }
    println!("{}", path.display());
    Ok(())
}
