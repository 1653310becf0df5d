use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use midnet::datagen::{class_indices, load_entries, make_dataset, read_manifest, DatasetSpec, ManifestEntry, MANIFEST_NAME};
use midnet::downstream::{evaluate, nopre_seed, train_head, EvalReport, HeadConfig, LabeledShape, Scheme, Task, AGGREGATE_CATEGORY};
use midnet::geometry::PointCloud;
use midnet::gradcheck::{full_suite, GradCheckOptions};
use midnet::io::write_atomic;
use midnet::network::{Backbone, NetConfig};
use midnet::registration::{curve_csv, default_thresholds, results_csv, run_benchmark, success_curve, success_rate, BenchmarkConfig, InitMethod};
use midnet::trainer::{prepare_shape, Checkpoint, MetricLog, Pretrainer, TrainConfig};

use crate::config::{self, invalid, render};
use crate::Global;

/// Converts a library error into the crate-wide error so exit codes can
/// tell validation failures from runtime ones.
pub trait CoreResult<T> {
    fn core(self) -> anyhow::Result<T>;
}

impl<T, E: Into<midnet::Error>> CoreResult<T> for Result<T, E> {
    fn core(self) -> anyhow::Result<T> {
        self.map_err(|e| anyhow::Error::new(e.into()))
    }
}

/// What a finished command reports back for its run manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub results: serde_json::Value,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Dataset spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Network config (TOML); defaults when omitted.
    #[arg(long)]
    pub net: Option<PathBuf>,
    /// Training config (TOML); defaults when omitted.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint` if present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Fix,
    Finetune,
    Nopre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Cls,
    Seg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Feature,
    Identity,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    /// Pretraining checkpoint directory; not needed for `nopre`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Labeled dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out manifest. Without it, even rows of `--data` train and odd rows test.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Head config (TOML).
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Network config for `nopre` without a checkpoint.
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    /// Pretraining checkpoint directory; needed for feature initialization.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Benchmark config (TOML).
    #[arg(long)]
    pub bench: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 40)]
    pub max_coords: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Report CSVs written by `probe`.
    #[arg(long, required = true, num_args = 1..)]
    pub report: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn write_text(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    write_atomic(&path, text.as_bytes()).core()?;
    outputs.push(path);
    Ok(())
}

fn entry_paths(manifest: &Path, entries: &[ManifestEntry]) -> Vec<PathBuf> {
    std::iter::once(manifest.to_path_buf())
        .chain(entries.iter().map(|e| e.path.clone()))
        .collect()
}

fn checkpoint_files(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join("manifest.toml"), dir.join("tensors.bin")]
}

pub fn gen(a: &GenArgs, g: &Global) -> anyhow::Result<Option<Outcome>> {
    let spec: DatasetSpec = config::load(Some(&a.spec), "spec")?;
    if g.print_config {
        print!("{}", render("spec", &spec, None, &[])?);
        return Ok(None);
    }
    let entries = make_dataset(&spec, &a.out).core()?;
    let mut outputs = vec![a.out.join(MANIFEST_NAME)];
    outputs.extend(entries.iter().map(|e| a.out.join(&e.path)));
    let (classes, _) = class_indices(&entries);
    println!("wrote {} shapes in {} classes to {}", entries.len(), classes.len(), a.out.display());
    Ok(Some(Outcome {
        config: serde_json::to_value(&spec)?,
        seeds: BTreeMap::from([("spec".into(), spec.seed)]),
        inputs: vec![a.spec.clone()],
        outputs,
        results: json!({ "shapes": entries.len(), "classes": classes }),
    }))
}

pub fn pretrain(a: &PretrainArgs, g: &Global) -> anyhow::Result<Option<Outcome>> {
    let net: NetConfig = config::load(a.net.as_deref(), "net")?;
    let train: TrainConfig = config::load(a.train.as_deref(), "train")?;
    if g.print_config {
        print!("{}", render("net", &net, Some(&NetConfig::default()), config::NET_PUBLISHED_KEYS)?);
        print!("{}", render("train", &train, Some(&TrainConfig::default()), config::TRAIN_PUBLISHED_KEYS)?);
        return Ok(None);
    }
    net.validate().core()?;
    let entries = read_manifest(&a.data).core()?;
    train.validate(entries.len()).core()?;
    let clouds = load_entries(&entries).core()?;
    let shapes: Vec<PointCloud> = clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| prepare_shape(c, train.patches, train.seed, i))
        .collect::<Result<_, _>>()
        .core()?;

    let ckpt_dir = a.out.join("checkpoint");
    let metrics = a.out.join("metrics.csv");
    let resuming = a.resume && ckpt_dir.join("manifest.toml").exists();
    let (mut t, mut log) = if resuming {
        let ckpt = Checkpoint::load(&ckpt_dir).core()?;
        ckpt.require_net_config(&net).core()?;
        if ckpt.manifest.train_config_hash != train.hash() {
            return Err(invalid(format!("training config differs from the one in {}", ckpt_dir.display())));
        }
        (Pretrainer::from_checkpoint(&ckpt, shapes).core()?, MetricLog::append(&metrics).core()?)
    } else {
        std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        (Pretrainer::new(&net, &train, shapes).core()?, MetricLog::create(&metrics).core()?)
    };
    let start_step = t.step;
    eprintln!(
        "pretraining {} shapes, steps {}..{} ({} per epoch)",
        t.shapes().len(),
        start_step,
        t.total_steps(),
        t.steps_per_epoch()
    );
    let steps = t.run(&mut log, Some(&ckpt_dir)).core()?;
    let (shape_acc, patch_acc) = t.evaluate_banks(0).core()?;
    let first = steps.first().map(|m| m.loss);
    let last = steps.last().map(|m| m.loss);
    println!(
        "step {} loss {} eval shape_acc {shape_acc:.4} patch_acc {patch_acc:.4}",
        t.step,
        last.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into())
    );

    let mut inputs = entry_paths(&a.data, &entries);
    inputs.extend(a.net.iter().chain(&a.train).cloned());
    let mut outputs = vec![metrics];
    outputs.extend(checkpoint_files(&ckpt_dir));
    Ok(Some(Outcome {
        config: json!({ "net": net, "train": train }),
        seeds: BTreeMap::from([("train".into(), train.seed), ("augment".into(), train.augment.seed)]),
        inputs,
        outputs,
        results: json!({
            "resumed_from": resuming.then_some(start_step),
            "steps": t.step,
            "first_loss": first,
            "final_loss": last,
            "eval_shape_acc": shape_acc,
            "eval_patch_acc": patch_acc,
        }),
    }))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).core()
}

/// Splits rows alternately: even rows train, odd rows test.
fn alternate<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    let train = items.iter().step_by(2).cloned().collect();
    let test = items.iter().skip(1).step_by(2).cloned().collect();
    (train, test)
}

pub fn probe(a: &ProbeArgs, g: &Global) -> anyhow::Result<Option<Outcome>> {
    let mut head: HeadConfig = config::load(a.head.as_deref(), "head")?;
    head.task = match a.task {
        TaskArg::Cls => Task::Classification,
        TaskArg::Seg => Task::Segmentation,
    };
    head.scheme = match a.scheme {
        SchemeArg::Fix => Scheme::Fix,
        SchemeArg::Finetune => Scheme::Finetune,
        SchemeArg::Nopre => Scheme::Nopre,
    };
    if head.scheme != Scheme::Nopre && a.ckpt.is_none() {
        return Err(invalid("--ckpt is required for the fix and finetune schemes"));
    }
    let ckpt = a.ckpt.as_deref().map(load_checkpoint).transpose()?;
    let net: NetConfig = match &ckpt {
        Some(c) => c.manifest.net.clone(),
        None => config::load(a.net.as_deref(), "net")?,
    };
    if g.print_config {
        print!("{}", render("head", &head, Some(&HeadConfig::default()), config::HEAD_PUBLISHED_KEYS)?);
        print!("{}", render("net", &net, Some(&NetConfig::default()), config::NET_PUBLISHED_KEYS)?);
        return Ok(None);
    }

    let data = read_manifest(&a.data).core()?;
    let (train_entries, test_entries) = match &a.test {
        Some(p) => (data.clone(), read_manifest(p).core()?),
        None => alternate(&data),
    };
    if train_entries.is_empty() || test_entries.is_empty() {
        return Err(invalid(format!("{} has too few rows for a train/test split", a.data.display())));
    }
    let all: Vec<ManifestEntry> = train_entries.iter().chain(&test_entries).cloned().collect();
    let (names, labels) = class_indices(&all);
    let clouds = load_entries(&all).core()?;
    let shapes: Vec<LabeledShape> = clouds
        .par_iter()
        .zip(&labels)
        .map(|(c, &l)| LabeledShape::prepare(c, l))
        .collect::<Result<_, _>>()
        .core()?;
    head.classes = match head.task {
        Task::Classification => names.len(),
        Task::Segmentation => {
            let mut max = 0;
            for (i, s) in shapes.iter().enumerate() {
                let parts = s
                    .cloud
                    .part_labels
                    .as_ref()
                    .ok_or(midnet::downstream::DownstreamError::MissingPartLabels(i))
                    .core()?;
                max = max.max(parts.iter().copied().max().unwrap_or(0) as usize);
            }
            max + 1
        }
    };
    let (train, test) = shapes.split_at(train_entries.len());

    let backbone = match (&ckpt, head.scheme) {
        (_, Scheme::Nopre) => Backbone::<f32>::new(&net, nopre_seed(head.seed)).core()?,
        (Some(c), _) => c.backbone().core()?,
        (None, _) => unreachable!("checked above"),
    };
    let mut model = train_head(backbone, train, &head).core()?;
    let report = evaluate(&mut model, test, &names).core()?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut outputs = Vec::new();
    let report_path = a.out.join("report.csv");
    report.write(&report_path).core()?;
    outputs.push(report_path.clone());
    outputs.push(report_path.with_extension("json"));
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in model.losses.iter().enumerate() {
        losses.push_str(&format!("{e},{l}\n"));
    }
    write_text(a.out.join("losses.csv"), &losses, &mut outputs)?;

    let summary = report.summary();
    for (k, v) in &summary {
        println!("{k} {v:.4}");
    }
    let mut inputs = entry_paths(&a.data, &data);
    if let Some(p) = &a.test {
        inputs.extend(entry_paths(p, &test_entries));
    }
    if let Some(c) = &a.ckpt {
        inputs.extend(checkpoint_files(c));
    }
    inputs.extend(a.head.iter().chain(&a.net).cloned());
    Ok(Some(Outcome {
        config: json!({ "head": head, "net": net }),
        seeds: BTreeMap::from([("head".into(), head.seed)]),
        inputs,
        outputs,
        results: json!({ "train": train.len(), "test": test.len(), "summary": summary }),
    }))
}

pub fn register(a: &RegisterArgs, g: &Global) -> anyhow::Result<Option<Outcome>> {
    let mut bench: BenchmarkConfig = config::load(a.bench.as_deref(), "bench")?;
    if let Some(n) = a.trials {
        bench.trials = n;
    }
    if let Some(i) = a.init {
        bench.init = match i {
            InitArg::Feature => InitMethod::Feature,
            InitArg::Identity => InitMethod::Identity,
        };
    }
    if g.print_config {
        print!("{}", render("bench", &bench, Some(&BenchmarkConfig::default()), config::BENCH_PUBLISHED_KEYS)?);
        return Ok(None);
    }
    if bench.trials == 0 {
        return Err(invalid("trials must be positive"));
    }
    let backbone = match (&a.ckpt, bench.init) {
        (Some(p), InitMethod::Feature) => Some(load_checkpoint(p)?.backbone().core()?),
        (None, InitMethod::Feature) => return Err(invalid("--ckpt is required for feature initialization")),
        (_, InitMethod::Identity) => None,
    };
    let entries = read_manifest(&a.data).core()?;
    let shapes = load_entries(&entries).core()?;
    let results = run_benchmark(&shapes, backbone.as_ref(), &bench).core()?;
    let rate = success_rate(&results);
    println!("{} trials, init {}, success rate {rate:.4}", results.len(), bench.init.name());

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut outputs = Vec::new();
    write_text(a.out.join("trials.csv"), &results_csv(&results), &mut outputs)?;
    let curve = success_curve(&results, &default_thresholds());
    write_text(a.out.join("curve.csv"), &curve_csv(&curve), &mut outputs)?;
    let mut inputs = entry_paths(&a.data, &entries);
    if let (Some(c), InitMethod::Feature) = (&a.ckpt, bench.init) {
        inputs.extend(checkpoint_files(c));
    }
    inputs.extend(a.bench.iter().cloned());
    Ok(Some(Outcome {
        config: json!({ "bench": bench }),
        seeds: BTreeMap::from([("bench".into(), bench.seed), ("ransac".into(), bench.register.ransac.seed)]),
        inputs,
        outputs,
        results: json!({ "trials": results.len(), "success_rate": rate }),
    }))
}

pub fn gradcheck(a: &GradcheckArgs, g: &Global) -> anyhow::Result<Option<Outcome>> {
    let opts = GradCheckOptions {
        tolerance: a.tolerance,
        max_coords: a.max_coords,
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    if g.print_config {
        println!("gradcheck.step = {:e}  # desk-scale default", opts.step);
        println!("gradcheck.tolerance = {:e}", opts.tolerance);
        println!("gradcheck.abs_floor = {:e}  # desk-scale default", opts.abs_floor);
        println!("gradcheck.max_coords = {}", opts.max_coords);
        println!("gradcheck.seed = {}", opts.seed);
        return Ok(None);
    }
    let results = full_suite(&opts).core()?;
    let mut csv = String::from("name,max_rel_error,checked,skipped,seconds,passed\n");
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<26} max_rel {:.3e} checked {:>4} skipped {:>3} {:.2}s",
            r.name, r.max_rel_error, r.checked, r.skipped, r.seconds
        );
        csv.push_str(&format!(
            "{},{:e},{},{},{},{}\n",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            r.seconds,
            r.passed()
        ));
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    let mut outputs = Vec::new();
    write_text(a.out.join("gradcheck.csv"), &csv, &mut outputs)?;
    if !failed.is_empty() {
        anyhow::bail!("gradient checks failed: {}", failed.join(", "));
    }
    Ok(Some(Outcome {
        config: json!({ "step": opts.step, "tolerance": opts.tolerance, "abs_floor": opts.abs_floor, "max_coords": opts.max_coords }),
        seeds: BTreeMap::from([("gradcheck".into(), opts.seed)]),
        inputs: vec![],
        outputs,
        results: json!({ "checks": results.len(), "passed": results.len() }),
    }))
}

pub fn eval(a: &EvalArgs, g: &Global) -> anyhow::Result<Option<Outcome>> {
    if g.print_config {
        println!("# eval has no configuration");
        return Ok(None);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["report", "category", "metric", "value", "count"])?;
    let mut totals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for path in &a.report {
        let report = EvalReport::read(path).core()?;
        for row in report.aggregates() {
            println!("{} {} {} {:.4} (n = {})", path.display(), row.category, row.metric, row.value, row.count);
            totals.entry(row.metric.clone()).or_default().push(row.value);
            w.write_record([
                path.display().to_string(),
                row.category,
                row.metric,
                row.value.to_string(),
                row.count.to_string(),
            ])?;
        }
    }
    let means: BTreeMap<String, f64> = totals
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    for (k, v) in &means {
        let n = totals[k].len();
        if n > 1 {
            println!("mean {AGGREGATE_CATEGORY} {k} {v:.4} ({n} reports)");
        }
    }
    let mut outputs = Vec::new();
    let text = String::from_utf8(w.into_inner()?)?;
    write_text(a.out.join("aggregate.csv"), &text, &mut outputs)?;
    Ok(Some(Outcome {
        config: serde_json::Value::Null,
        seeds: BTreeMap::new(),
        inputs: a.report.clone(),
        outputs,
        results: json!({ "mean": means }),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternate_split_interleaves() {
        let (a, b) = alternate(&[0, 1, 2, 3, 4]);
        assert_eq!(a, vec![0, 2, 4]);
        assert_eq!(b, vec![1, 3]);
    }
}
