//! `abfr` — synthetic cohorts, feature extraction, training, grids, ROC export
//! and rank statistics, each stage handing off through files.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use abfr_core::extract::{extract_cohort, read_features, write_features, Patching, Sampling, FEATURES_MANIFEST};
use abfr_core::grid::{run_experiment_grid, CellRecord, GridCell, GridOptions};
use abfr_core::metrics::{export_roc, roc_curve, METRIC_NAMES};
use abfr_core::model::{Backbone, Configuration};
use abfr_core::stats::{dunn_test, kruskal_wallis, DunnResult, KruskalWallis};
use abfr_core::synthetic::{generate_synthetic_cohort, read_cohort, write_cohort};
use abfr_core::train::{cross_cohort, cross_validate, CvOptions, CvReport, Dataset, Evaluation};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use manifest::{RunConfig, RunManifest, RUN_MANIFEST};

#[derive(Parser)]
#[command(name = "abfr", version, about = "Brain-patch function representations with KAN transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic cohort.
    GenData(GenData),
    /// Select anchors and compute function representations for a cohort.
    Extract(Extract),
    /// Train one model on a feature set, optionally testing on another.
    Train(Train),
    /// Stratified k-fold cross-validation.
    Cv(Cv),
    /// Cross-validate every sampling × patching × backbone × configuration cell.
    Grid(Grid),
    /// Export ROC curves from results files.
    Roc(Roc),
    /// Kruskal-Wallis and Dunn tests over per-fold metrics.
    Stats(Stats),
}

#[derive(Args)]
struct Common {
    /// JSON config file (or an earlier run manifest); flags take precedence.
    #[arg(long)]
    config_file: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    subjects: Option<usize>,
    /// T,X,Y,Z
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    effect_size: Option<f64>,
    #[arg(long)]
    latents: Option<usize>,
    #[arg(long)]
    asd_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Extract {
    #[command(flatten)]
    common: Common,
    /// Cohort directory or its `cohort.json`.
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    anchors: Option<Sampling>,
    #[arg(long)]
    patching: Option<Patching>,
    /// Single patch size (random patching).
    #[arg(long, conflicts_with = "sizes")]
    patch_size: Option<usize>,
    /// Patch sizes, one per iteration.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    n_anchors: Option<usize>,
    #[arg(long)]
    anchor_size: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    n_patches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    backbone: Option<Backbone>,
    /// FFN-head pairing: mlp-mlp, kan-kan, kan-mlp or mlp-kan.
    #[arg(long)]
    config: Option<Configuration>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for fold assignment, shuffling and DropPath.
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        if let Some(b) = self.backbone {
            m.backbone = b;
        }
        if let Some(c) = self.config {
            *m = m.clone().with_configuration(c);
        }
        set(&mut m.d_model, self.d_model);
        set(&mut m.depth, self.depth);
        set(&mut m.n_heads, self.heads);
        set(&mut m.seed, self.model_seed);
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.seed, self.seed);
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    features: PathBuf,
    /// Held-out feature set; without it the model is scored on its training data.
    #[arg(long)]
    test_features: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Cv {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    folds: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    /// Save each fold's parameters under `<out>/checkpoints`.
    #[arg(long)]
    checkpoints: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Grid {
    #[command(flatten)]
    common: Common,
    /// Directory whose subdirectories hold one feature set per sampling × patching pair.
    #[arg(long)]
    features_dir: PathBuf,
    /// Cell ids such as `grid-random-deit-kan-mlp`; defaults to every cell with features.
    #[arg(long, value_delimiter = ',')]
    cells: Option<Vec<String>>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    folds: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Roc {
    #[command(flatten)]
    common: Common,
    /// `cv.json`, `metrics.json`, grid cell files, or directories holding them.
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Stats {
    #[command(flatten)]
    common: Common,
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// Each group collects the results whose name contains the given text;
    /// by default every result is its own group.
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<String>>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Limits rayon to `threads` workers (0 keeps its default).
fn thread_pool(threads: usize) {
    // Only fails if a pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn sibling_manifest(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(a.common.config_file.as_deref())?;
    let s = &mut cfg.synthetic;
    set(&mut s.n_subjects, a.subjects);
    if let Some(d) = &a.dims {
        s.dims = d
            .as_slice()
            .try_into()
            .map_err(|_| anyhow::anyhow!("--dims takes four values T,X,Y,Z, got {}", d.len()))?;
    }
    set(&mut s.effect_size, a.effect_size);
    set(&mut s.n_latent_signals, a.latents);
    set(&mut s.asd_fraction, a.asd_fraction);
    set(&mut s.seed, a.seed);
    let cohort = generate_synthetic_cohort(&cfg.synthetic)?;
    let path = write_cohort(&cohort, &a.out_dir)?;

    let mut m = RunManifest::new("gen-data", a.common.config_file.as_deref(), cfg.clone());
    m.seed("cohort", cfg.synthetic.seed);
    m.output(&a.out_dir)?;
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&a.out_dir.join(RUN_MANIFEST))?;
    println!("wrote {} subjects to {}", cohort.len(), path.display());
    Ok(())
}

fn extract(a: Extract) -> Result<()> {
    let start = Instant::now();
    thread_pool(1);
    let mut cfg = RunConfig::load(a.common.config_file.as_deref())?;
    let e = &mut cfg.extraction;
    set(&mut e.sampling, a.anchors);
    set(&mut e.patching, a.patching);
    if let Some(p) = a.patch_size {
        e.patch_sizes = vec![p];
    }
    set(&mut e.patch_sizes, a.sizes.clone());
    set(&mut e.n_anchors, a.n_anchors);
    set(&mut e.anchor_patch_size, a.anchor_size);
    if a.tau.is_some() {
        e.tau = a.tau;
    }
    set(&mut e.n_patches, a.n_patches);
    set(&mut e.seed, a.seed);

    let cohort = read_cohort(&a.cohort)?;
    let extracted = extract_cohort(&cohort, &cfg.extraction)?;
    let cohort_name = a.cohort.display().to_string();
    write_features(&a.out, &extracted, &cfg.extraction, Some(&cohort_name))?;

    let mut m = RunManifest::new("extract", a.common.config_file.as_deref(), cfg.clone());
    m.seed("extraction", cfg.extraction.seed);
    m.seed("anchors", cfg.extraction.anchor_seed());
    m.input(&a.cohort)?;
    m.output(&a.out)?;
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&a.out.join(RUN_MANIFEST))?;
    println!(
        "{} anchors, {} subjects -> {}",
        extracted.anchors.len(),
        extracted.dataset.len(),
        a.out.join(FEATURES_MANIFEST).display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainOutput {
    /// `"train"` or the test feature set's path.
    evaluated_on: String,
    train_loss_history: Vec<f64>,
    evaluation: Evaluation,
}

fn train(a: Train) -> Result<()> {
    let start = Instant::now();
    thread_pool(1);
    let mut cfg = RunConfig::load(a.common.config_file.as_deref())?;
    a.model.apply(&mut cfg);
    let train_set = read_features(&a.features)?;
    let test_set = a.test_features.as_deref().map(read_features).transpose()?;
    if let Some(t) = &test_set {
        if t.anchors != train_set.anchors {
            bail!("training and test features were extracted with different anchors");
        }
    }
    let test_data = test_set.as_ref().map_or(&train_set.dataset, |t| &t.dataset);
    let (model, report) = cross_cohort(&train_set.dataset, test_data, &cfg.model, &cfg.train)?;
    cfg.model = report.model_config.clone();

    create_dir(&a.out)?;
    model.params.save_checkpoint(&a.out.join("model"))?;
    write_json(&a.out.join("model_config.json"), &cfg.model)?;
    let evaluated_on = a.test_features.as_ref().map_or("train".into(), |p| p.display().to_string());
    let out = TrainOutput {
        evaluated_on,
        train_loss_history: report.train_loss_history,
        evaluation: report.evaluation,
    };
    write_json(&a.out.join("metrics.json"), &out)?;

    let mut m = RunManifest::new("train", a.common.config_file.as_deref(), cfg.clone());
    m.seed("model", cfg.model.seed);
    m.seed("train", cfg.train.seed);
    m.input(&a.features)?;
    if let Some(p) = &a.test_features {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&a.out.join(RUN_MANIFEST))?;
    let r = &out.evaluation.metrics;
    println!("{}: acc {:.3} auc {:.3} f1 {:.3}", out.evaluated_on, r.acc, r.auc, r.f1);
    Ok(())
}

fn summary_csv(report: &CvReport) -> String {
    let mut s = String::from("metric,mean,std\n");
    for (name, v) in &report.summary.metrics {
        s.push_str(&format!("{name},{},{}\n", v.mean, v.std));
    }
    s
}

fn cv(a: Cv) -> Result<()> {
    let start = Instant::now();
    thread_pool(1);
    let mut cfg = RunConfig::load(a.common.config_file.as_deref())?;
    a.model.apply(&mut cfg);
    set(&mut cfg.train.folds, a.folds.map(|f| f as usize));
    let features = read_features(&a.features)?;
    create_dir(&a.out)?;
    let options = CvOptions {
        checkpoint_dir: a.checkpoints.then(|| a.out.join("checkpoints")),
        parallel: false,
    };
    let report = cross_validate(&features.dataset, &cfg.model, &cfg.train, &options)?;
    cfg.model = report.model_config.clone();
    write_json(&a.out.join("cv.json"), &report)?;
    fs::write(a.out.join("summary.csv"), summary_csv(&report))?;

    let mut m = RunManifest::new("cv", a.common.config_file.as_deref(), cfg.clone());
    m.seed("model", cfg.model.seed);
    m.seed("train", cfg.train.seed);
    for f in &report.folds {
        m.seed(&format!("fold_{}_model", f.fold_index), f.model_seed);
        m.seed(&format!("fold_{}_train", f.fold_index), f.train_seed);
    }
    m.input(&a.features)?;
    m.output(&a.out)?;
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&a.out.join(RUN_MANIFEST))?;
    for name in METRIC_NAMES {
        let v = report.summary.get(name).expect("summary covers every metric");
        println!("{name:<12} {:.3}±{:.3}", v.mean, v.std);
    }
    Ok(())
}

/// Feature sets in `dir` and its immediate subdirectories, keyed by how they were extracted.
fn discover_features(dir: &Path) -> Result<BTreeMap<(Sampling, Patching), (PathBuf, Dataset)>> {
    let mut candidates = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    candidates.extend(subdirs);
    let mut found = BTreeMap::new();
    for c in candidates {
        if !c.join(FEATURES_MANIFEST).is_file() {
            continue;
        }
        let set = read_features(&c)?;
        let key = (set.manifest.spec.sampling, set.manifest.spec.patching);
        if let Some((prev, _)) = found.insert(key, (c.clone(), set.dataset)) {
            bail!(
                "{} and {} both hold {} sampling with {} patching",
                prev.display(),
                c.display(),
                key.0,
                key.1
            );
        }
    }
    if found.is_empty() {
        bail!("no {FEATURES_MANIFEST} found in {} or its subdirectories", dir.display());
    }
    Ok(found)
}

fn grid(a: Grid) -> Result<()> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(a.common.config_file.as_deref())?;
    a.model.apply(&mut cfg);
    set(&mut cfg.train.folds, a.folds.map(|f| f as usize));
    set(&mut cfg.grid.jobs, a.jobs);
    set(&mut cfg.grid.cells, a.cells.clone());
    thread_pool(cfg.grid.jobs);

    let found = discover_features(&a.features_dir)?;
    let cells: Vec<GridCell> = if cfg.grid.cells.is_empty() {
        GridCell::full_grid()
            .into_iter()
            .filter(|c| found.contains_key(&(c.sampling, c.patching)))
            .collect()
    } else {
        cfg.grid.cells.iter().map(|s| s.parse()).collect::<abfr_core::Result<_>>()?
    };
    let datasets = found.iter().map(|(k, (_, d))| (*k, d.clone())).collect();
    create_dir(&a.out)?;
    let options = GridOptions {
        out_dir: Some(a.out.clone()),
        jobs: cfg.grid.jobs,
    };
    let (table, _) = run_experiment_grid(&datasets, &cells, &cfg.model, &cfg.train, &options)?;
    table.write(&a.out.join("results.csv"), &a.out.join("results.json"))?;

    let mut m = RunManifest::new("grid", a.common.config_file.as_deref(), cfg.clone());
    m.seed("model", cfg.model.seed);
    m.seed("train", cfg.train.seed);
    for (path, _) in found.values() {
        m.input(path)?;
    }
    m.output(&a.out)?;
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&a.out.join(RUN_MANIFEST))?;
    println!("{} cells -> {}", table.rows.len(), a.out.join("results.csv").display());
    Ok(())
}

/// A results file reduced to what ROC export and statistics need.
struct NamedResult {
    name: String,
    scores: Vec<f64>,
    labels: Vec<usize>,
    /// One metrics report per fold (a single entry for `train` output).
    folds: Vec<abfr_core::metrics::MetricsReport>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ResultsFile {
    Cell(CellRecord),
    Cv(CvReport),
    Train(TrainOutput),
}

fn name_from_path(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match (stem.as_str(), path.parent().and_then(Path::file_name)) {
        ("cv" | "metrics", Some(dir)) => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn load_result_file(path: &Path) -> Result<NamedResult> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed: ResultsFile = serde_json::from_slice(&text)
        .with_context(|| format!("{} is not a cv, train or grid cell result", path.display()))?;
    Ok(match parsed {
        ResultsFile::Cell(c) => {
            let (scores, labels) = c.report.pooled_scores();
            NamedResult {
                name: c.cell.id(),
                scores,
                labels,
                folds: c.report.folds.into_iter().map(|f| f.evaluation.metrics).collect(),
            }
        }
        ResultsFile::Cv(r) => {
            let (scores, labels) = r.pooled_scores();
            NamedResult {
                name: name_from_path(path),
                scores,
                labels,
                folds: r.folds.into_iter().map(|f| f.evaluation.metrics).collect(),
            }
        }
        ResultsFile::Train(t) => NamedResult {
            name: name_from_path(path),
            scores: t.evaluation.scores,
            labels: t.evaluation.labels,
            folds: vec![t.evaluation.metrics],
        },
    })
}

fn load_results(paths: &[PathBuf]) -> Result<Vec<NamedResult>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            if p.join("cells").is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(p.join("cells"))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.extension().is_some_and(|e| e == "json"))
                    .collect();
                files.sort();
                for f in files {
                    out.push(load_result_file(&f)?);
                }
            } else if p.join("cv.json").is_file() {
                out.push(load_result_file(&p.join("cv.json"))?);
            } else if p.join("metrics.json").is_file() {
                out.push(load_result_file(&p.join("metrics.json"))?);
            } else {
                bail!("{} holds no results", p.display());
            }
        } else {
            out.push(load_result_file(p)?);
        }
    }
    Ok(out)
}

fn roc(a: Roc) -> Result<()> {
    let start = Instant::now();
    let cfg = RunConfig::load(a.common.config_file.as_deref())?;
    let results = load_results(&a.results)?;
    let curves = results
        .iter()
        .map(|r| Ok((r.name.clone(), roc_curve(&r.scores, &r.labels)?)))
        .collect::<Result<Vec<_>>>()?;
    export_roc(&curves, &a.out)?;

    let mut m = RunManifest::new("roc", a.common.config_file.as_deref(), cfg);
    for p in &a.results {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&sibling_manifest(&a.out))?;
    println!("{} curves -> {}", curves.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    name: String,
    members: Vec<String>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct StatsReport {
    metric: String,
    groups: Vec<GroupSummary>,
    kruskal_wallis: KruskalWallis,
    dunn: DunnResult,
}

fn stats(a: Stats) -> Result<()> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(a.common.config_file.as_deref())?;
    set(&mut cfg.stats.metric, a.metric.clone());
    set(&mut cfg.stats.alpha, a.alpha);
    let metric = cfg.stats.metric.clone();
    if !METRIC_NAMES.contains(&metric.as_str()) {
        bail!("unknown metric '{metric}'; expected one of {}", METRIC_NAMES.join(", "));
    }
    let results = load_results(&a.results)?;
    let values = |r: &NamedResult| -> Vec<f64> {
        r.folds.iter().map(|f| f.metric(&metric).expect("known metric")).collect()
    };
    let groups: Vec<GroupSummary> = match &a.groups {
        None => results
            .iter()
            .map(|r| GroupSummary {
                name: r.name.clone(),
                members: vec![r.name.clone()],
                values: values(r),
            })
            .collect(),
        Some(patterns) => patterns
            .iter()
            .map(|pat| {
                let members: Vec<&NamedResult> = results.iter().filter(|r| r.name.contains(pat.as_str())).collect();
                if members.is_empty() {
                    bail!("group '{pat}' matches no result");
                }
                Ok(GroupSummary {
                    name: pat.clone(),
                    members: members.iter().map(|r| r.name.clone()).collect(),
                    values: members.iter().flat_map(|r| values(r)).collect(),
                })
            })
            .collect::<Result<_>>()?,
    };
    let samples: Vec<Vec<f64>> = groups.iter().map(|g| g.values.clone()).collect();
    let report = StatsReport {
        metric: metric.clone(),
        kruskal_wallis: kruskal_wallis(&samples)?,
        dunn: dunn_test(&samples, cfg.stats.alpha)?,
        groups,
    };
    write_json(&a.out, &report)?;

    let mut m = RunManifest::new("stats", a.common.config_file.as_deref(), cfg);
    for p in &a.results {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&sibling_manifest(&a.out))?;
    let kw = &report.kruskal_wallis;
    println!("Kruskal-Wallis on {metric}: H = {:.4}, df = {}, p = {:.4}", kw.h, kw.df, kw.p_value);
    for p in &report.dunn.pairs {
        println!(
            "  {} vs {}: z = {:.3}, p_adj = {:.4}{}",
            report.groups[p.a].name,
            report.groups[p.b].name,
            p.z,
            p.p_adjusted,
            if p.significant { " *" } else { "" }
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::Grid(a) => grid(a),
        Command::Roc(a) => roc(a),
        Command::Stats(a) => stats(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
