//! The four benchmark stages. Each stage reads what the previous one wrote
//! under the output directory and records its own artifacts in the
//! manifest.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use attrbench::attribution::{attribute, AttributionContext, AttributionMap, MaskPolicy, Method};
use attrbench::data::synth::generate_one;
use attrbench::data::{jsonl, read_records, PatientRecord, TaskName, TaskSpec};
use attrbench::faithfulness::{
    evaluate_records, extrapolate_hours, method_applies, sign_test_greater, FaithfulnessReport, RecordFaithfulness,
    WinMatrix,
};
use attrbench::model::{load_checkpoint, train, write_checkpoint, Architecture, EvalMetrics, Model};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::manifest::{Manifest, Status};
use crate::plot::{scatter, Point};

pub const ATTRIBUTION_KIND: &str = "attribution";

/// Header of the trained-model metrics table.
pub const METRICS_HEADER: [&str; 11] =
    ["task", "model", "status", "PR-AUC", "ROC-AUC", "Acc.", "F1", "F1-W", "F1-Ma", "F1-Mi", "config_hash"];

/// Cohort sizes of the real tasks, used for runtime extrapolation.
pub fn reference_population(task: TaskName) -> usize {
    match task {
        TaskName::Mortality => 137_778,
        TaskName::Los => 220_853,
        TaskName::Dka => 179_945,
    }
}

/// `--only` filters. A cell is kept when, for every kind of name that has
/// at least one filter value, it matches one of them.
#[derive(Clone, Debug, Default)]
pub struct Filter {
    tasks: Vec<TaskName>,
    models: Vec<Architecture>,
    methods: Vec<Method>,
}

impl Filter {
    pub fn parse(values: &[String]) -> Result<Self> {
        let mut f = Filter::default();
        for v in values {
            if let Ok(t) = v.parse() {
                f.tasks.push(t);
            } else if let Ok(a) = v.parse() {
                f.models.push(a);
            } else if let Ok(m) = v.parse() {
                f.methods.push(m);
            } else {
                bail!("--only value '{v}' is not a task, model or method name");
            }
        }
        Ok(f)
    }

    pub fn task(&self, t: TaskName) -> bool {
        self.tasks.is_empty() || self.tasks.contains(&t)
    }

    pub fn model(&self, a: Architecture) -> bool {
        self.models.is_empty() || self.models.contains(&a)
    }

    pub fn method(&self, m: Method) -> bool {
        self.methods.is_empty() || self.methods.contains(&m)
    }
}

pub fn data_path(task: TaskName, split: &str) -> String {
    format!("data/{}/{split}.jsonl", task.as_str())
}

pub fn checkpoint_path(task: TaskName, arch: Architecture) -> String {
    format!("models/{}/{}.ckpt", task.as_str(), arch.as_str())
}

fn model_metrics_path(task: TaskName, arch: Architecture) -> String {
    format!("models/{}/{}.metrics.json", task.as_str(), arch.as_str())
}

pub fn attribution_path(task: TaskName, arch: Architecture, method: Method) -> String {
    format!("attributions/{}/{}/{}.jsonl", task.as_str(), arch.as_str(), method.as_str())
}

/// Splits of one task: train, test, and the interpretation subset of test.
pub fn splits(config: &BenchConfig, task: &TaskSpec) -> Result<[Vec<PatientRecord>; 3]> {
    let (n_train, n_test) = (config.data.train_size, config.data.test_size);
    let seed = config.seeds.data;
    let gen = |range: std::ops::Range<usize>| -> Result<Vec<PatientRecord>> {
        range.map(|i| generate_one(task, seed, i as u64).map_err(Into::into)).collect()
    };
    let train = gen(0..n_train)?;
    let test = gen(n_train..n_train + n_test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.bench ^ (task.name as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut picked = sample(&mut rng, n_test, config.interpret_size).into_vec();
    picked.sort_unstable();
    let interpret = picked.into_iter().map(|i| test[i].clone()).collect();
    Ok([train, test, interpret])
}

pub fn gen_data(config: &BenchConfig, manifest: &mut Manifest, filter: &Filter) -> Result<()> {
    for name in config.task_names()? {
        if !filter.task(name) {
            continue;
        }
        let task = TaskSpec::new(name);
        let [train, test, interpret] = splits(config, &task)?;
        for (split, records) in [("train", &train), ("test", &test), ("interpret", &interpret)] {
            let mut bytes = Vec::new();
            jsonl::write_lines(&mut bytes, attrbench::data::RECORD_KIND, records)?;
            manifest.write_artifact(&data_path(name, split), "data", &bytes)?;
        }
        eprintln!("gen-data {}: {} train, {} test, {} interpret", name, train.len(), test.len(), interpret.len());
    }
    Ok(())
}

fn read_split(manifest: &Manifest, task: TaskName, split: &str) -> Result<Vec<PatientRecord>> {
    let rel = data_path(task, split);
    if !manifest.is_complete(&rel) {
        bail!("{rel} is missing or altered; run gen-data first");
    }
    Ok(read_records(manifest.root().join(&rel))?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PairMetrics {
    status: Status,
    metrics: Option<EvalMetrics>,
    detail: Option<String>,
}

pub fn train_models(config: &BenchConfig, manifest: &mut Manifest, filter: &Filter) -> Result<()> {
    let train_cfg = config.train_config();
    for name in config.task_names()? {
        if !filter.task(name) {
            continue;
        }
        let task = TaskSpec::new(name);
        let mut data: Option<(Vec<PatientRecord>, Vec<PatientRecord>)> = None;
        for arch in config.architectures()? {
            if !filter.model(arch) {
                continue;
            }
            let ckpt = checkpoint_path(name, arch);
            let metrics_rel = model_metrics_path(name, arch);
            if manifest.is_complete(&ckpt) && manifest.is_complete(&metrics_rel) {
                continue;
            }
            if data.is_none() {
                data = Some((read_split(manifest, name, "train")?, read_split(manifest, name, "test")?));
            }
            let (train_set, test_set) = data.as_ref().expect("loaded above");
            let model = Model::build(config.model_config(&task, arch), config.seeds.train)?;
            let started = Instant::now();
            let pair = match train(model, train_set, test_set, &train_cfg) {
                Ok(out) => {
                    let mut bytes = Vec::new();
                    write_checkpoint(&out.model, &mut bytes)?;
                    manifest.write_artifact(&ckpt, "checkpoint", &bytes)?;
                    eprintln!("train {name}/{arch}: {:?} in {:.1}s", out.metrics, started.elapsed().as_secs_f64());
                    PairMetrics { status: Status::Ok, metrics: Some(out.metrics), detail: None }
                }
                Err(attrbench::Error::Diverged { epoch }) => {
                    let detail = format!("diverged at epoch {epoch}");
                    manifest.record(&ckpt, "checkpoint", Status::Diverged, &detail)?;
                    eprintln!("train {name}/{arch}: {detail}");
                    PairMetrics { status: Status::Diverged, metrics: None, detail: Some(detail) }
                }
                Err(e) => return Err(e).with_context(|| format!("training {name}/{arch}")),
            };
            manifest.write_artifact(&metrics_rel, "metrics", &serde_json::to_vec_pretty(&pair)?)?;
        }
    }
    write_metrics_csv(config, manifest)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_metrics_csv(config: &BenchConfig, manifest: &mut Manifest) -> Result<()> {
    let hash = manifest.config_hash.clone();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for name in config.task_names()? {
        for arch in config.architectures()? {
            let rel = model_metrics_path(name, arch);
            if !manifest.is_complete(&rel) {
                continue;
            }
            let pair: PairMetrics = serde_json::from_slice(&std::fs::read(manifest.root().join(&rel))?)?;
            let status = match pair.status {
                Status::Ok => "ok",
                Status::Diverged => "diverged",
                _ => "failed",
            };
            let mut row = vec![name.as_str().to_string(), arch.as_str().to_string(), status.to_string()];
            row.extend(match pair.metrics {
                Some(EvalMetrics::Binary { pr_auc, roc_auc, accuracy, f1 }) => {
                    [opt(pr_auc), opt(roc_auc), accuracy.to_string(), f1.to_string(), String::new(), String::new(), String::new()]
                }
                Some(EvalMetrics::Multiclass { accuracy, f1_weighted, f1_macro, f1_micro }) => [
                    String::new(),
                    String::new(),
                    accuracy.to_string(),
                    String::new(),
                    f1_weighted.to_string(),
                    f1_macro.to_string(),
                    f1_micro.to_string(),
                ],
                None => Default::default(),
            });
            row.push(hash.clone());
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("flushing metrics csv: {e}"))?;
    manifest.write_artifact("metrics.csv", "report", &bytes)
}

/// One attributed record as stored in the attribution JSONL files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionLine {
    /// Position of the record in the interpretation split.
    pub index: usize,
    pub runtime_seconds: f64,
    pub map: AttributionMap,
    pub config_hash: String,
}

fn record_seed(bench: u64, method: Method, index: usize) -> u64 {
    bench.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((method as u64) << 40) ^ index as u64
}

fn load_model(manifest: &Manifest, task: TaskName, arch: Architecture) -> Result<Model> {
    let rel = checkpoint_path(task, arch);
    if !manifest.is_complete(&rel) {
        bail!("missing checkpoint for ({}, {}); run train first", task, arch);
    }
    Ok(load_checkpoint(manifest.root().join(rel))?)
}

pub fn attribute_all(config: &BenchConfig, manifest: &mut Manifest, filter: &Filter) -> Result<()> {
    let mut failures = Vec::new();
    for name in config.task_names()? {
        if !filter.task(name) {
            continue;
        }
        let task = TaskSpec::new(name);
        let mut records: Option<Vec<PatientRecord>> = None;
        for arch in config.architectures()? {
            if !filter.model(arch) {
                continue;
            }
            let mut model: Option<Model> = None;
            for method in config.method_list()? {
                if !filter.method(method) {
                    continue;
                }
                let rel = attribution_path(name, arch, method);
                if !method_applies(method.as_str(), arch.as_str()) {
                    if manifest.status(&rel) != Some(Status::NotApplicable) {
                        manifest.record(&rel, "attribution", Status::NotApplicable, format!("{method} needs attention layers"))?;
                    }
                    continue;
                }
                if manifest.is_complete(&rel) {
                    continue;
                }
                if model.is_none() {
                    match load_model(manifest, name, arch) {
                        Ok(m) => model = Some(m),
                        Err(e) => {
                            failures.push(format!("{rel}: {e}"));
                            continue;
                        }
                    }
                }
                if records.is_none() {
                    records = Some(read_split(manifest, name, "interpret")?);
                }
                let (model, records) = (model.as_ref().expect("loaded"), records.as_ref().expect("loaded"));
                match attribute_cell(config, &manifest.config_hash, &task, model, records, method) {
                    Ok(lines) => {
                        let mut bytes = Vec::new();
                        jsonl::write_lines(&mut bytes, ATTRIBUTION_KIND, &lines)?;
                        manifest.write_artifact(&rel, "attribution", &bytes)?;
                        let per = lines.iter().map(|l| l.runtime_seconds).sum::<f64>() / lines.len().max(1) as f64;
                        eprintln!("attribute {name}/{arch}/{method}: {} records, {:.2} ms/record", lines.len(), per * 1e3);
                    }
                    Err(e) => {
                        manifest.record(&rel, "attribution", Status::Failed, e.to_string())?;
                        failures.push(format!("{rel}: {e}"));
                    }
                }
            }
        }
    }
    if !failures.is_empty() {
        bail!("{} attribution cell(s) failed:\n  {}", failures.len(), failures.join("\n  "));
    }
    Ok(())
}

fn attribute_cell(
    config: &BenchConfig,
    config_hash: &str,
    task: &TaskSpec,
    model: &Model,
    records: &[PatientRecord],
    method: Method,
) -> Result<Vec<AttributionLine>> {
    let policy = MaskPolicy::new(config.mask.lab_replacement, &model.lab_stats);
    records
        .par_iter()
        .enumerate()
        .map(|(index, record)| {
            let started = Instant::now();
            let target = attrbench::model::argmax(&model.predict_proba(record)?);
            let ctx = AttributionContext {
                policy: &policy,
                settings: &config.method_settings,
                task: Some(task),
                seed: record_seed(config.seeds.bench, method, index),
            };
            let map = attribute(method, model, record, target, &ctx)?;
            map.check_aligned(record)?;
            Ok(AttributionLine {
                index,
                runtime_seconds: started.elapsed().as_secs_f64(),
                map,
                config_hash: config_hash.to_string(),
            })
        })
        .collect::<attrbench::Result<Vec<_>>>()
        .map_err(Into::into)
}

/// Per-cell evaluation kept in memory for the report stage.
struct Cell {
    report: FaithfulnessReport,
    per_record: Vec<RecordFaithfulness>,
}

pub fn report(config: &BenchConfig, manifest: &mut Manifest, filter: &Filter) -> Result<()> {
    let hash = manifest.config_hash.clone();
    let tasks: Vec<TaskName> = config.task_names()?.into_iter().filter(|t| filter.task(*t)).collect();
    let archs: Vec<Architecture> = config.architectures()?.into_iter().filter(|a| filter.model(*a)).collect();
    let methods: Vec<Method> = config.method_list()?.into_iter().filter(|m| filter.method(*m)).collect();
    if methods.is_empty() {
        bail!("no methods selected for the report");
    }

    let mut cells: BTreeMap<(TaskName, Architecture, Method), Cell> = BTreeMap::new();
    let mut gaps = Vec::new();
    for &name in &tasks {
        let mut records: Option<Vec<PatientRecord>> = None;
        for &arch in &archs {
            let mut model: Option<Model> = None;
            for &method in &methods {
                let rel = attribution_path(name, arch, method);
                if !method_applies(method.as_str(), arch.as_str()) {
                    continue;
                }
                if !manifest.is_complete(&rel) {
                    gaps.push(format!("({method}, {arch}, {name})"));
                    continue;
                }
                if model.is_none() {
                    model = Some(load_model(manifest, name, arch)?);
                }
                if records.is_none() {
                    records = Some(read_split(manifest, name, "interpret")?);
                }
                let (model, records) = (model.as_ref().expect("loaded"), records.as_ref().expect("loaded"));
                let lines: Vec<AttributionLine> = jsonl::read_file(manifest.root().join(&rel), ATTRIBUTION_KIND)?;
                if lines.len() != records.len() || lines.iter().enumerate().any(|(i, l)| l.index != i) {
                    bail!("{rel} does not line up with the interpretation split");
                }
                let maps: Vec<AttributionMap> = lines.iter().map(|l| l.map.clone()).collect();
                let policy = MaskPolicy::new(config.mask.lab_replacement, &model.lab_stats);
                let per_record = evaluate_records(model, records, &maps, &config.k_grid, &policy)?;
                let runtime = lines.iter().map(|l| l.runtime_seconds).sum::<f64>() / lines.len() as f64;
                let report = FaithfulnessReport::from_records(
                    method.as_str(),
                    arch.as_str(),
                    name.as_str(),
                    &per_record,
                    runtime,
                    &config.k_grid,
                )?;
                cells.insert((name, arch, method), Cell { report, per_record });
            }
        }
    }

    write_faithfulness_csv(manifest, &hash, &tasks, &archs, &methods, &cells)?;
    write_runtime_csv(manifest, &hash, &cells)?;
    write_separation_csv(manifest, &hash, &cells)?;
    write_win_matrix(manifest, &hash, &tasks, &archs, &methods, &cells, &gaps)?;
    write_plots(manifest, &hash, &tasks, &cells)?;
    if !gaps.is_empty() {
        eprintln!("report is partial; missing cells: {}", gaps.join(", "));
    }
    Ok(())
}

fn k_grid_text(k: &[f64]) -> String {
    k.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| anyhow!("flushing csv: {e}"))
}

fn write_faithfulness_csv(
    manifest: &mut Manifest,
    hash: &str,
    tasks: &[TaskName],
    archs: &[Architecture],
    methods: &[Method],
    cells: &BTreeMap<(TaskName, Architecture, Method), Cell>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "task",
        "model",
        "method",
        "status",
        "comprehensiveness",
        "sufficiency",
        "composite",
        "n_records",
        "k_grid",
        "config_hash",
    ])?;
    for &t in tasks {
        for &a in archs {
            for &m in methods {
                let key = [t.as_str(), a.as_str(), m.as_str()];
                match cells.get(&(t, a, m)) {
                    Some(c) => {
                        let r = &c.report;
                        w.write_record([
                            key[0],
                            key[1],
                            key[2],
                            "ok",
                            &r.comprehensiveness.to_string(),
                            &r.sufficiency.to_string(),
                            &r.composite.to_string(),
                            &r.n_records.to_string(),
                            &k_grid_text(&r.k_grid),
                            hash,
                        ])?;
                    }
                    None => {
                        let status =
                            if method_applies(m.as_str(), a.as_str()) { "missing" } else { "not-applicable" };
                        w.write_record([key[0], key[1], key[2], status, "", "", "", "", "", hash])?;
                    }
                }
            }
        }
    }
    manifest.write_artifact("reports/faithfulness.csv", "report", &finish_csv(w)?)
}

/// Wall-clock figures live in their own file so the other reports stay
/// byte-identical across runs.
fn write_runtime_csv(
    manifest: &mut Manifest,
    hash: &str,
    cells: &BTreeMap<(TaskName, Architecture, Method), Cell>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "task",
        "model",
        "method",
        "seconds_per_record",
        "n_records",
        "population",
        "extrapolated_hours",
        "comprehensiveness",
        "config_hash",
    ])?;
    for ((t, a, m), c) in cells {
        let pop = reference_population(*t);
        w.write_record([
            t.as_str(),
            a.as_str(),
            m.as_str(),
            &c.report.runtime_per_record.to_string(),
            &c.report.n_records.to_string(),
            &pop.to_string(),
            &extrapolate_hours(c.report.runtime_per_record, pop).to_string(),
            &c.report.comprehensiveness.to_string(),
            hash,
        ])?;
    }
    manifest.write_artifact("reports/runtime.csv", "runtime", &finish_csv(w)?)
}

/// Paired sign test of every method's per-record composite against the
/// random baseline in the same cell.
fn write_separation_csv(
    manifest: &mut Manifest,
    hash: &str,
    cells: &BTreeMap<(TaskName, Architecture, Method), Cell>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "model", "method", "mean_composite_diff", "wins", "losses", "ties", "p_value", "config_hash"])?;
    for ((t, a, m), c) in cells {
        if *m == Method::Random {
            continue;
        }
        let Some(base) = cells.get(&(*t, *a, Method::Random)) else { continue };
        let diffs: Vec<f64> =
            c.per_record.iter().zip(&base.per_record).map(|(x, y)| x.composite() - y.composite()).collect();
        let test = sign_test_greater(&diffs);
        let mean = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
        w.write_record([
            t.as_str(),
            a.as_str(),
            m.as_str(),
            &mean.to_string(),
            &test.positive.to_string(),
            &test.negative.to_string(),
            &test.ties.to_string(),
            &format!("{:e}", test.p_value),
            hash,
        ])?;
    }
    manifest.write_artifact("reports/separation.csv", "report", &finish_csv(w)?)
}

fn write_win_matrix(
    manifest: &mut Manifest,
    hash: &str,
    tasks: &[TaskName],
    archs: &[Architecture],
    methods: &[Method],
    cells: &BTreeMap<(TaskName, Architecture, Method), Cell>,
    gaps: &[String],
) -> Result<()> {
    // only pairs where every applicable method reported enter the matrix
    let pairs: Vec<(String, String)> = tasks
        .iter()
        .flat_map(|t| archs.iter().map(move |a| (*t, *a)))
        .filter(|(t, a)| {
            methods.iter().all(|m| !method_applies(m.as_str(), a.as_str()) || cells.contains_key(&(*t, *a, *m)))
        })
        .map(|(t, a)| (a.as_str().to_string(), t.as_str().to_string()))
        .collect();
    let reports: Vec<FaithfulnessReport> = cells.values().map(|c| c.report.clone()).collect();
    let names: Vec<String> = methods.iter().map(|m| m.as_str().to_string()).collect();
    let matrix = WinMatrix::build(&reports, &names, &pairs, method_applies)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row_method", "col_method", "wins", "ties", "denominator", "config_hash"])?;
    for i in 0..names.len() {
        for j in 0..names.len() {
            if i == j {
                continue;
            }
            w.write_record([
                names[i].as_str(),
                names[j].as_str(),
                &matrix.wins[i][j].to_string(),
                &matrix.ties[i][j].to_string(),
                &matrix.denominators[i][j].to_string(),
                hash,
            ])?;
        }
    }
    manifest.write_artifact("reports/win_matrix.csv", "report", &finish_csv(w)?)?;

    let mut md = String::from("# Head-to-head wins\n\n");
    md.push_str("Each cell counts the model-task pairs where the row method has the higher ");
    md.push_str("comprehensiveness × (1 − sufficiency), over the pairs both methods apply to. Ties count for neither.\n\n");
    md.push_str(&matrix.to_markdown());
    if !gaps.is_empty() {
        md.push_str(&format!("\nMissing cells (their pairs are left out): {}\n", gaps.join(", ")));
    }
    md.push_str(&format!("\nconfig: `{hash}`\n"));
    manifest.write_artifact("reports/win_matrix.md", "report", md.as_bytes())
}

fn write_plots(
    manifest: &mut Manifest,
    hash: &str,
    tasks: &[TaskName],
    cells: &BTreeMap<(TaskName, Architecture, Method), Cell>,
) -> Result<()> {
    for &t in tasks {
        let points: Vec<Point> = cells
            .iter()
            .filter(|((task, _, _), _)| *task == t)
            .map(|((_, a, m), c)| Point {
                label: format!("{m} on {a}"),
                series: m.as_str().to_string(),
                x: c.report.sufficiency,
                y: c.report.comprehensiveness,
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        let svg = scatter(
            &format!("Faithfulness on {t}"),
            "sufficiency (lower is better)",
            "comprehensiveness (higher is better)",
            &points,
            false,
            &format!("config {hash}"),
        );
        manifest.write_artifact(&format!("reports/faithfulness_{}.svg", t.as_str()), "plot", svg.as_bytes())?;
    }
    let points: Vec<Point> = cells
        .iter()
        .filter(|(_, c)| c.report.runtime_per_record > 0.0)
        .map(|((t, a, m), c)| Point {
            label: format!("{m} on {a}/{t}"),
            series: m.as_str().to_string(),
            x: c.report.runtime_per_record,
            y: c.report.comprehensiveness,
        })
        .collect();
    if !points.is_empty() {
        let svg = scatter(
            "Runtime against comprehensiveness",
            "seconds per record (log scale)",
            "comprehensiveness",
            &points,
            true,
            &format!("config {hash}"),
        );
        manifest.write_artifact("reports/runtime.svg", "plot", svg.as_bytes())?;
    }
    Ok(())
}
