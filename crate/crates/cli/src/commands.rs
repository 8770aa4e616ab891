use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use serde_json::json;
use simcse_core::data::{load_tsv, synth_sentences, synth_toy_corpus, write_tsv, Example, Schema};
use simcse_core::eval::{emit_report, similarity_heatmap, MetricReport, ReportFormat};
use simcse_core::experiments::{run_table, ExperimentConfig, ExperimentData, TableKind};
use simcse_core::objectives::Task;
use simcse_core::train::{
    checkpoint_encoder, load_checkpoint, save_checkpoint, task_metric, task_schema, Checkpoint, Inputs, Predictor,
    ProcedureRegistry, Split, TaskSplits,
};
use simcse_core::{Error, Rng};

use crate::config::{RunConfig, SeedSource, SEED_ENV};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const HISTORY_FILE: &str = "history.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TABLE_FILE: &str = "table.tsv";
pub const HEATMAP_FILE: &str = "heatmap.csv";

/// Config, overrides and seed as given on the command line.
pub struct RunArgs {
    pub config: PathBuf,
    pub overrides: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub init: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

struct Resolved {
    cfg: RunConfig,
    seed: u64,
    source: SeedSource,
}

fn resolve(args: &RunArgs) -> CliResult<Resolved> {
    let mut cfg = RunConfig::load(&args.config, &args.overrides)?;
    let env = std::env::var(SEED_ENV).ok();
    let (seed, source) = cfg.resolve_seed(args.seed, env.as_deref())?;
    if let Some(p) = &args.init {
        cfg.init = Some(std::path::absolute(p).map_err(|e| CliError::io(p, e))?);
    }
    cfg.validate()?;
    Ok(Resolved { cfg, seed, source })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// `<output_dir>/<utc timestamp>-<config hash>`, suffixed if taken.
fn create_run_dir(cfg: &RunConfig, explicit: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(dir) = explicit {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        return Ok(dir.to_path_buf());
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    let stem = format!("{}-{}", Utc::now().format("%Y%m%dT%H%M%SZ"), cfg.hash());
    for k in 0.. {
        let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
        let dir = cfg.output_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(&dir, e)),
        }
    }
    unreachable!()
}

fn file_digest(path: &Path) -> CliResult<serde_json::Value> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(json!({
        "path": path.display().to_string(),
        "bytes": bytes.len(),
        "crc32": format!("{:08x}", crc32fast::hash(&bytes)),
    }))
}

fn load(path: &Path, schema: Schema, strict: bool) -> CliResult<Vec<Example>> {
    Ok(load_tsv(path, schema, strict)?)
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

struct Loaded {
    inputs: Inputs,
    files: Vec<PathBuf>,
}

fn load_inputs(cfg: &RunConfig) -> CliResult<Loaded> {
    let d = &cfg.data;
    let mut files = Vec::new();
    let mut split = |task: Task, train: &Option<PathBuf>, dev: &Option<PathBuf>| -> CliResult<Option<Split>> {
        let schema = task_schema(task);
        let mut read = |p: &Option<PathBuf>| -> CliResult<Vec<Example>> {
            match p {
                Some(p) => {
                    files.push(p.clone());
                    load(p, schema, cfg.strict)
                }
                None => Ok(Vec::new()),
            }
        };
        let (train_ex, dev_ex) = (read(train)?, read(dev)?);
        if train.is_none() && dev.is_none() {
            return Ok(None);
        }
        Ok(Some(Split::new(train_ex, dev_ex)))
    };
    let splits = TaskSplits {
        sst: split(Task::Sst, &d.sst_train, &d.sst_dev)?,
        para: split(Task::Paraphrase, &d.para_train, &d.para_dev)?,
        sts: split(Task::Sts, &d.sts_train, &d.sts_dev)?,
    };
    let triplets = match &d.triplets {
        Some(p) => {
            files.push(p.clone());
            load(p, Schema::Triplet, cfg.strict)?
        }
        None => Vec::new(),
    };
    let sentences = match &d.sentences {
        Some(p) => {
            files.push(p.clone());
            read_lines(p)?.into_iter().filter(|l| !l.trim().is_empty()).collect()
        }
        None => Vec::new(),
    };
    let init = match &cfg.init {
        Some(p) => {
            files.push(p.clone());
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    Ok(Loaded {
        inputs: Inputs {
            splits,
            triplets,
            sentences,
            init,
        },
        files,
    })
}

/// Whether `ckpt` can score `task` meaningfully.
fn head_ready(ckpt: &Checkpoint, task: Task) -> bool {
    ckpt.trained_heads.contains(&task) || (task == Task::Sts && !ckpt.sts_head.learnable())
}

/// Stage metrics when the run recorded them, otherwise a final dev pass per usable head.
fn final_reports(ckpt: &Checkpoint, splits: &TaskSplits, model: &str) -> CliResult<Vec<MetricReport>> {
    if !ckpt.stage_metrics.is_empty() {
        return Ok(ckpt
            .stage_metrics
            .iter()
            .map(|m| {
                MetricReport::new(
                    format!("{model}/{}", m.stage),
                    m.task.name(),
                    m.metric,
                    m.value.unwrap_or(f64::NAN),
                    m.n,
                )
            })
            .collect());
    }
    let encoder = checkpoint_encoder(ckpt)?;
    let predictor = Predictor::new(&encoder, ckpt);
    let mut out = Vec::new();
    for task in Task::ALL {
        let Some(split) = splits.get(task) else { continue };
        if split.dev.is_empty() || !head_ready(ckpt, task) {
            continue;
        }
        match predictor.evaluate(task, &split.dev)?.report(model) {
            Ok(r) => out.push(r),
            Err(Error::UndefinedCorrelation(what)) => {
                log::warn!("{task} dev metric undefined: {what} has zero variance");
                out.push(MetricReport::new(model, task.name(), task_metric(task), f64::NAN, split.dev.len()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn history_tsv(ckpt: &Checkpoint) -> String {
    let mut out = String::from("stage\tepoch\tstep\tkey\tvalue\n");
    for r in &ckpt.history {
        let mut row = |key: &str, v: f64| {
            out.push_str(&format!("{}\t{}\t{}\t{key}\t{v}\n", r.stage, r.epoch, r.step));
        };
        if let Some(l) = r.train_loss {
            row("train_loss", l);
        }
        for (k, v) in &r.dev {
            row(&format!("dev.{k}"), *v);
        }
        if let Some(s) = r.score {
            row("score", s);
        }
    }
    out
}

fn write_manifest(
    dir: &Path,
    command: &str,
    res: &Resolved,
    files: &[PathBuf],
    started: &str,
    wall: f64,
    outputs: &[&str],
) -> CliResult<()> {
    let inputs = files.iter().map(|p| file_digest(p)).collect::<CliResult<Vec<_>>>()?;
    let outputs = outputs
        .iter()
        .map(|f| file_digest(&dir.join(f)))
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": res.seed,
        "seed_source": res.source,
        "config_hash": res.cfg.hash(),
        "config": res.cfg,
        "inputs": inputs,
        "outputs": outputs,
        "started_at": started,
        "wall_time_secs": wall,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), text + "\n")
}

pub fn train(procedure: &str, args: &RunArgs) -> CliResult<PathBuf> {
    let started = Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true);
    let clock = Instant::now();
    let proc = ProcedureRegistry::default().build(procedure)?;
    let res = resolve(args)?;
    let loaded = load_inputs(&res.cfg)?;
    log::info!("training {procedure} with seed {} ({:?})", res.seed, res.source);
    let ckpt = proc.run(&res.cfg.pipeline, &loaded.inputs)?;
    let reports = final_reports(&ckpt, &loaded.inputs.splits, procedure)?;

    let dir = create_run_dir(&res.cfg, args.run_dir.as_deref())?;
    save_checkpoint(&ckpt, &dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join(METRICS_FILE), emit_report(&reports, ReportFormat::Tsv))?;
    write_file(&dir.join(HISTORY_FILE), history_tsv(&ckpt))?;
    write_file(&dir.join(CONFIG_FILE), res.cfg.to_json() + "\n")?;
    let outputs = [CHECKPOINT_FILE, METRICS_FILE, HISTORY_FILE, CONFIG_FILE];
    let command = format!("train {procedure}");
    write_manifest(&dir, &command, &res, &loaded.files, &started, clock.elapsed().as_secs_f64(), &outputs)?;
    print!("{}", emit_report(&reports, ReportFormat::Pretty));
    println!("run directory: {}", dir.display());
    Ok(dir)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub task: Task,
    pub out: Option<PathBuf>,
    pub bins: usize,
    pub lenient: bool,
    pub tsv: bool,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if !head_ready(&ckpt, a.task) {
        let trained: Vec<&str> = ckpt.trained_heads.iter().map(|t| t.name()).collect();
        return Err(CliError::Usage(format!(
            "checkpoint {} has no trained {} head (trained heads: {})",
            a.checkpoint.display(),
            a.task,
            if trained.is_empty() { "none".to_string() } else { trained.join(", ") }
        )));
    }
    let examples = load(&a.data, task_schema(a.task), !a.lenient)?;
    let encoder = checkpoint_encoder(&ckpt)?;
    let evaluation = Predictor::new(&encoder, &ckpt).evaluate(a.task, &examples)?;
    let report = evaluation.report(&ckpt.stage.to_string())?;
    let format = if a.tsv { ReportFormat::Tsv } else { ReportFormat::Pretty };
    print!("{}", emit_report(&[report], format));

    if a.task == Task::Sts {
        let dir = match &a.out {
            Some(d) => d.clone(),
            None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let heat = similarity_heatmap(&evaluation.targets, &evaluation.preds, a.bins)?;
        let path = dir.join(HEATMAP_FILE);
        write_file(&path, heat.to_csv())?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

pub fn embed(checkpoint: &Path, sentences: &Path, out: Option<&Path>) -> CliResult<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let lines = read_lines(sentences)?;
    let encoder = checkpoint_encoder(&ckpt)?;
    let rows = Predictor::new(&encoder, &ckpt).embed(&lines)?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| CliError::io(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').has_headers(false).from_writer(sink);
    let fail = |e: csv::Error| CliError::Data(format!("writing embeddings: {e}"));
    for (text, row) in lines.iter().zip(&rows) {
        let mut record = Vec::with_capacity(row.len() + 1);
        record.push(text.clone());
        record.extend(row.iter().map(f64::to_string));
        w.write_record(&record).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Data(format!("writing embeddings: {e}")))
}

/// Dataset kind for `synth`: a schema, a task alias, or plain sentences.
pub fn synth(kind: &str, size: usize, seed: u64, out: &Path) -> CliResult<()> {
    if size == 0 {
        return Err(CliError::Usage("synthetic corpus size must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    if kind == "sentences" {
        let mut text = synth_sentences(size, &mut rng).join("\n");
        text.push('\n');
        return write_file(out, text);
    }
    let schema = match kind {
        "sst" => Schema::Classification,
        "paraphrase" => Schema::PairLabeled,
        "sts" => Schema::PairScored,
        "nli" => Schema::Triplet,
        other => other.parse::<Schema>().map_err(|_| {
            CliError::Usage(format!(
                "unknown synth kind {other:?} (expected sst, paraphrase, sts, nli, sentences or a schema name)"
            ))
        })?,
    };
    let examples = synth_toy_corpus(schema, size, &mut rng)?;
    Ok(write_tsv(out, &examples)?)
}

pub struct ExperimentArgs {
    pub run: RunArgs,
    pub table: TableKind,
    pub train_size: usize,
    pub dev_size: usize,
    pub paraphrase_epochs: Option<usize>,
}

/// Runs one comparison grid. Synthetic data stands in for tasks without data paths.
pub fn experiment(a: &ExperimentArgs) -> CliResult<PathBuf> {
    let started = Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true);
    let clock = Instant::now();
    let res = resolve(&a.run)?;
    let loaded = load_inputs(&res.cfg)?;
    let mut data = ExperimentData::synthetic(a.train_size, a.dev_size, res.seed)?;
    let given = loaded.inputs.splits;
    for task in Task::ALL {
        if let Some(s) = given.get(task) {
            log::info!("using {task} data from the config");
            match task {
                Task::Sst => data.splits.sst = Some(s.clone()),
                Task::Paraphrase => data.splits.para = Some(s.clone()),
                Task::Sts => data.splits.sts = Some(s.clone()),
            }
        }
    }
    if !loaded.inputs.triplets.is_empty() {
        data.triplets = loaded.inputs.triplets;
    }
    let mut exp = ExperimentConfig::new(res.cfg.pipeline.clone());
    if let Some(e) = a.paraphrase_epochs {
        exp.paraphrase_epochs = e;
    }
    let table = run_table(a.table, &exp, &data)?;

    let dir = create_run_dir(&res.cfg, a.run.run_dir.as_deref())?;
    write_file(&dir.join(TABLE_FILE), table.to_tsv())?;
    write_file(&dir.join(METRICS_FILE), emit_report(&table.reports, ReportFormat::Tsv))?;
    write_file(&dir.join(CONFIG_FILE), res.cfg.to_json() + "\n")?;
    let command = format!("experiment {}", a.table.name());
    let outputs = [TABLE_FILE, METRICS_FILE, CONFIG_FILE];
    write_manifest(&dir, &command, &res, &loaded.files, &started, clock.elapsed().as_secs_f64(), &outputs)?;
    print!("{}", table.to_tsv());
    println!("run directory: {}", dir.display());
    Ok(dir)
}
