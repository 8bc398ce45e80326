//! Experiment orchestration: configuration, run directories with resumable
//! checkpoints, replay of saved genomes and cross-run analysis.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    exploration_density, mann_whitney_u, median, mi_relevance_table, train_som, AnalysisError,
    DensityMap, MannWhitney, MiRow, SomParams,
};
use crate::evolution::controller::{build_controller, ControllerSpec, Genome};
use crate::evolution::{
    EvaluationResult, EvolutionConfig, EvolutionError, Evolver, GaParams, GaState,
    GenerationReport, Individual, Method, NoveltyParams, SdbcParams, TrialSummary,
};
use crate::novelty::NoveltyArchive;
use crate::sdbc::{
    apply_standardisation, compute_standardisation, FeatureWeights, RawCharacterisation,
};
use crate::simcore::{write_trajectory_csv, TrajectoryRow};
use crate::tasks::{build_task, Task, TaskError, TaskKind, TaskParams, TASK_SPECIFIC_LEN};

/// Prefix of environment variables that override config keys; `__` separates
/// nested keys, e.g. `SDBC_GA__POPULATION=50`.
pub const ENV_PREFIX: &str = "SDBC_";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("environment override {var}: {reason}")]
    Env { var: String, reason: String },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("run directory {0} is incomplete")]
    Incomplete(PathBuf),
    #[error("genome topology {got} does not match task `{task}` ({expected})")]
    SpecMismatch {
        task: TaskKind,
        got: ControllerSpec,
        expected: ControllerSpec,
    },
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl ToString) -> ExperimentError {
    ExperimentError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn invalid(field: &str, reason: impl ToString) -> ExperimentError {
    ExperimentError::Invalid {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub method: Method,
    /// Master seed; run `i` of a batch uses `seed + i`.
    pub seed: u64,
    pub runs: usize,
    pub output: PathBuf,
    /// Also write every genome of every generation.
    pub dump_population: bool,
    pub ga: GaParams,
    pub novelty: NoveltyParams,
    pub sdbc: SdbcParams,
    pub tasks: TaskParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::ResourceSharing,
            method: Method::NsSdPlus,
            seed: 1,
            runs: 1,
            output: PathBuf::from("runs"),
            dump_population: false,
            ga: GaParams::default(),
            novelty: NoveltyParams::default(),
            sdbc: SdbcParams::default(),
            tasks: TaskParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.runs == 0 {
            return Err(invalid("runs", "must be at least 1"));
        }
        let as_field = |e: EvolutionError| match e {
            EvolutionError::InvalidParams { field, reason } => {
                ExperimentError::Invalid { field, reason }
            }
            other => ExperimentError::Evolution(other),
        };
        self.ga.validate().map_err(as_field)?;
        self.novelty.validate().map_err(as_field)?;
        self.sdbc.validate().map_err(as_field)?;
        if self.novelty.k >= self.ga.population && self.method.uses_novelty() {
            // k-NN still works against the archive, but early generations would average everything
            return Err(invalid("novelty.k", "must be smaller than ga.population"));
        }
        for kind in TaskKind::ALL {
            build_task(kind, &self.tasks).map_err(|e| match e {
                TaskError::InvalidParams { field, reason } => ExperimentError::Invalid {
                    field: format!("tasks.{field}"),
                    reason,
                },
                other => ExperimentError::Task(other),
            })?;
        }
        Ok(())
    }

    pub fn evolution(&self) -> EvolutionConfig {
        EvolutionConfig {
            method: self.method,
            seed: self.seed,
            ga: self.ga.clone(),
            novelty: self.novelty.clone(),
            sdbc: self.sdbc.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Directory of the run that uses `seed`.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output.join(format!(
            "{}-{}-s{}",
            self.task,
            method_slug(self.method),
            seed
        ))
    }
}

/// File-name friendly method name.
pub fn method_slug(m: Method) -> &'static str {
    match m {
        Method::NsSdPlus => "ns-sd-plus",
        other => other.as_str(),
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `SDBC_A__B=value` overrides onto the config tree.
pub fn apply_env_overrides<I>(table: &mut toml::Table, vars: I) -> Result<(), ExperimentError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (var, raw) in vars {
        let path: Vec<String> = var[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(ExperimentError::Env {
                var,
                reason: "empty key segment".into(),
            });
        }
        let mut node = &mut *table;
        for key in &path[..path.len() - 1] {
            let entry = node
                .entry(key.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = match entry {
                toml::Value::Table(t) => t,
                _ => {
                    return Err(ExperimentError::Env {
                        var,
                        reason: format!("`{key}` is not a table"),
                    })
                }
            };
        }
        let leaf = path.last().expect("non-empty path").clone();
        node.insert(leaf, parse_env_value(&raw));
    }
    Ok(())
}

/// Parses config text plus environment overrides, then validates.
pub fn parse_config<I>(text: &str, env: I) -> Result<ExperimentConfig, ExperimentError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
    apply_env_overrides(&mut table, env)?;
    if let Some(v) = table.get("task") {
        let s = v
            .as_str()
            .ok_or_else(|| invalid("task", "must be a string"))?;
        s.parse::<TaskKind>().map_err(|e| invalid("task", e))?;
    }
    if let Some(v) = table.get("method") {
        let s = v
            .as_str()
            .ok_or_else(|| invalid("method", "must be a string"))?;
        s.parse::<Method>().map_err(|e| invalid("method", e))?;
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ExperimentError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config<I>(path: Option<&Path>, env: I) -> Result<ExperimentConfig, ExperimentError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
        None => String::new(),
    };
    parse_config(&text, env)
}

/// Keys whose default values are published rather than assumed.
const PUBLISHED: &[(&str, &str)] = &[
    ("ga", "trials"),
    ("sdbc", "delta"),
    ("predator_prey", "predator_starts"),
];

/// Keys that are plumbing rather than model parameters.
const PLUMBING: &[&str] = &[
    "task",
    "method",
    "seed",
    "runs",
    "output",
    "dump_population",
    "layout",
];

/// Default config as TOML, each parameter annotated with where its value comes from.
pub fn print_defaults() -> String {
    let text = ExperimentConfig::default().to_toml();
    let mut out = String::from(
        "# Default experiment configuration.\n\
         # Values marked assumed are stand-ins; published ones are fixed by the original study.\n\n",
    );
    let mut section = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let Some((key, _)) = trimmed.split_once(" = ") else {
            out.push_str(line);
            out.push('\n');
            continue;
        };
        let last_section = section.rsplit('.').next().unwrap_or("");
        let note = if PLUMBING.contains(&key) {
            ""
        } else if PUBLISHED
            .iter()
            .any(|(s, k)| *s == last_section && *k == key)
        {
            "  # published"
        } else {
            "  # assumed"
        };
        out.push_str(line);
        out.push_str(note);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SavedIndividual {
    id: u64,
    genome: Genome,
    fitness: f64,
    sdbc: Vec<f64>,
    task_specific: [f64; TASK_SPECIFIC_LEN],
    trials: Vec<TrialSummary>,
}

impl SavedIndividual {
    fn save(ind: &Individual) -> Self {
        Self {
            id: ind.id,
            genome: ind.genome.clone(),
            fitness: ind.eval.fitness,
            sdbc: ind.eval.sdbc.values.clone(),
            task_specific: ind.eval.task_specific,
            trials: ind.eval.trials.clone(),
        }
    }

    fn restore(self, task: &dyn Task) -> Individual {
        Individual {
            id: self.id,
            genome: self.genome,
            eval: EvaluationResult {
                fitness: self.fitness,
                sdbc: RawCharacterisation {
                    values: self.sdbc,
                    schema: task.schema().clone(),
                },
                task_specific: self.task_specific,
                trials: self.trials,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    complete: bool,
    generation: usize,
    next_id: u64,
    population: Vec<SavedIndividual>,
    archive: NoveltyArchive,
    weights: Option<FeatureWeights>,
    best: Option<SavedIndividual>,
    /// Byte length of every append-only log at checkpoint time.
    files: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub task: TaskKind,
    pub method: Method,
    pub seed: u64,
    pub controller: String,
    pub genome_len: usize,
    pub sdbc_names: Vec<String>,
    pub task_specific_names: Vec<String>,
}

pub const TASK_SPECIFIC_NAMES: [&str; TASK_SPECIFIC_LEN] = ["ts0", "ts1", "ts2", "ts3"];
const LOG_FILES: [&str; 5] = [
    "log.csv",
    "timing.csv",
    "samples.csv",
    "features.csv",
    "population.csv",
];

/// Summary of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub seed: u64,
    pub best_fitness: f64,
    pub generations: usize,
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn csv_line(fields: impl IntoIterator<Item = String>) -> String {
    let mut out = String::new();
    for (i, f) in fields.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if f.contains([',', '"', '\n', '\r']) {
            out.push('"');
            out.push_str(&f.replace('"', "\"\""));
            out.push('"');
        } else {
            out.push_str(&f);
        }
    }
    out.push('\n');
    out
}

struct RunFiles {
    dir: PathBuf,
    writers: BTreeMap<&'static str, BufWriter<File>>,
}

impl RunFiles {
    fn open(
        dir: &Path,
        truncate_to: Option<&BTreeMap<String, u64>>,
    ) -> Result<Self, ExperimentError> {
        let mut writers = BTreeMap::new();
        for name in LOG_FILES {
            let path = dir.join(name);
            let file = match truncate_to {
                Some(lengths) => {
                    let f = OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(io_err(&path))?;
                    f.set_len(lengths.get(name).copied().unwrap_or(0))
                        .map_err(io_err(&path))?;
                    f
                }
                None => File::create(&path).map_err(io_err(&path))?,
            };
            writers.insert(name, BufWriter::new(file));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            writers,
        })
    }

    fn write(&mut self, name: &'static str, text: &str) -> Result<(), ExperimentError> {
        let path = self.dir.join(name);
        self.writers
            .get_mut(name)
            .expect("known log file")
            .write_all(text.as_bytes())
            .map_err(io_err(&path))
    }

    fn flush_lengths(&mut self) -> Result<BTreeMap<String, u64>, ExperimentError> {
        let mut lengths = BTreeMap::new();
        for (name, w) in self.writers.iter_mut() {
            let path = self.dir.join(name);
            w.flush().map_err(io_err(&path))?;
            let len = w.get_ref().metadata().map_err(io_err(&path))?.len();
            lengths.insert(name.to_string(), len);
        }
        Ok(lengths)
    }
}

fn headers(files: &mut RunFiles, meta: &RunMetadata) -> Result<(), ExperimentError> {
    files.write(
        "log.csv",
        "generation,best_fitness,mean_fitness,best_id,best_so_far,archive_size\n",
    )?;
    files.write("timing.csv", "generation,wall_seconds\n")?;
    let mut cols: Vec<String> = ["generation", "id", "fitness", "novelty", "rank"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(meta.task_specific_names.iter().cloned());
    cols.extend(meta.sdbc_names.iter().cloned());
    files.write("samples.csv", &csv_line(cols))?;
    files.write(
        "features.csv",
        "generation,index,feature,mu,sigma,mi,weight\n",
    )?;
    files.write("population.csv", "generation,id,genome\n")
}

fn log_generation(
    files: &mut RunFiles,
    report: &GenerationReport,
    evaluated: &[Individual],
    names: &[String],
    dump_population: bool,
    seconds: f64,
) -> Result<(), ExperimentError> {
    let g = report.generation;
    files.write(
        "log.csv",
        &format!(
            "{g},{},{},{},{},{}\n",
            report.best_fitness,
            report.mean_fitness,
            report.best_id,
            report.best_so_far,
            report.archive_size
        ),
    )?;
    files.write("timing.csv", &format!("{g},{seconds:.6}\n"))?;
    let mut rows = String::new();
    for (rec, ind) in report.individuals.iter().zip(evaluated) {
        let mut fields = vec![
            g.to_string(),
            rec.id.to_string(),
            rec.fitness.to_string(),
            rec.novelty.to_string(),
            rec.rank.to_string(),
        ];
        fields.extend(ind.eval.task_specific.iter().map(f64::to_string));
        fields.extend(ind.eval.sdbc.values.iter().map(f64::to_string));
        rows.push_str(&csv_line(fields));
    }
    files.write("samples.csv", &rows)?;
    if let (Some(c), Some(mi), Some(w)) = (&report.coefficients, &report.mi, &report.weights) {
        let mut rows = String::new();
        for (k, name) in names.iter().enumerate() {
            rows.push_str(&csv_line([
                g.to_string(),
                k.to_string(),
                name.clone(),
                c.mu[k].to_string(),
                c.sigma[k].to_string(),
                mi[k].to_string(),
                w[k].to_string(),
            ]));
        }
        files.write("features.csv", &rows)?;
    }
    if dump_population {
        let mut rows = String::new();
        for ind in evaluated {
            let genome: Vec<String> = ind.genome.0.iter().map(f64::to_string).collect();
            rows.push_str(&format!("{g},{},{}\n", ind.id, genome.join(" ")));
        }
        files.write("population.csv", &rows)?;
    }
    Ok(())
}

/// Saved controller with enough header to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenomeFile {
    pub task: TaskKind,
    pub spec: ControllerSpec,
    pub generation: usize,
    pub id: u64,
    pub fitness: f64,
    pub genome: Genome,
}

impl GenomeFile {
    pub fn to_text(&self) -> String {
        let weights: Vec<String> = self.genome.0.iter().map(f64::to_string).collect();
        format!(
            "# sdbc genome\n# task = {}\n# spec = {}\n# generation = {}\n# id = {}\n# fitness = {}\n{}\n",
            self.task,
            self.spec,
            self.generation,
            self.id,
            self.fitness,
            weights.join(" ")
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ExperimentError> {
        let mut header = BTreeMap::new();
        let mut weights = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            for tok in line.split_whitespace() {
                weights.push(
                    tok.parse::<f64>()
                        .map_err(|e| format_err(path, format!("weight `{tok}`: {e}")))?,
                );
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| format_err(path, format!("missing header `{k}`")))
        };
        let task: TaskKind = get("task")?.parse().map_err(|e| format_err(path, e))?;
        let spec_text = get("spec")?;
        let dims: Vec<usize> = spec_text
            .split('-')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| format_err(path, format!("spec `{spec_text}`: {e}")))?;
        let [inputs, hidden, outputs] = dims[..] else {
            return Err(format_err(
                path,
                format!("spec `{spec_text}` needs three layers"),
            ));
        };
        let spec = ControllerSpec::new(inputs, hidden, outputs);
        if weights.len() != spec.genome_len() {
            return Err(format_err(
                path,
                format!(
                    "{} weights for spec {spec} (needs {})",
                    weights.len(),
                    spec.genome_len()
                ),
            ));
        }
        let num = |k: &str| -> Result<String, ExperimentError> { get(k).cloned() };
        Ok(Self {
            task,
            spec,
            generation: num("generation")?
                .parse()
                .map_err(|e| format_err(path, e))?,
            id: num("id")?.parse().map_err(|e| format_err(path, e))?,
            fitness: num("fitness")?.parse().map_err(|e| format_err(path, e))?,
            genome: Genome(weights),
        })
    }

    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }
}

/// Runs (or resumes) a single run in `dir`, processing at most `limit`
/// generations in this call. Returns `None` when the limit stopped it early.
pub fn run_single_limited(
    config: &ExperimentConfig,
    dir: &Path,
    limit: Option<usize>,
) -> Result<Option<RunSummary>, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let task = build_task(config.task, &config.tasks)?;
    let evolver = Evolver::new(task.clone(), config.evolution())?;
    let checkpoint_path = dir.join("checkpoint.json");

    let previous: Option<Checkpoint> = if checkpoint_path.exists() {
        let text = fs::read_to_string(&checkpoint_path).map_err(io_err(&checkpoint_path))?;
        Some(serde_json::from_str(&text).map_err(|e| format_err(&checkpoint_path, e))?)
    } else {
        None
    };
    if let Some(cp) = &previous {
        if cp.complete {
            return Ok(Some(RunSummary {
                dir: dir.to_path_buf(),
                seed: config.seed,
                best_fitness: cp.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.fitness),
                generations: cp.generation,
            }));
        }
    }

    let meta = RunMetadata {
        version: VERSION.to_string(),
        task: config.task,
        method: config.method,
        seed: config.seed,
        controller: evolver.spec().to_string(),
        genome_len: evolver.spec().genome_len(),
        sdbc_names: task.schema().names().to_vec(),
        task_specific_names: TASK_SPECIFIC_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let snapshot = ExperimentConfig {
        runs: 1,
        ..config.clone()
    };

    let (mut state, mut files) = match previous {
        Some(cp) => {
            let files = RunFiles::open(dir, Some(&cp.files))?;
            let state = GaState {
                generation: cp.generation,
                population: cp
                    .population
                    .into_iter()
                    .map(|s| s.restore(task.as_ref()))
                    .collect(),
                archive: cp.archive,
                weights: cp.weights,
                next_id: cp.next_id,
                best: cp.best.map(|s| s.restore(task.as_ref())),
            };
            (state, files)
        }
        None => {
            write_atomic(&dir.join("config.toml"), snapshot.to_toml().as_bytes())?;
            let meta_json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
            write_atomic(&dir.join("run.json"), meta_json.as_bytes())?;
            let mut files = RunFiles::open(dir, None)?;
            headers(&mut files, &meta)?;
            (evolver.init()?, files)
        }
    };

    let mut processed = 0;
    while !evolver.is_finished(&state) {
        if limit.is_some_and(|l| processed >= l) {
            return Ok(None);
        }
        let started = Instant::now();
        let evaluated = state.population.clone();
        let report = evolver.run_generation(&mut state)?;
        let seconds = started.elapsed().as_secs_f64();
        log_generation(
            &mut files,
            &report,
            &evaluated,
            &meta.sdbc_names,
            config.dump_population,
            seconds,
        )?;
        processed += 1;
        let complete = evolver.is_finished(&state);
        if complete {
            finish_run(dir, &state, config.task, evolver.spec())?;
        }
        let cp = Checkpoint {
            complete,
            generation: state.generation,
            next_id: state.next_id,
            population: state.population.iter().map(SavedIndividual::save).collect(),
            archive: state.archive.clone(),
            weights: state.weights.clone(),
            best: state.best.as_ref().map(SavedIndividual::save),
            files: files.flush_lengths()?,
        };
        let json = serde_json::to_string(&cp).expect("checkpoint serialises");
        write_atomic(&checkpoint_path, json.as_bytes())?;
    }
    Ok(Some(RunSummary {
        dir: dir.to_path_buf(),
        seed: config.seed,
        best_fitness: state
            .best
            .as_ref()
            .map_or(f64::NEG_INFINITY, |b| b.eval.fitness),
        generations: state.generation,
    }))
}

fn finish_run(
    dir: &Path,
    state: &GaState,
    task: TaskKind,
    spec: ControllerSpec,
) -> Result<(), ExperimentError> {
    let archive_path = dir.join("archive.csv");
    let mut buf = Vec::new();
    state
        .archive
        .write_csv(&mut buf)
        .map_err(|e| format_err(&archive_path, e))?;
    write_atomic(&archive_path, &buf)?;
    if let Some(best) = &state.best {
        let file = GenomeFile {
            task,
            spec,
            generation: state.generation - 1,
            id: best.id,
            fitness: best.eval.fitness,
            genome: best.genome.clone(),
        };
        write_atomic(&dir.join("best_genome.txt"), file.to_text().as_bytes())?;
        let mut rows = String::from("trial,seed,fitness,steps\n");
        for (i, t) in best.eval.trials.iter().enumerate() {
            rows.push_str(&format!("{i},{},{},{}\n", t.seed, t.fitness, t.steps));
        }
        write_atomic(&dir.join("best.csv"), rows.as_bytes())?;
    }
    Ok(())
}

pub fn run_single(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary, ExperimentError> {
    Ok(run_single_limited(config, dir, None)?.expect("no limit"))
}

pub use rayon::ThreadPool;

/// Worker pool for runs and evaluations; `0` is treated as `1`.
pub fn thread_pool(threads: usize) -> ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool")
}

/// Runs `config.runs` independent runs with seeds `seed, seed + 1, ...` on a
/// pool of `parallel` worker threads.
pub fn run_experiment(
    config: &ExperimentConfig,
    parallel: usize,
) -> Result<Vec<RunSummary>, ExperimentError> {
    config.validate()?;
    thread_pool(parallel).install(|| {
        (0..config.runs as u64)
            .into_par_iter()
            .map(|i| {
                let cfg = ExperimentConfig {
                    seed: config.seed + i,
                    ..config.clone()
                };
                run_single(&cfg, &cfg.run_dir(cfg.seed))
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayResult {
    pub fitness: f64,
    pub steps: usize,
    pub task_specific: [f64; TASK_SPECIFIC_LEN],
    pub trajectory: Vec<TrajectoryRow>,
}

/// One deterministic trial of a saved genome.
pub fn replay(
    genome: &GenomeFile,
    tasks: &TaskParams,
    seed: u64,
) -> Result<ReplayResult, ExperimentError> {
    let task = build_task(genome.task, tasks)?;
    let expected = task.controller_spec(genome.spec.hidden);
    if genome.spec != expected {
        return Err(ExperimentError::SpecMismatch {
            task: genome.task,
            got: genome.spec,
            expected,
        });
    }
    let mut controller =
        build_controller(&genome.genome, genome.spec).map_err(EvolutionError::from)?;
    let mut trajectory = Vec::new();
    let rec = task.run_trial(&mut controller, seed, Some(&mut trajectory))?;
    Ok(ReplayResult {
        fitness: rec.fitness,
        steps: rec.steps,
        task_specific: rec.task_specific,
        trajectory,
    })
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<(), ExperimentError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_trajectory_csv(rows, BufWriter::new(file)).map_err(io_err(path))
}

/// One evaluated individual as read back from `samples.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub generation: usize,
    pub id: u64,
    pub fitness: f64,
    pub sdbc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_so_far: f64,
}

/// Everything analysis needs from one completed run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub dir: PathBuf,
    pub meta: RunMetadata,
    pub log: Vec<LogRow>,
    pub samples: Vec<SampleRow>,
    /// MI vector per generation; empty for methods that do not estimate it.
    pub mi: Vec<Vec<f64>>,
}

impl RunData {
    pub fn best_fitness(&self) -> f64 {
        self.log.last().map_or(f64::NEG_INFINITY, |r| r.best_so_far)
    }
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>, ExperimentError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, e))
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    path: &Path,
) -> Result<T, ExperimentError>
where
    T::Err: std::fmt::Display,
{
    rec.get(i)
        .ok_or_else(|| format_err(path, format!("missing column {i}")))?
        .parse()
        .map_err(|e| format_err(path, format!("column {i}: {e}")))
}

pub fn load_run(dir: &Path) -> Result<RunData, ExperimentError> {
    let cp_path = dir.join("checkpoint.json");
    let complete = fs::read_to_string(&cp_path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("complete").and_then(serde_json::Value::as_bool))
        .unwrap_or(false);
    if !complete {
        return Err(ExperimentError::Incomplete(dir.to_path_buf()));
    }
    let meta_path = dir.join("run.json");
    let meta: RunMetadata =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)
            .map_err(|e| format_err(&meta_path, e))?;

    let log_path = dir.join("log.csv");
    let log = read_rows(&log_path)?
        .iter()
        .map(|r| {
            Ok(LogRow {
                generation: field(r, 0, &log_path)?,
                best_fitness: field(r, 1, &log_path)?,
                mean_fitness: field(r, 2, &log_path)?,
                best_so_far: field(r, 4, &log_path)?,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let samples_path = dir.join("samples.csv");
    let skip = 5 + TASK_SPECIFIC_LEN;
    let samples = read_rows(&samples_path)?
        .iter()
        .map(|r| {
            let sdbc = (skip..skip + meta.sdbc_names.len())
                .map(|i| field(r, i, &samples_path))
                .collect::<Result<Vec<f64>, _>>()?;
            Ok(SampleRow {
                generation: field(r, 0, &samples_path)?,
                id: field(r, 1, &samples_path)?,
                fitness: field(r, 2, &samples_path)?,
                sdbc,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let features_path = dir.join("features.csv");
    let mut mi: Vec<Vec<f64>> = Vec::new();
    for r in read_rows(&features_path)? {
        let g: usize = field(&r, 0, &features_path)?;
        let k: usize = field(&r, 1, &features_path)?;
        let v: f64 = field(&r, 5, &features_path)?;
        while mi.len() <= g {
            mi.push(vec![0.0; meta.sdbc_names.len()]);
        }
        if k >= meta.sdbc_names.len() {
            return Err(format_err(
                &features_path,
                format!("feature index {k} out of range"),
            ));
        }
        mi[g][k] = v;
    }
    Ok(RunData {
        dir: dir.to_path_buf(),
        meta,
        log,
        samples,
        mi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeOptions {
    pub som: SomParams,
    pub som_seed: u64,
    /// Evenly strided subset of the pooled samples used to train the map.
    pub max_training_samples: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            som: SomParams::default(),
            som_seed: 1,
            max_training_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairComparison {
    pub a: Method,
    pub b: Method,
    pub test: MannWhitney,
}

/// Analysis of all runs of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAnalysis {
    pub task: TaskKind,
    /// Per-run best fitness grouped by method.
    pub best: BTreeMap<Method, Vec<f64>>,
    pub mi_tables: BTreeMap<Method, Vec<MiRow>>,
    pub density: DensityMap,
    pub comparisons: Vec<PairComparison>,
}

impl TaskAnalysis {
    pub fn median_best(&self, m: Method) -> Option<f64> {
        self.best.get(&m).and_then(|v| median(v))
    }

    pub fn method_index(&self, m: Method) -> Option<usize> {
        self.density.methods.iter().position(|n| n == m.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSummary {
    pub tasks: Vec<TaskAnalysis>,
    pub skipped: Vec<(PathBuf, String)>,
}

impl PartialOrd for Method {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Method {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let pos = |m: &Method| Method::ALL.iter().position(|x| x == m);
        pos(self).cmp(&pos(other))
    }
}

/// Analyses loaded runs and, when `out` is given, writes the tables and maps there.
pub fn analyze_runs(
    runs: &[RunData],
    options: &AnalyzeOptions,
    out: Option<&Path>,
) -> Result<Vec<TaskAnalysis>, ExperimentError> {
    let mut by_task: BTreeMap<&'static str, Vec<&RunData>> = BTreeMap::new();
    for r in runs {
        by_task.entry(r.meta.task.as_str()).or_default().push(r);
    }
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(io_err(out))?;
    }
    let mut curves = String::from("task,method,generation,runs,mean,median,min,max\n");
    let mut best_csv = String::from("task,method,seed,best_fitness\n");
    let mut mw_csv =
        String::from("task,method_a,method_b,n_a,n_b,median_a,median_b,u,p_two_sided,p_greater\n");

    let mut results = Vec::new();
    for runs in by_task.values() {
        let task = runs[0].meta.task;
        let mut by_method: BTreeMap<Method, Vec<&RunData>> = BTreeMap::new();
        for r in runs {
            by_method.entry(r.meta.method).or_default().push(r);
        }
        for rs in by_method.values_mut() {
            rs.sort_by_key(|r| r.meta.seed);
        }

        let mut best = BTreeMap::new();
        for (m, rs) in &by_method {
            let values: Vec<f64> = rs.iter().map(|r| r.best_fitness()).collect();
            for (r, v) in rs.iter().zip(&values) {
                best_csv.push_str(&format!("{task},{m},{},{v}\n", r.meta.seed));
            }
            best.insert(*m, values);
            let gens = rs.iter().map(|r| r.log.len()).max().unwrap_or(0);
            for g in 0..gens {
                let vals: Vec<f64> = rs
                    .iter()
                    .filter_map(|r| r.log.get(g))
                    .map(|l| l.best_so_far)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                curves.push_str(&format!(
                    "{task},{m},{g},{},{mean},{},{min},{max}\n",
                    vals.len(),
                    median(&vals).unwrap_or(f64::NAN)
                ));
            }
        }

        let names = runs[0].meta.sdbc_names.clone();
        let mut mi_tables = BTreeMap::new();
        for (m, rs) in &by_method {
            let logs: Vec<Vec<Vec<f64>>> = rs
                .iter()
                .map(|r| r.mi.clone())
                .filter(|mi| !mi.is_empty())
                .collect();
            if logs.is_empty() {
                continue;
            }
            let table = mi_relevance_table(&names, &logs)?;
            if let Some(out) = out {
                let mut text = String::from("feature,mean_mi,sd_mi\n");
                for row in &table {
                    text.push_str(&csv_line([
                        row.feature.clone(),
                        row.mean.to_string(),
                        row.sd.to_string(),
                    ]));
                }
                let path = out.join(format!("mi_{task}_{}.csv", method_slug(*m)));
                fs::write(&path, text).map_err(io_err(&path))?;
            }
            mi_tables.insert(*m, table);
        }

        let mut comparisons = Vec::new();
        let methods: Vec<Method> = best.keys().copied().collect();
        for (i, &a) in methods.iter().enumerate() {
            for &b in &methods[i + 1..] {
                let (va, vb) = (&best[&a], &best[&b]);
                let test = mann_whitney_u(va, vb)?;
                mw_csv.push_str(&format!(
                    "{task},{a},{b},{},{},{},{},{},{},{}\n",
                    va.len(),
                    vb.len(),
                    median(va).unwrap_or(f64::NAN),
                    median(vb).unwrap_or(f64::NAN),
                    test.u,
                    test.p_two_sided,
                    test.p_greater
                ));
                comparisons.push(PairComparison { a, b, test });
            }
        }

        let density = exploration_map(&by_method, options)?;
        if let Some(out) = out {
            let path = out.join(format!("som_{task}.csv"));
            fs::write(&path, density.to_csv()).map_err(io_err(&path))?;
            for (i, m) in by_method.keys().enumerate() {
                let path = out.join(format!("som_{task}_{}.svg", method_slug(*m)));
                fs::write(&path, density.to_svg(i)).map_err(io_err(&path))?;
            }
        }
        results.push(TaskAnalysis {
            task,
            best,
            mi_tables,
            density,
            comparisons,
        });
    }
    if let Some(out) = out {
        for (name, text) in [
            ("curves.csv", &curves),
            ("best_fitness.csv", &best_csv),
            ("mann_whitney.csv", &mw_csv),
        ] {
            let path = out.join(name);
            fs::write(&path, text).map_err(io_err(&path))?;
        }
    }
    Ok(results)
}

/// SOM trained on every method's samples, standardised with pooled coefficients.
fn exploration_map(
    by_method: &BTreeMap<Method, Vec<&RunData>>,
    options: &AnalyzeOptions,
) -> Result<DensityMap, ExperimentError> {
    let pooled: Vec<&[f64]> = by_method
        .values()
        .flatten()
        .flat_map(|r| r.samples.iter().map(|s| s.sdbc.as_slice()))
        .collect();
    let coeffs = compute_standardisation(&pooled).map_err(|_| AnalysisError::EmptySamples)?;
    let standardise =
        |x: &[f64]| apply_standardisation(x, &coeffs).expect("lengths checked by the run schema");
    let stride = pooled
        .len()
        .div_ceil(options.max_training_samples.max(1))
        .max(1);
    let training: Vec<Vec<f64>> = pooled
        .iter()
        .step_by(stride)
        .map(|x| standardise(x))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.som_seed);
    let map = train_som(&training, &options.som, &mut rng)?;
    let per_method: Vec<(String, Vec<(Vec<f64>, f64)>)> = by_method
        .iter()
        .map(|(m, rs)| {
            let samples = rs
                .iter()
                .flat_map(|r| r.samples.iter().map(|s| (standardise(&s.sdbc), s.fitness)))
                .collect();
            (m.as_str().to_string(), samples)
        })
        .collect();
    Ok(exploration_density(&map, &per_method))
}

/// Loads every directory, skipping (and reporting) incomplete ones, then analyses.
pub fn analyze(
    dirs: &[PathBuf],
    options: &AnalyzeOptions,
    out: &Path,
) -> Result<AnalysisSummary, ExperimentError> {
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for dir in dirs {
        match load_run(dir) {
            Ok(r) => runs.push(r),
            Err(e) => skipped.push((dir.clone(), e.to_string())),
        }
    }
    let tasks = if runs.is_empty() {
        Vec::new()
    } else {
        analyze_runs(&runs, options, Some(out))?
    };
    Ok(AnalysisSummary { tasks, skipped })
}

/// Expands arguments that are batch directories (containing run directories) into run directories.
pub fn collect_run_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut out = Vec::new();
    for p in paths {
        if p.join("run.json").exists() || p.join("checkpoint.json").exists() {
            out.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .map_err(io_err(p))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.is_dir())
            .collect();
        children.sort();
        if children.is_empty() {
            out.push(p.clone());
        }
        out.extend(children);
    }
    Ok(out)
}

/// Reads the per-trial seeds and fitness recorded for a run's best genome.
pub fn read_best_trials(dir: &Path) -> Result<Vec<TrialSummary>, ExperimentError> {
    let path = dir.join("best.csv");
    read_rows(&path)?
        .iter()
        .map(|r| {
            Ok(TrialSummary {
                seed: field(r, 1, &path)?,
                fitness: field(r, 2, &path)?,
                steps: field(r, 3, &path)?,
            })
        })
        .collect()
}

/// Task parameters of a run directory, for replaying its genomes.
pub fn run_config(dir: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let path = dir.join("config.toml");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_config(&text, std::iter::empty())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, ExperimentError> {
    let file = File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))
}

pub fn shared_task(config: &ExperimentConfig) -> Result<Arc<dyn Task>, ExperimentError> {
    Ok(build_task(config.task, &config.tasks)?)
}
