//! The outer optimization loop: batch backprop from the best prompt, one
//! rewrite per iteration, dev-set gate with reversion, patience stopping.
//!
//! Runs can be persisted to a [`TraceStore`] directory and resumed from it.
//! Batches are drawn sequentially from a seed-shuffled train order without
//! replacement; a batch never spans two epochs, so a leftover tail shorter
//! than `batch_size` is skipped and the order reshuffled.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{QAItem, Splits, TaskFormat};
use crate::extract::{
    accuracy, grade, grade_failed_call, EvalError, ExtractionRule, GradedPrediction,
};
use crate::sampling::{seed_for, SplitMix64};
use crate::strategies::{build_messages, ExemplarPool, PromptStrategy, StrategyError};
use crate::textgrad::{
    backward_batch, forward, tgd_step, Engines, PromptVariable, Stage, Tape, TextGradError,
    DEFAULT_MAX_PROMPT_CHARS,
};

pub const DEFAULT_SEED_PROMPT: &str = "You are a helpful, creative, and smart assistant.";
pub const DEFAULT_BATCH_SIZE: usize = 4;
pub const DEFAULT_PATIENCE: usize = 3;
pub const DEFAULT_MAX_ITERATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub seed_prompt: String,
    pub batch_size: usize,
    pub patience_n: usize,
    pub max_iterations: usize,
    pub rng_seed: u64,
    pub max_prompt_chars: usize,
    /// Stop with `train_exhausted` instead of starting this epoch.
    pub max_epochs: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            seed_prompt: DEFAULT_SEED_PROMPT.to_owned(),
            batch_size: DEFAULT_BATCH_SIZE,
            patience_n: DEFAULT_PATIENCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            rng_seed: 0,
            max_prompt_chars: DEFAULT_MAX_PROMPT_CHARS,
            max_epochs: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, train_len: usize) -> Result<(), OptimizerError> {
        let bad = |m: String| Err(OptimizerError::Config(m));
        if self.seed_prompt.trim().is_empty() {
            return bad("seed_prompt is empty".into());
        }
        if self.batch_size == 0 || self.patience_n == 0 || self.max_iterations == 0 {
            return bad("batch_size, patience_n and max_iterations must be positive".into());
        }
        if self.patience_n > self.max_iterations {
            return bad(format!(
                "patience_n ({}) exceeds max_iterations ({})",
                self.patience_n, self.max_iterations
            ));
        }
        if self.batch_size > train_len {
            return bad(format!(
                "batch_size ({}) exceeds train size ({train_len})",
                self.batch_size
            ));
        }
        if self.max_prompt_chars == 0 {
            return bad("max_prompt_chars must be positive".into());
        }
        if self.max_epochs == Some(0) {
            return bad("max_epochs must be positive when set".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub task: usize,
    pub backward: usize,
}

impl CallCounts {
    /// Logical requests on the tape, cache hits included.
    pub fn from_tape(tape: &[crate::textgrad::EngineCall]) -> Self {
        let backward = tape.iter().filter(|c| c.stage.is_backward()).count();
        Self {
            task: tape.len() - backward,
            backward,
        }
    }
}

impl std::ops::AddAssign for CallCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.task += rhs.task;
        self.backward += rhs.backward;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub epoch: usize,
    pub batch_ids: Vec<String>,
    /// The prompt the gradients were computed from (the best prompt so far).
    pub base_prompt: String,
    pub candidate_prompt: Option<String>,
    /// `None` when no candidate could be scored.
    pub dev_accuracy: Option<f64>,
    pub accepted: bool,
    pub best_accuracy_after: f64,
    pub engine_call_counts: CallCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_items: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PatienceExhausted,
    MaxIterations,
    TrainExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub prompt: String,
    pub dev_accuracy: f64,
    pub engine_call_counts: CallCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub seed: SeedEvaluation,
    pub iterations: Vec<IterationRecord>,
    pub best_prompt: String,
    pub best_dev_accuracy: f64,
    /// Index of the iteration that produced the best prompt; `None` for the seed.
    pub best_iteration: Option<usize>,
    pub stop_reason: StopReason,
}

impl OptimizationTrace {
    pub fn total_calls(&self) -> CallCounts {
        let mut total = self.seed.engine_call_counts;
        for it in &self.iterations {
            total += it.engine_call_counts;
        }
        total
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] TextGradError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("run directory {path}: {source}")]
    Store {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot resume from {path}: {reason}")]
    Resume { path: PathBuf, reason: String },
}

fn store_err(path: &Path) -> impl FnOnce(std::io::Error) -> OptimizerError + '_ {
    move |source| OptimizerError::Store {
        path: path.to_owned(),
        source,
    }
}

/// Accuracy plus per-item grades, in item order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub graded: Vec<GradedPrediction>,
}

fn grade_all<F>(
    items: &[QAItem],
    rule: &ExtractionRule,
    engines: &Engines,
    tape: &mut Tape,
    run: F,
) -> Result<Evaluation, OptimizerError>
where
    F: Fn(&QAItem, &mut Tape) -> Result<String, TextGradError> + Sync + Send,
{
    if items.is_empty() {
        return Err(EvalError::EmptyInput.into());
    }
    let results = engines.fan_out(items, |_, item| {
        let mut local = Tape::new();
        let r = run(item, &mut local);
        (r, local)
    });
    let mut graded = Vec::with_capacity(items.len());
    for (item, (result, local)) in items.iter().zip(results) {
        tape.extend(local);
        match result {
            Ok(raw) => graded.push(grade(item, &raw, rule)?),
            Err(err) if err.is_fatal() => return Err(err.into()),
            Err(TextGradError::Engine { source, .. }) => {
                tracing::warn!(item = %item.id, "call failed, graded incorrect: {source}");
                graded.push(grade_failed_call(item, &source.to_string()));
            }
            Err(err) => return Err(err.into()),
        }
    }
    Ok(Evaluation {
        accuracy: accuracy(&graded)?,
        graded,
    })
}

/// Scores `prompt_text` as the system prompt over `items`, fanning out on
/// the engines' worker pool. Items whose call fails after retries are
/// graded incorrect.
pub fn evaluate_prompt(
    prompt_text: &str,
    items: &[QAItem],
    format: &TaskFormat,
    rule: &ExtractionRule,
    engines: &Engines,
    stage: Stage,
    tape: &mut Tape,
) -> Result<Evaluation, OptimizerError> {
    let prompt = PromptVariable::new(prompt_text, false);
    grade_all(items, rule, engines, tape, |item, t| {
        forward(item, format, &prompt, engines, stage, t).map(|r| r.prediction)
    })
}

/// Dev-set accuracy of `prompt_text`.
pub fn evaluate_on_dev(
    prompt_text: &str,
    dev: &[QAItem],
    format: &TaskFormat,
    rule: &ExtractionRule,
    engines: &Engines,
    tape: &mut Tape,
) -> Result<f64, OptimizerError> {
    Ok(evaluate_prompt(
        prompt_text,
        dev,
        format,
        rule,
        engines,
        Stage::DevEval,
        tape,
    )?
    .accuracy)
}

/// Runs a prompting strategy over `test`. `pool` supplies few-shot exemplars
/// and may be empty for the other strategies.
pub fn run_baseline(
    strategy: &PromptStrategy,
    pool: &ExemplarPool,
    test: &[QAItem],
    format: &TaskFormat,
    rule: &ExtractionRule,
    engines: &Engines,
    tape: &mut Tape,
) -> Result<Evaluation, OptimizerError> {
    strategy.validate()?;
    pool.check_disjoint(test)?;
    grade_all(test, rule, engines, tape, |item, t| {
        let messages = build_messages(strategy, item, format, pool)?;
        engines
            .call_task(Stage::Baseline, Some(&item.id), messages, t)
            .map(|r| r.content)
            .map_err(|source| TextGradError::Engine {
                stage: Stage::Baseline,
                item_id: Some(item.id.clone()),
                source,
            })
    })
}

/// Sequential batches over a seed-shuffled order, reshuffled per epoch.
#[derive(Debug, Clone)]
struct BatchSampler {
    rng: SplitMix64,
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed_for(seed, "train-order"));
        let order = rng.permutation(n);
        Self {
            rng,
            n,
            order,
            cursor: 0,
            epoch: 1,
        }
    }

    /// Next batch of indices, or `None` when starting a new epoch would pass
    /// `max_epochs`.
    fn next(&mut self, size: usize, max_epochs: Option<usize>) -> Option<(usize, Vec<usize>)> {
        if self.cursor + size > self.n {
            if max_epochs.is_some_and(|m| self.epoch >= m) {
                return None;
            }
            self.order = self.rng.permutation(self.n);
            self.cursor = 0;
            self.epoch += 1;
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        Some((self.epoch, batch))
    }
}

/// On-disk state of an optimization run.
///
/// * `optimizer_config.json`: the config the run was started with
/// * `seed_eval.json`: the seed prompt's dev score
/// * `trace.jsonl`: one [`IterationRecord`] per completed iteration
/// * `transcripts.jsonl`: every engine call, in pipeline order
/// * `trace.json`, `best_prompt.txt`: written when the run finishes
#[derive(Debug, Clone)]
pub struct TraceStore {
    dir: PathBuf,
}

impl TraceStore {
    pub const CONFIG: &'static str = "optimizer_config.json";
    pub const SEED: &'static str = "seed_eval.json";
    pub const ITERATIONS: &'static str = "trace.jsonl";
    pub const TRANSCRIPTS: &'static str = "transcripts.jsonl";
    pub const TRACE: &'static str = "trace.json";
    pub const BEST_PROMPT: &'static str = "best_prompt.txt";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), OptimizerError> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        fs::write(&path, text).map_err(store_err(&path))
    }

    fn append_lines<T: Serialize>(&self, name: &str, values: &[T]) -> Result<(), OptimizerError> {
        if values.is_empty() {
            return Ok(());
        }
        let path = self.path(name);
        let mut buf = String::new();
        for v in values {
            buf.push_str(&serde_json::to_string(v).expect("serializable"));
            buf.push('\n');
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(store_err(&path))?;
        file.write_all(buf.as_bytes())
            .and_then(|()| file.flush())
            .map_err(store_err(&path))
    }

    /// Appends the calls on `tape` to the transcript log and empties it.
    pub fn append_transcripts(&self, tape: &mut Tape) -> Result<(), OptimizerError> {
        let calls = std::mem::take(tape);
        self.append_lines(Self::TRANSCRIPTS, &calls)
    }

    fn start(&self, config: &OptimizerConfig) -> Result<(), OptimizerError> {
        fs::create_dir_all(&self.dir).map_err(store_err(&self.dir))?;
        for name in [
            Self::SEED,
            Self::ITERATIONS,
            Self::TRANSCRIPTS,
            Self::TRACE,
            Self::BEST_PROMPT,
        ] {
            let path = self.path(name);
            if path.exists() {
                fs::remove_file(&path).map_err(store_err(&path))?;
            }
        }
        self.write_json(Self::CONFIG, config)
    }

    fn read_json<T: serde::de::DeserializeOwned>(
        &self,
        name: &str,
    ) -> Result<Option<T>, OptimizerError> {
        let path = self.path(name);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(store_err(&path)(e)),
        };
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| OptimizerError::Resume {
                path,
                reason: e.to_string(),
            })
    }

    /// Completed iteration records; a torn final line is dropped.
    pub fn load_iterations(&self) -> Result<Vec<IterationRecord>, OptimizerError> {
        let path = self.path(Self::ITERATIONS);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(store_err(&path)(e)),
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(store_err(&path))?;
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<IterationRecord>(line) {
                Ok(r) => out.push(r),
                Err(_) if i + 1 == lines.len() => {
                    tracing::warn!("dropping torn final line of {}", path.display());
                }
                Err(e) => {
                    return Err(OptimizerError::Resume {
                        path,
                        reason: format!("line {}: {e}", i + 1),
                    })
                }
            }
        }
        // Rewrite without the torn line so later appends stay parseable.
        let path_tmp = self.path("trace.jsonl.tmp");
        let mut buf = String::new();
        for r in &out {
            buf.push_str(&serde_json::to_string(r).expect("serializable"));
            buf.push('\n');
        }
        fs::write(&path_tmp, buf).map_err(store_err(&path_tmp))?;
        fs::rename(&path_tmp, &path).map_err(store_err(&path))?;
        Ok(out)
    }

    pub fn load_trace(&self) -> Result<Option<OptimizationTrace>, OptimizerError> {
        self.read_json(Self::TRACE)
    }

    fn finish(&self, trace: &OptimizationTrace) -> Result<(), OptimizerError> {
        self.write_json(Self::TRACE, trace)?;
        let path = self.path(Self::BEST_PROMPT);
        fs::write(&path, format!("{}\n", trace.best_prompt)).map_err(store_err(&path))
    }
}

/// How a run interacts with its [`TraceStore`].
#[derive(Debug, Clone, Copy)]
pub enum Persistence<'a> {
    None,
    /// Start fresh, discarding previous trace files in the directory.
    Fresh(&'a TraceStore),
    /// Continue from the iterations already recorded in the directory.
    Resume(&'a TraceStore),
}

impl<'a> Persistence<'a> {
    fn store(self) -> Option<&'a TraceStore> {
        match self {
            Persistence::None => None,
            Persistence::Fresh(s) | Persistence::Resume(s) => Some(s),
        }
    }
}

struct LoopState {
    best_prompt: String,
    best_accuracy: f64,
    best_iteration: Option<usize>,
    stale: usize,
}

impl LoopState {
    fn replay(seed: &SeedEvaluation, iterations: &[IterationRecord]) -> Self {
        let mut s = LoopState {
            best_prompt: seed.prompt.clone(),
            best_accuracy: seed.dev_accuracy,
            best_iteration: None,
            stale: 0,
        };
        for r in iterations {
            s.record(r);
        }
        s
    }

    fn record(&mut self, r: &IterationRecord) {
        if r.accepted {
            self.best_prompt = r
                .candidate_prompt
                .clone()
                .expect("accepted iterations carry a prompt");
            self.best_accuracy = r.best_accuracy_after;
            self.best_iteration = Some(r.index);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
    }
}

fn finished(state: &LoopState, done: usize, config: &OptimizerConfig) -> Option<StopReason> {
    if state.stale >= config.patience_n {
        Some(StopReason::PatienceExhausted)
    } else if done >= config.max_iterations {
        Some(StopReason::MaxIterations)
    } else {
        None
    }
}

/// Runs the full optimization loop.
///
/// 1. The seed prompt is scored on dev and becomes the initial best.
/// 2. Each iteration backpropagates a batch from the best prompt, asks for
///    one rewrite, scores it on dev, and keeps it only if it is strictly
///    better; otherwise the best prompt stays in place for the next batch.
/// 3. The loop stops after `patience_n` consecutive rejections, after
///    `max_iterations`, or when `max_epochs` is used up.
///
/// Non-fatal engine failures inside an iteration reject that iteration and
/// are noted in its record. Fatal ones (authentication, configuration) abort
/// the run after persisting everything completed so far.
pub fn run_optimization(
    config: &OptimizerConfig,
    splits: &Splits,
    format: &TaskFormat,
    rule: &ExtractionRule,
    engines: &Engines,
    persistence: Persistence<'_>,
) -> Result<OptimizationTrace, OptimizerError> {
    config.validate(splits.train.len())?;
    if splits.dev.is_empty() {
        return Err(OptimizerError::Config("dev split is empty".into()));
    }
    let store = persistence.store();
    let mut tape = Tape::new();

    let (seed, mut iterations) = match persistence {
        Persistence::Resume(s) => resume_state(s, config)?,
        _ => (None, Vec::new()),
    };
    if let Persistence::Fresh(s) = persistence {
        s.start(config)?;
    }
    let seed = match seed {
        Some(seed) => seed,
        None => {
            let result = evaluate_on_dev(
                &config.seed_prompt,
                &splits.dev,
                format,
                rule,
                engines,
                &mut tape,
            );
            let counts = CallCounts::from_tape(&tape);
            if let Some(s) = store {
                s.append_transcripts(&mut tape)?;
            }
            let seed = SeedEvaluation {
                prompt: config.seed_prompt.clone(),
                dev_accuracy: result?,
                engine_call_counts: counts,
            };
            if let Some(s) = store {
                s.write_json(TraceStore::SEED, &seed)?;
            }
            seed
        }
    };
    tracing::info!(accuracy = seed.dev_accuracy, "seed prompt scored on dev");

    let mut state = LoopState::replay(&seed, &iterations);
    let mut sampler = BatchSampler::new(splits.train.len(), config.rng_seed);
    for _ in &iterations {
        sampler.next(config.batch_size, config.max_epochs);
    }

    let stop_reason = loop {
        if let Some(reason) = finished(&state, iterations.len(), config) {
            break reason;
        }
        let Some((epoch, batch)) = sampler.next(config.batch_size, config.max_epochs) else {
            break StopReason::TrainExhausted;
        };
        let items: Vec<QAItem> = batch.iter().map(|&i| splits.train[i].clone()).collect();
        let index = iterations.len() + 1;
        let result = run_iteration(
            index, epoch, &items, &state, config, splits, format, rule, engines, &mut tape,
        );
        if let Some(s) = store {
            s.append_transcripts(&mut tape)?;
        }
        let record = result?;
        tape.clear();
        tracing::info!(
            iteration = index,
            accuracy = ?record.dev_accuracy,
            accepted = record.accepted,
            "iteration finished"
        );
        if let Some(s) = store {
            s.append_lines(TraceStore::ITERATIONS, std::slice::from_ref(&record))?;
        }
        state.record(&record);
        iterations.push(record);
    };

    let trace = OptimizationTrace {
        seed,
        iterations,
        best_prompt: state.best_prompt,
        best_dev_accuracy: state.best_accuracy,
        best_iteration: state.best_iteration,
        stop_reason,
    };
    if let Some(s) = store {
        s.finish(&trace)?;
    }
    Ok(trace)
}

fn resume_state(
    store: &TraceStore,
    config: &OptimizerConfig,
) -> Result<(Option<SeedEvaluation>, Vec<IterationRecord>), OptimizerError> {
    let saved: Option<OptimizerConfig> = store.read_json(TraceStore::CONFIG)?;
    let Some(saved) = saved else {
        store.start(config)?;
        return Ok((None, Vec::new()));
    };
    if saved != *config {
        return Err(OptimizerError::Resume {
            path: store.path(TraceStore::CONFIG),
            reason: "optimizer settings differ from the interrupted run".into(),
        });
    }
    let seed: Option<SeedEvaluation> = store.read_json(TraceStore::SEED)?;
    let iterations = match &seed {
        Some(_) => store.load_iterations()?,
        None => Vec::new(),
    };
    for (i, r) in iterations.iter().enumerate() {
        if r.index != i + 1 {
            return Err(OptimizerError::Resume {
                path: store.path(TraceStore::ITERATIONS),
                reason: format!("expected iteration {}, found {}", i + 1, r.index),
            });
        }
    }
    // A finished trace is superseded by whatever this run produces.
    let finished = store.path(TraceStore::TRACE);
    if finished.exists() {
        fs::remove_file(&finished).map_err(store_err(&finished))?;
    }
    Ok((seed, iterations))
}

#[allow(clippy::too_many_arguments)]
fn run_iteration(
    index: usize,
    epoch: usize,
    items: &[QAItem],
    state: &LoopState,
    config: &OptimizerConfig,
    splits: &Splits,
    format: &TaskFormat,
    rule: &ExtractionRule,
    engines: &Engines,
    tape: &mut Tape,
) -> Result<IterationRecord, OptimizerError> {
    let start = tape.len();
    let mut record = IterationRecord {
        index,
        epoch,
        batch_ids: items.iter().map(|i| i.id.clone()).collect(),
        base_prompt: state.best_prompt.clone(),
        candidate_prompt: None,
        dev_accuracy: None,
        accepted: false,
        best_accuracy_after: state.best_accuracy,
        engine_call_counts: CallCounts::default(),
        failed_items: Vec::new(),
        note: None,
    };
    let mut prompt = PromptVariable::trainable(state.best_prompt.clone());

    let step = backward_batch(items, format, &mut prompt, engines, tape).and_then(|outcome| {
        record.failed_items = outcome.failures.into_iter().map(|f| f.item_id).collect();
        tgd_step(&mut prompt, engines, config.max_prompt_chars, tape)
    });
    match step {
        Ok(candidate) => {
            let acc = evaluate_on_dev(&candidate, &splits.dev, format, rule, engines, tape)?;
            record.accepted = acc > state.best_accuracy;
            if record.accepted {
                record.best_accuracy_after = acc;
            }
            record.dev_accuracy = Some(acc);
            record.candidate_prompt = Some(candidate);
        }
        Err(err) if err.is_fatal() => return Err(err.into()),
        Err(err) => {
            tracing::warn!(iteration = index, "no candidate this iteration: {err}");
            record.note = Some(err.to_string());
        }
    }
    record.engine_call_counts = CallCounts::from_tape(&tape[start..]);
    Ok(record)
}
