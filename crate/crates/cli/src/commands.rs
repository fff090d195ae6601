//! The optimize, baseline and evaluate commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use promptgrad::datasets::{load_jsonl, make_splits, QAItem, SplitSource, Splits, TaskFormat};
use promptgrad::extract::ExtractionRule;
use promptgrad::gateway::{
    ChatBackend, Gateway, HttpBackend, MockBackend, MockScript, ResponseCache,
};
use promptgrad::optimizer::{
    evaluate_prompt, run_baseline, run_optimization, CallCounts, Evaluation, Persistence,
    TraceStore,
};
use promptgrad::strategies::ExemplarPool;
use promptgrad::textgrad::{Engines, Stage, Tape};
use promptgrad::ErrorCategory;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{BackendChoice, Config, EndpointConfig, Overrides};
use crate::manifest::{self, file_digest, io_err, sha256_hex, RunManifest};
use crate::CliError;

/// Headline numbers of a finished command, read back by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub method: String,
    pub dataset: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Logical requests, cache hits included.
    pub engine_calls: CallCounts,
    /// Requests that reached a backend in this process.
    pub backend_calls: CallCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_dev_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct SplitManifest {
    protocol: String,
    seed: u64,
    train: Vec<String>,
    dev: Vec<String>,
    test: Vec<String>,
}

struct Prepared {
    config: Config,
    format: TaskFormat,
    rule: ExtractionRule,
    splits: Splits,
    engines: Engines,
    dataset_name: String,
}

impl Prepared {
    fn backend_calls(&self) -> CallCounts {
        CallCounts {
            task: self.engines.task.stats().backend_attempts as usize,
            backward: self.engines.backward.stats().backend_attempts as usize,
        }
    }
}

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::new(ErrorCategory::Data, msg)
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::new(ErrorCategory::Config, msg)
}

fn load_scripts(path: &Path) -> Result<(MockScript, MockScript), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read mock script {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("mock script {} is not JSON: {e}", path.display())))?;
    let split = value
        .as_object()
        .is_some_and(|o| o.contains_key("task") || o.contains_key("backward"));
    if split {
        let part = |key: &str| {
            value
                .get(key)
                .map_or_else(|| Ok(MockScript::new()), MockScript::from_json)
        };
        Ok((part("task")?, part("backward")?))
    } else {
        let s = MockScript::from_json(&value)?;
        Ok((s.clone(), s))
    }
}

fn gateway(
    endpoint: &EndpointConfig,
    script: Option<MockScript>,
    cache: Option<Arc<ResponseCache>>,
) -> Result<Arc<Gateway>, CliError> {
    let bc = endpoint.backend_config();
    let backend: Arc<dyn ChatBackend> = match endpoint.backend {
        BackendChoice::Mock => Arc::new(MockBackend::new(script.unwrap_or_default())?),
        BackendChoice::Http => Arc::new(HttpBackend::from_config(&bc)?),
    };
    Ok(Arc::new(Gateway::new(backend, &bc)?.with_cache(cache)))
}

fn build_engines(cfg: &Config, out: &Path) -> Result<Engines, CliError> {
    let (task_script, backward_script) = match &cfg.run.mock_script {
        Some(p) => {
            let (t, b) = load_scripts(p)?;
            (Some(t), Some(b))
        }
        None => (None, None),
    };
    let cache = if cfg.run.cache {
        let path = cfg
            .run
            .cache_path
            .clone()
            .unwrap_or_else(|| out.join("cache.jsonl"));
        Some(Arc::new(
            ResponseCache::open(&path).map_err(|e| io_err(&path, e))?,
        ))
    } else {
        None
    };
    Ok(Engines::new(
        gateway(&cfg.task, task_script, cache.clone())?,
        cfg.task_settings(),
        gateway(&cfg.backward, backward_script, cache)?,
        cfg.backward_settings(),
        cfg.run.parallelism,
    ))
}

fn load_dataset(path: &Path, format: &TaskFormat) -> Result<Vec<QAItem>, CliError> {
    load_jsonl(path, format).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn prepare(
    command: &str,
    config_file: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
    resume: bool,
) -> Result<Prepared, CliError> {
    let cfg = Config::load(config_file, overrides)?;
    let format = cfg.dataset.task_format()?;
    let train_path = cfg.dataset.path.clone().expect("validated");

    let mut digests = BTreeMap::new();
    digests.insert(train_path.display().to_string(), file_digest(&train_path)?);
    if let Some(p) = &cfg.dataset.test_path {
        digests.insert(p.display().to_string(), file_digest(p)?);
    }
    let pool = load_dataset(&train_path, &format)?;
    let source = match &cfg.dataset.test_path {
        Some(p) => SplitSource::PreSplit {
            train: pool,
            test: load_dataset(p, &format)?,
        },
        None => SplitSource::Pooled(pool),
    };
    let spec = cfg.split_spec();
    let splits = make_splits(source, &spec)?;

    // The mock script is tracked by its own digest, so a resumed run may
    // point at a different copy of it.
    let mut digest_view = cfg.clone();
    digest_view.run.mock_script = None;
    let snapshot = serde_json::to_string(&digest_view).expect("serializable");
    let mock_digest = match &cfg.run.mock_script {
        Some(p) => {
            Some(file_digest(p).map_err(|e| CliError::new(ErrorCategory::Config, e.message))?)
        }
        None => None,
    };
    let fresh = RunManifest::new(
        command,
        sha256_hex(snapshot.as_bytes()),
        digests,
        mock_digest,
    );
    let manifest_path = out.join(manifest::MANIFEST);
    if manifest_path.exists() {
        if !resume {
            return Err(config_err(format!(
                "{} already holds a run; pass --resume or choose another --out",
                out.display()
            )));
        }
        let old: RunManifest = manifest::read_json(&manifest_path)?;
        old.check_resume(&fresh)?;
    } else {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        manifest::write_json(&manifest_path, &fresh)?;
    }
    manifest::write_json(&out.join(manifest::CONFIG_SNAPSHOT), &cfg)?;
    manifest::write_json(
        &out.join(manifest::SPLITS),
        &SplitManifest {
            protocol: spec.protocol.to_string(),
            seed: spec.seed,
            train: Splits::ids(&splits.train),
            dev: Splits::ids(&splits.dev),
            test: Splits::ids(&splits.test),
        },
    )?;

    let engines = build_engines(&cfg, out)?;
    let dataset_name = train_path.file_stem().map_or_else(
        || train_path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    Ok(Prepared {
        rule: ExtractionRule::for_format(&format),
        config: cfg,
        format,
        splits,
        engines,
        dataset_name,
    })
}

fn finish(
    p: &Prepared,
    out: &Path,
    command: &str,
    method: String,
    eval: &Evaluation,
    best_dev_accuracy: Option<f64>,
    engine_calls: CallCounts,
) -> Result<Summary, CliError> {
    manifest::write_jsonl(&out.join(manifest::GRADED), &eval.graded)?;
    let summary = Summary {
        command: command.to_owned(),
        method,
        dataset: p.dataset_name.clone(),
        n: eval.graded.len(),
        correct: eval.graded.iter().filter(|g| g.correct).count(),
        accuracy: eval.accuracy,
        engine_calls,
        backend_calls: p.backend_calls(),
        best_dev_accuracy,
    };
    manifest::write_json(&out.join(manifest::SUMMARY), &summary)?;
    Ok(summary)
}

fn require_test(splits: &Splits) -> Result<&[QAItem], CliError> {
    if splits.test.is_empty() {
        return Err(data_err(
            "the test split is empty (set split.test_size or --test-dataset)",
        ));
    }
    Ok(&splits.test)
}

pub fn optimize(
    config_file: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
    resume: bool,
) -> Result<(), CliError> {
    let p = prepare("optimize", config_file, overrides, out, resume)?;
    let store = TraceStore::new(out);
    let persistence = if resume {
        Persistence::Resume(&store)
    } else {
        Persistence::Fresh(&store)
    };
    let trace = run_optimization(
        &p.config.optimizer,
        &p.splits,
        &p.format,
        &p.rule,
        &p.engines,
        persistence,
    )?;
    println!("best dev accuracy: {:.1}%", trace.best_dev_accuracy * 100.0);
    println!(
        "stop reason: {}",
        serde_json::to_value(trace.stop_reason)
            .expect("serializable")
            .as_str()
            .unwrap_or("")
    );
    println!("best prompt:\n{}", trace.best_prompt);

    if p.splits.test.is_empty() {
        tracing::warn!("no test split; skipping test evaluation");
        return Ok(());
    }
    let mut tape = Tape::new();
    let eval = evaluate_prompt(
        &trace.best_prompt,
        &p.splits.test,
        &p.format,
        &p.rule,
        &p.engines,
        Stage::TestEval,
        &mut tape,
    )?;
    let mut calls = trace.total_calls();
    calls += CallCounts::from_tape(&tape);
    store.append_transcripts(&mut tape)?;
    let summary = finish(
        &p,
        out,
        "optimize",
        "optimized prompt".into(),
        &eval,
        Some(trace.best_dev_accuracy),
        calls,
    )?;
    println!(
        "test accuracy: {:.1}% ({}/{})",
        summary.accuracy * 100.0,
        summary.correct,
        summary.n
    );
    Ok(())
}

fn write_transcripts(out: &Path, tape: &Tape) -> Result<(), CliError> {
    manifest::write_jsonl(&out.join(TraceStore::TRANSCRIPTS), tape)
}

pub fn baseline(
    config_file: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
) -> Result<(), CliError> {
    let p = prepare("baseline", config_file, overrides, out, false)?;
    let test = require_test(&p.splits)?;
    let strategy = p.config.baseline.strategy();
    let pool = ExemplarPool::new(p.splits.train.clone());
    let mut tape = Tape::new();
    let eval = run_baseline(
        &strategy, &pool, test, &p.format, &p.rule, &p.engines, &mut tape,
    )?;
    write_transcripts(out, &tape)?;
    let calls = CallCounts::from_tape(&tape);
    let summary = finish(
        &p,
        out,
        "baseline",
        p.config.baseline.label(),
        &eval,
        None,
        calls,
    )?;
    println!(
        "{} accuracy: {:.1}% ({}/{})",
        summary.method,
        summary.accuracy * 100.0,
        summary.correct,
        summary.n
    );
    Ok(())
}

pub fn evaluate(
    config_file: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
    prompt_file: &Path,
) -> Result<(), CliError> {
    let prompt = fs::read_to_string(prompt_file)
        .map_err(|e| config_err(format!("cannot read prompt {}: {e}", prompt_file.display())))?;
    let prompt = prompt.trim();
    if prompt.is_empty() {
        return Err(config_err(format!(
            "prompt file {} is empty",
            prompt_file.display()
        )));
    }
    let p = prepare("evaluate", config_file, overrides, out, false)?;
    let test = require_test(&p.splits)?;
    let mut tape = Tape::new();
    let eval = evaluate_prompt(
        prompt,
        test,
        &p.format,
        &p.rule,
        &p.engines,
        Stage::TestEval,
        &mut tape,
    )?;
    write_transcripts(out, &tape)?;
    let calls = CallCounts::from_tape(&tape);
    let summary = finish(
        &p,
        out,
        "evaluate",
        "fixed prompt".into(),
        &eval,
        None,
        calls,
    )?;
    println!(
        "accuracy: {:.1}% ({}/{})",
        summary.accuracy * 100.0,
        summary.correct,
        summary.n
    );
    Ok(())
}
