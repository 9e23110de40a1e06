//! End-to-end orchestration: corpus loading, bounded-concurrency execution,
//! crash-safe journaling with resume, pair export, and accounting.
//!
//! Every problem flows stage 1 -> route -> stage 2/3 and ends as exactly one
//! append-only journal record (including its emitted pairs), so `--resume`
//! re-runs only unjournaled problems and replaying a journal reconstructs
//! the dataset stats exactly. Per-problem seeds are derived from
//! `hash(global_seed, problem_id)`, which makes mock-mode results
//! independent of worker scheduling: `pairs.jsonl` is byte-identical across
//! runs and concurrency levels.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{HttpGateway, InferenceGateway, MockGateway, Problem};
use crate::config::{ConfigError, PipelineConfig};
use crate::curator::{
    dedupe, export_jsonl, validate_pair, CuratorError, DatasetStats, PreferencePair, Stage,
};
use crate::hashing::problem_seed;
use crate::stages::{diversify, run_stage1, self_correct, RouteDecision, StageOutcome};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read problems file {path}: {cause}")]
    Problems { path: String, cause: String },
    #[error("problems file {path} line {line}: {cause}")]
    ProblemLine {
        path: String,
        line: usize,
        cause: String,
    },
    #[error("duplicate problem id {0:?}")]
    DuplicateProblemId(String),
    #[error("journal error: {0}")]
    Journal(String),
    #[error(transparent)]
    Curator(#[from] CuratorError),
    #[error("backend preflight failed: {0}")]
    Preflight(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemStatus {
    Done,
    Aborted,
}

/// Stage-1 summary journaled for every completed problem; the max-chain
/// reward here is the baseline stage-2 corrections must beat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub sol_max_correct: bool,
    pub sol_min_correct: bool,
    pub sol_max_reward: f64,
    pub sol_min_reward: f64,
    pub expansions: usize,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub stage: Stage,
    pub accepted: bool,
    pub reject_reason: Option<String>,
}

/// One terminal journal record per problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub problem_id: String,
    pub status: ProblemStatus,
    pub route: Option<RouteDecision>,
    pub stage1: Option<Stage1Summary>,
    pub outcome: Option<OutcomeSummary>,
    /// Pairs emitted for this problem (main pair first, then any
    /// step-level pairs). Kept in the journal so a resumed run can
    /// re-export without re-generating.
    #[serde(default)]
    pub pairs: Vec<PreferencePair>,
    pub error: Option<String>,
    pub started_ms: u64,
    pub finished_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Load a `{id, question, answer}` JSONL corpus.
pub fn load_problems(path: &Path) -> Result<Vec<Problem>, PipelineError> {
    let file = fs::File::open(path).map_err(|e| PipelineError::Problems {
        path: path.display().to_string(),
        cause: e.to_string(),
    })?;
    let mut problems = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Problems {
            path: path.display().to_string(),
            cause: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem =
            serde_json::from_str(&line).map_err(|e| PipelineError::ProblemLine {
                path: path.display().to_string(),
                line: idx + 1,
                cause: e.to_string(),
            })?;
        if !seen.insert(problem.id.clone()) {
            return Err(PipelineError::DuplicateProblemId(problem.id));
        }
        problems.push(problem);
    }
    Ok(problems)
}

/// Build the gateway the config describes; HTTP backends are preflighted.
pub fn build_gateway(cfg: &PipelineConfig) -> Result<Arc<dyn InferenceGateway>, PipelineError> {
    if cfg.all_mock() {
        return Ok(Arc::new(MockGateway::new(cfg.mock, cfg.seed)));
    }
    let gw = HttpGateway::new(
        cfg.backends.policy.clone(),
        cfg.backends.small_policy.clone(),
        cfg.backends.prm.clone(),
        cfg.backends.orm.clone(),
    )
    .map_err(|e| PipelineError::Preflight(e.to_string()))?;
    gw.preflight()
        .map_err(|e| PipelineError::Preflight(e.to_string()))?;
    Ok(Arc::new(gw))
}

fn append_record(file: &mut fs::File, record: &JournalRecord) -> Result<(), PipelineError> {
    let line = serde_json::to_string(record).map_err(|e| PipelineError::Journal(e.to_string()))?;
    file.write_all(line.as_bytes())?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

/// Strict journal read for `stats`: a malformed or truncated line is an
/// error naming the last valid record.
pub fn load_journal(path: &Path) -> Result<Vec<JournalRecord>, PipelineError> {
    let (records, _, trailing) = read_journal(path)?;
    if let Some((line, cause)) = trailing {
        let last = records
            .last()
            .map(|r| r.problem_id.clone())
            .unwrap_or_else(|| "<none>".to_string());
        return Err(PipelineError::Journal(format!(
            "journal truncated at line {line} ({cause}); last valid record: {last}"
        )));
    }
    Ok(records)
}

// (records, valid byte length, malformed tail as (line number, cause)).
type JournalScan = (Vec<JournalRecord>, u64, Option<(usize, String)>);

// Shared reader: parses records and reports a malformed tail along with the
// byte length of the valid prefix.
fn read_journal(path: &Path) -> Result<JournalScan, PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok((Vec::new(), 0, None));
        }
        Err(e) => return Err(PipelineError::Io(e)),
    };
    let mut records = Vec::new();
    let mut valid_len = 0u64;
    let mut offset = 0usize;
    let mut line_no = 0usize;
    for line in text.split_inclusive('\n') {
        line_no += 1;
        let body = line.trim_end_matches('\n');
        offset += line.len();
        if body.trim().is_empty() {
            valid_len = offset as u64;
            continue;
        }
        match serde_json::from_str::<JournalRecord>(body) {
            Ok(record) => {
                records.push(record);
                valid_len = offset as u64;
            }
            Err(e) => {
                // Only a trailing partial line is recoverable; anything
                // malformed mid-file is corruption.
                let rest = &text[offset..];
                if rest.trim().is_empty() {
                    return Ok((records, valid_len, Some((line_no, e.to_string()))));
                }
                return Err(PipelineError::Journal(format!(
                    "malformed journal line {line_no}: {e}"
                )));
            }
        }
    }
    Ok((records, valid_len, None))
}

/// Lenient journal read for `--resume`: drops a partial trailing line
/// (truncating the file to the valid prefix) and returns completed records.
pub fn load_journal_for_resume(path: &Path) -> Result<Vec<JournalRecord>, PipelineError> {
    let (records, valid_len, trailing) = read_journal(path)?;
    if trailing.is_some() {
        let file = fs::OpenOptions::new().write(true).open(path)?;
        file.set_len(valid_len)?;
    }
    Ok(records)
}

fn process_problem(
    gateway: &dyn InferenceGateway,
    problem: &Problem,
    cfg: &PipelineConfig,
) -> JournalRecord {
    let started_ms = now_ms();
    let seed = problem_seed(cfg.seed, &problem.id);
    let mut record = JournalRecord {
        problem_id: problem.id.clone(),
        status: ProblemStatus::Done,
        route: None,
        stage1: None,
        outcome: None,
        pairs: Vec::new(),
        error: None,
        started_ms,
        finished_ms: started_ms,
    };

    match run_stage1(gateway, problem, cfg, seed) {
        Err(e) => {
            record.status = ProblemStatus::Aborted;
            record.error = Some(e.to_string());
        }
        Ok((result, route, stage1_outcome)) => {
            record.route = Some(route.decision);
            record.stage1 = Some(Stage1Summary {
                sol_max_correct: result.sol_max.correct,
                sol_min_correct: result.sol_min.correct,
                sol_max_reward: result.sol_max.cumulative_reward,
                sol_min_reward: result.sol_min.cumulative_reward,
                expansions: result.expansions,
                levels: result.levels,
            });
            let outcome: Option<StageOutcome> = match route.decision {
                RouteDecision::EmitPair => stage1_outcome,
                RouteDecision::SelfCorrect => {
                    Some(self_correct(gateway, problem, &result.sol_max, cfg, seed))
                }
                RouteDecision::Diversify => {
                    Some(diversify(gateway, problem, &result.sol_max, cfg, seed))
                }
                RouteDecision::Drop => None,
            };
            if let Some(outcome) = outcome {
                record.outcome = Some(OutcomeSummary {
                    stage: outcome.stage,
                    accepted: outcome.accepted,
                    reject_reason: outcome.reject_reason.clone(),
                });
                if let Some(pair) = outcome.pair {
                    record.pairs.push(pair);
                    record.pairs.extend(outcome.step_pairs);
                }
            }
        }
    }
    record.finished_ms = now_ms();
    record
}

/// Execute a full run: stage 1 -> route -> stage 2/3 per problem under
/// bounded concurrency, journaling each problem, then export pairs and
/// stats. Aborted problems are journaled and skipped, never retried within
/// the run.
pub fn run(
    cfg: &PipelineConfig,
    problems_path: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<DatasetStats, PipelineError> {
    cfg.validate()?;
    let problems = load_problems(problems_path)?;
    let gateway = build_gateway(cfg)?;
    fs::create_dir_all(out_dir)?;
    let journal_path = out_dir.join(JOURNAL_FILE);

    let mut done: HashMap<String, JournalRecord> = HashMap::new();
    if resume {
        for record in load_journal_for_resume(&journal_path)? {
            done.insert(record.problem_id.clone(), record);
        }
    } else if journal_path.exists() {
        fs::remove_file(&journal_path)?;
    }

    let pending: Vec<&Problem> = problems
        .iter()
        .filter(|p| !done.contains_key(&p.id))
        .collect();
    let mut journal = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&journal_path)?;

    let workers = cfg.concurrency.min(pending.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<JournalRecord>();

    let new_records: Result<Vec<JournalRecord>, PipelineError> = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let pending = &pending;
            let gateway = Arc::clone(&gateway);
            let cfg = &cfg;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= pending.len() {
                    break;
                }
                let record = process_problem(gateway.as_ref(), pending[i], cfg);
                if tx.send(record).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Single journal writer on this thread.
        let mut collected = Vec::with_capacity(pending.len());
        for record in rx {
            append_record(&mut journal, &record)?;
            collected.push(record);
        }
        Ok(collected)
    });
    let new_records = new_records?;

    for record in new_records {
        done.insert(record.problem_id.clone(), record);
    }

    finalize_outputs(&problems, &done, out_dir)
}

// Export pairs (corpus order, deduped, validated) and stats.json; also
// asserts the routing partition closes.
fn finalize_outputs(
    problems: &[Problem],
    records: &HashMap<String, JournalRecord>,
    out_dir: &Path,
) -> Result<DatasetStats, PipelineError> {
    let mut pairs: Vec<PreferencePair> = Vec::new();
    let mut aborted = 0usize;
    let mut dropped = 0usize;
    let mut routed = 0usize;
    for problem in problems {
        let record = records.get(&problem.id).ok_or_else(|| {
            PipelineError::Journal(format!("missing journal record for {}", problem.id))
        })?;
        match record.status {
            ProblemStatus::Aborted => aborted += 1,
            ProblemStatus::Done => match record.route {
                Some(RouteDecision::Drop) => dropped += 1,
                Some(_) => routed += 1,
                None => {
                    return Err(PipelineError::Journal(format!(
                        "done record without route for {}",
                        problem.id
                    )))
                }
            },
        }
        pairs.extend(record.pairs.iter().cloned());
    }
    assert_eq!(
        routed + dropped + aborted,
        problems.len(),
        "routing partition must close over the corpus"
    );

    let pairs = dedupe(pairs);
    let mut stats = export_jsonl(&pairs, &out_dir.join(PAIRS_FILE))?;
    stats.total_questions = problems.len();
    stats.aborted = aborted;
    stats.dropped = dropped;

    let stats_json =
        serde_json::to_string_pretty(&stats).map_err(|e| PipelineError::Journal(e.to_string()))?;
    fs::write(out_dir.join(STATS_FILE), stats_json + "\n")?;
    Ok(stats)
}

/// Rebuild [`DatasetStats`] from a journal alone.
pub fn stats_from_journal(path: &Path) -> Result<DatasetStats, PipelineError> {
    let records = load_journal(path)?;
    let mut stats = DatasetStats {
        total_questions: records.len(),
        ..Default::default()
    };
    let mut pairs: Vec<PreferencePair> = Vec::new();
    for record in &records {
        match record.status {
            ProblemStatus::Aborted => stats.aborted += 1,
            ProblemStatus::Done => {
                if record.route == Some(RouteDecision::Drop) {
                    stats.dropped += 1;
                }
            }
        }
        pairs.extend(record.pairs.iter().cloned());
    }
    for pair in dedupe(pairs) {
        stats.count_stage(pair.stage);
    }
    Ok(stats)
}

/// One validation failure in a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationFailure {
    pub line: usize,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub total_lines: usize,
    pub valid_pairs: usize,
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn all_valid(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Re-parse and re-validate every line of an exported dataset, collecting
/// all failures with their line numbers.
pub fn validate_dataset(path: &Path) -> Result<ValidationReport, PipelineError> {
    let file = fs::File::open(path).map_err(|e| PipelineError::Problems {
        path: path.display().to_string(),
        cause: e.to_string(),
    })?;
    let mut report = ValidationReport {
        total_lines: 0,
        valid_pairs: 0,
        failures: Vec::new(),
    };

    #[derive(Deserialize)]
    struct Meta {
        problem_id: String,
        chosen_reward: f64,
        rejected_reward: f64,
    }
    #[derive(Deserialize)]
    struct Line {
        prompt: String,
        chosen: String,
        rejected: String,
        stage: Stage,
        meta: Meta,
    }

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.total_lines += 1;
        match serde_json::from_str::<Line>(&line) {
            Err(e) => report.failures.push(ValidationFailure {
                line: idx + 1,
                cause: e.to_string(),
            }),
            Ok(parsed) => {
                let pair = PreferencePair {
                    problem_id: parsed.meta.problem_id,
                    prompt: parsed.prompt,
                    chosen: parsed.chosen,
                    rejected: parsed.rejected,
                    stage: parsed.stage,
                    chosen_reward: parsed.meta.chosen_reward,
                    rejected_reward: parsed.meta.rejected_reward,
                    chosen_correct: true,
                    rejected_correct: false,
                };
                match validate_pair(&pair, None) {
                    Ok(()) => report.valid_pairs += 1,
                    Err(reason) => report.failures.push(ValidationFailure {
                        line: idx + 1,
                        cause: reason.to_string(),
                    }),
                }
            }
        }
    }
    Ok(report)
}

/// Write the default mock corpus next to a config for quick starts.
pub fn write_mock_corpus(cfg: &PipelineConfig, path: &Path) -> Result<(), PipelineError> {
    cfg.mock.write_corpus(path)?;
    Ok(())
}
