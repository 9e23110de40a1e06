//! Validation, deduplication, accounting, and JSONL export of preference
//! pairs.
//!
//! The wire format is one JSON object per line with keys in exactly this
//! order: `prompt`, `chosen`, `rejected`, `stage`, `meta`, where `meta` is
//! `{problem_id, chosen_reward, rejected_reward}`. UTF-8, `\n` line endings,
//! no timestamps; exporting the same pair list twice is byte-identical.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which self-evolution stage produced a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SelfGeneration,
    SelfCorrection,
    Diversity,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::SelfGeneration => write!(f, "self_generation"),
            Stage::SelfCorrection => write!(f, "self_correction"),
            Stage::Diversity => write!(f, "diversity"),
        }
    }
}

/// One exportable (prompt, chosen, rejected) unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub problem_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub stage: Stage,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub chosen_correct: bool,
    pub rejected_correct: bool,
}

/// Machine-readable reason a pair failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidPairReason {
    /// chosen equals rejected after whitespace normalization.
    Degenerate,
    /// chosen trajectory is not marked correct.
    ChosenIncorrect,
    /// stage-1/3 rejected trajectory is marked correct.
    NoContrast,
    /// stage-2 chosen reward does not exceed the journaled failed reward.
    NoSuperiority,
    /// a reward value is not finite.
    NonFiniteReward,
    /// prompt or trajectory text is empty.
    EmptyField,
}

impl fmt::Display for InvalidPairReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            InvalidPairReason::Degenerate => "degenerate",
            InvalidPairReason::ChosenIncorrect => "chosen_incorrect",
            InvalidPairReason::NoContrast => "no_contrast",
            InvalidPairReason::NoSuperiority => "no_superiority",
            InvalidPairReason::NonFiniteReward => "non_finite_reward",
            InvalidPairReason::EmptyField => "empty_field",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Error)]
pub enum CuratorError {
    #[error("export failed: {0}")]
    Export(#[from] std::io::Error),
    #[error("line {line}: malformed JSON: {cause}")]
    Import { line: usize, cause: String },
    #[error("line {line}: invalid pair: {reason}")]
    Validation {
        line: usize,
        reason: InvalidPairReason,
    },
}

fn squash_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Check a pair against the type invariants and the stage-specific rules.
///
/// For stage-2 pairs, `stage2_baseline` is the journaled cumulative reward of
/// the failed solution the correction started from; superiority is only
/// checkable when the caller has it (the export schema does not carry it).
pub fn validate_pair(
    pair: &PreferencePair,
    stage2_baseline: Option<f64>,
) -> Result<(), InvalidPairReason> {
    if pair.prompt.trim().is_empty()
        || pair.chosen.trim().is_empty()
        || pair.rejected.trim().is_empty()
    {
        return Err(InvalidPairReason::EmptyField);
    }
    if squash_ws(&pair.chosen) == squash_ws(&pair.rejected) {
        return Err(InvalidPairReason::Degenerate);
    }
    if !pair.chosen_reward.is_finite() || !pair.rejected_reward.is_finite() {
        return Err(InvalidPairReason::NonFiniteReward);
    }
    if !pair.chosen_correct {
        return Err(InvalidPairReason::ChosenIncorrect);
    }
    match pair.stage {
        Stage::SelfGeneration | Stage::Diversity => {
            if pair.rejected_correct {
                return Err(InvalidPairReason::NoContrast);
            }
        }
        Stage::SelfCorrection => {
            if let Some(baseline) = stage2_baseline {
                if pair.chosen_reward <= baseline {
                    return Err(InvalidPairReason::NoSuperiority);
                }
            }
        }
    }
    Ok(())
}

/// Remove exact duplicates keyed on (problem_id, chosen, rejected), keeping
/// the first occurrence; order is otherwise preserved.
pub fn dedupe(pairs: Vec<PreferencePair>) -> Vec<PreferencePair> {
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| seen.insert((p.problem_id.clone(), p.chosen.clone(), p.rejected.clone())))
        .collect()
}

/// Per-run accounting in the shape of the dataset-split table: total
/// questions, pairs per stage, total pairs, plus abort/drop counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_questions: usize,
    pub pairs_stage1: usize,
    pub pairs_stage2: usize,
    pub pairs_stage3: usize,
    pub total_pairs: usize,
    pub aborted: usize,
    pub dropped: usize,
}

impl DatasetStats {
    pub fn count_stage(&mut self, stage: Stage) {
        match stage {
            Stage::SelfGeneration => self.pairs_stage1 += 1,
            Stage::SelfCorrection => self.pairs_stage2 += 1,
            Stage::Diversity => self.pairs_stage3 += 1,
        }
        self.total_pairs += 1;
    }

    /// Human-readable accounting table.
    pub fn render_report(&self) -> String {
        format!(
            "Total Questions = {}\n\
             Stage 1 (Self-Generation) Pairs = {}\n\
             Stage 2 (Self-Correction) Pairs = {}\n\
             Stage 3 (Diversity) Pairs = {}\n\
             Total Preference Dataset = {}\n\
             Dropped = {}\n\
             Aborted = {}\n",
            self.total_questions,
            self.pairs_stage1,
            self.pairs_stage2,
            self.pairs_stage3,
            self.total_pairs,
            self.dropped,
            self.aborted,
        )
    }
}

// Wire representation; field order here is the key order in the file.
#[derive(Serialize, Deserialize)]
struct PairLine {
    prompt: String,
    chosen: String,
    rejected: String,
    stage: Stage,
    meta: PairMeta,
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    problem_id: String,
    chosen_reward: f64,
    rejected_reward: f64,
}

impl From<&PreferencePair> for PairLine {
    fn from(p: &PreferencePair) -> Self {
        PairLine {
            prompt: p.prompt.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
            stage: p.stage,
            meta: PairMeta {
                problem_id: p.problem_id.clone(),
                chosen_reward: p.chosen_reward,
                rejected_reward: p.rejected_reward,
            },
        }
    }
}

impl PairLine {
    fn into_pair(self) -> PreferencePair {
        // Correctness flags are not part of the wire format; they are
        // reconstructed from the export precondition (chosen always correct)
        // and the stage-1/3 contrast invariant.
        PreferencePair {
            problem_id: self.meta.problem_id,
            prompt: self.prompt,
            chosen: self.chosen,
            rejected: self.rejected,
            stage: self.stage,
            chosen_reward: self.meta.chosen_reward,
            rejected_reward: self.meta.rejected_reward,
            chosen_correct: true,
            rejected_correct: false,
        }
    }
}

/// Write pairs as JSONL; refuses invalid input. Returns stats carrying the
/// per-stage pair counts (question/abort/drop accounting belongs to the run
/// layer). A partially written file is removed on I/O failure.
pub fn export_jsonl(pairs: &[PreferencePair], path: &Path) -> Result<DatasetStats, CuratorError> {
    for (i, pair) in pairs.iter().enumerate() {
        if let Err(reason) = validate_pair(pair, None) {
            return Err(CuratorError::Validation {
                line: i + 1,
                reason,
            });
        }
    }
    let write_all = || -> std::io::Result<DatasetStats> {
        let mut stats = DatasetStats::default();
        let mut file = fs::File::create(path)?;
        for pair in pairs {
            let line = serde_json::to_string(&PairLine::from(pair))
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            stats.count_stage(pair.stage);
        }
        file.flush()?;
        Ok(stats)
    };
    write_all().map_err(|e| {
        let _ = fs::remove_file(path);
        CuratorError::Export(e)
    })
}

/// Parse and re-validate a JSONL pairs file. Fails closed: any malformed or
/// invalid line aborts the import with its line number.
pub fn import_jsonl(path: &Path) -> Result<Vec<PreferencePair>, CuratorError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PairLine = serde_json::from_str(&line).map_err(|e| CuratorError::Import {
            line: idx + 1,
            cause: e.to_string(),
        })?;
        let pair = parsed.into_pair();
        validate_pair(&pair, None).map_err(|reason| CuratorError::Validation {
            line: idx + 1,
            reason,
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}
