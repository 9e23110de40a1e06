//! Pruned dual-chain rollouts.
//!
//! One rollout expands a shared pool of candidate first-steps, seeds a
//! max-chain and a min-chain from its reward extremes, and then grows each
//! chain independently: at every level the live chain samples a fresh budget
//! of candidate next-steps from its own prefix and commits only the
//! argmax-reward (max-chain) or plausible argmin-reward (min-chain)
//! candidate, discarding the rest. Chains stop on a final-answer step or at
//! the depth limit. The whole tree is never built: a rollout of depth `d`
//! with budget `E` costs at most `E + 2E(d - 1)` generated candidates
//! against `E^d` for the unpruned tree.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{
    answers_equal, extract_final_answer, normalize_answer, FinalAnswer, FINAL_ANSWER_MARKER,
};
use crate::backend::{GatewayError, GenRole, GeneratedStep, InferenceGateway, Problem};
use crate::curator::Stage;
use crate::reward::{
    argmax_reward, plausible_argmin, select_extremes, stage1_reward_with_epsilon, RewardBreakdown,
};

#[derive(Debug, Error)]
pub enum RolloutError {
    /// Backend gave up after retries; the problem is journaled and skipped.
    #[error("rollout aborted: {0}")]
    Abort(#[from] GatewayError),
    #[error("level {level}: only {distinct} distinct candidates")]
    InsufficientCandidates { level: usize, distinct: usize },
}

/// Which extreme a chain tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainKind {
    MaxChain,
    MinChain,
}

/// Why a chain stopped growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FinalAnswer,
    DepthLimit,
    Aborted,
}

/// One committed reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStep {
    pub text: String,
    /// Position in the owning chain.
    pub level: usize,
    pub prm: f64,
    pub policy_likelihood: f64,
    pub reward: RewardBreakdown,
}

/// A candidate that has been scored but not yet committed to a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub text: String,
    pub prm: f64,
    pub policy_likelihood: f64,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Max,
    Min,
}

/// Reward rule a rollout runs under. `Stage1` is the PRM + advantage form;
/// `Stage2` adds the outcome shaping term, scored once per completed chain
/// and folded into every step of that chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    Stage1,
    Stage2,
}

/// Expansion knobs, extracted from the pipeline config by callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutParams {
    pub budget: usize,
    pub max_depth: usize,
    pub prm_floor: f64,
    pub epsilon: f64,
}

/// One growing (or finished) chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub kind: ChainKind,
    pub steps: Vec<CandidateStep>,
    /// Prompt plus every committed step, each terminated by a newline; this
    /// is the exact generation prefix for the next expansion.
    pub prefix_text: String,
    pub termination: Option<Termination>,
}

impl ChainState {
    pub fn new(kind: ChainKind, prompt: &str) -> Self {
        ChainState {
            kind,
            steps: Vec::new(),
            prefix_text: prompt.to_string(),
            termination: None,
        }
    }

    pub fn terminated(&self) -> bool {
        self.termination.is_some()
    }

    pub fn last_step(&self) -> Option<&CandidateStep> {
        self.steps.last()
    }

    /// The trajectory rendering: committed step texts joined by newlines.
    pub fn rendered_solution(&self) -> String {
        let texts: Vec<&str> = self.steps.iter().map(|s| s.text.as_str()).collect();
        texts.join("\n")
    }

    fn push(&mut self, candidate: ScoredCandidate, max_depth: usize) {
        debug_assert!(!self.terminated(), "cannot commit to a terminated chain");
        let level = self.steps.len();
        self.prefix_text.push_str(&candidate.text);
        self.prefix_text.push('\n');
        let has_answer = candidate.text.contains(FINAL_ANSWER_MARKER);
        self.steps.push(CandidateStep {
            text: candidate.text,
            level,
            prm: candidate.prm,
            policy_likelihood: candidate.policy_likelihood,
            reward: candidate.reward,
        });
        if has_answer {
            self.termination = Some(Termination::FinalAnswer);
        } else if self.steps.len() >= max_depth {
            self.termination = Some(Termination::DepthLimit);
        }
    }
}

/// Select one candidate per the chain's mode and append it; updates the
/// prefix and marks termination on a final-answer step or at the depth
/// limit. The min side honors the plausibility floor.
pub fn commit_step(
    chain: &mut ChainState,
    candidates: Vec<ScoredCandidate>,
    mode: SelectionMode,
    prm_floor: f64,
    max_depth: usize,
) -> Result<(), RolloutError> {
    if candidates.is_empty() {
        return Err(RolloutError::InsufficientCandidates {
            level: chain.steps.len(),
            distinct: 0,
        });
    }
    let rewards: Vec<f64> = candidates.iter().map(|c| c.reward.total).collect();
    let prms: Vec<f64> = candidates.iter().map(|c| c.prm).collect();
    let index = match mode {
        SelectionMode::Max => argmax_reward(&rewards).expect("non-empty"),
        SelectionMode::Min => {
            plausible_argmin(&rewards, &prms, prm_floor, |_| true).expect("non-empty")
        }
    };
    let chosen = candidates.into_iter().nth(index).expect("index in range");
    chain.push(chosen, max_depth);
    Ok(())
}

/// A finished trajectory with its grading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<CandidateStep>,
    pub text: String,
    pub final_answer: Option<FinalAnswer>,
    pub correct: bool,
    pub cumulative_reward: f64,
    pub termination: Termination,
    pub stage: Stage,
}

/// Grade a terminated chain against the problem's gold answer. A chain that
/// hit the depth limit without a final answer is incorrect by definition.
pub fn finalize_trajectory(chain: &ChainState, problem: &Problem, stage: Stage) -> Trajectory {
    let termination = chain
        .termination
        .expect("finalize requires a terminated chain");
    let text = chain.rendered_solution();
    let final_answer = extract_final_answer(&text);
    let correct = final_answer
        .as_ref()
        .map(|ans| answers_equal(&ans.canonical, &normalize_answer(&problem.answer)))
        .unwrap_or(false);
    let cumulative_reward = chain.steps.iter().map(|s| s.reward.total).sum();
    Trajectory {
        steps: chain.steps.clone(),
        text,
        final_answer,
        correct,
        cumulative_reward,
        termination,
        stage,
    }
}

/// Outcome of one dual-chain rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub problem_id: String,
    pub sol_max: Trajectory,
    pub sol_min: Trajectory,
    /// Total candidates generated; bounded by `E + 2E(levels - 1)`.
    pub expansions: usize,
    /// Deepest chain length reached.
    pub levels: usize,
    pub stage: Stage,
}

// Duplicate texts within one expansion carry no extra signal; keep the
// first occurrence of each and flag the rest.
fn dedupe_candidates(candidates: Vec<GeneratedStep>) -> Vec<GeneratedStep> {
    let before = candidates.len();
    let mut seen = std::collections::HashSet::new();
    let deduped: Vec<GeneratedStep> = candidates
        .into_iter()
        .filter(|c| seen.insert(c.text.clone()))
        .collect();
    if deduped.len() < before {
        log::debug!(
            "dropped {} duplicate candidate(s) from one expansion",
            before - deduped.len()
        );
    }
    deduped
}

fn score_candidates(
    gateway: &dyn InferenceGateway,
    prefix: &str,
    candidates: Vec<GeneratedStep>,
    prev: Option<&CandidateStep>,
    epsilon: f64,
) -> Result<Vec<ScoredCandidate>, RolloutError> {
    let mut scored = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let score = gateway.score_step(prefix, &candidate)?;
        let reward = match prev {
            None => stage1_reward_with_epsilon(0, score.prm, 1.0, 1.0, 1.0, epsilon),
            Some(p) => stage1_reward_with_epsilon(
                p.level + 1,
                score.prm,
                score.policy_likelihood,
                p.policy_likelihood,
                p.prm,
                epsilon,
            ),
        };
        scored.push(ScoredCandidate {
            text: candidate.text,
            prm: score.prm,
            policy_likelihood: score.policy_likelihood,
            reward,
        });
    }
    Ok(scored)
}

/// Grow one chain to termination, one level at a time. Reads nothing but
/// the chain's own prefix, so the two chains of a rollout can be advanced
/// in any order with identical results. Returns candidates generated.
pub(crate) fn advance_chain(
    gateway: &dyn InferenceGateway,
    chain: &mut ChainState,
    role: GenRole,
    params: &RolloutParams,
    request_seed: u64,
) -> Result<usize, RolloutError> {
    let mode = match chain.kind {
        ChainKind::MaxChain => SelectionMode::Max,
        ChainKind::MinChain => SelectionMode::Min,
    };
    let mut expansions = 0;
    while !chain.terminated() {
        let raw = gateway.generate_steps(role, &chain.prefix_text, params.budget, request_seed)?;
        expansions += params.budget;
        let deduped = dedupe_candidates(raw);
        let prev = chain.last_step();
        let scored = score_candidates(gateway, &chain.prefix_text, deduped, prev, params.epsilon)?;
        commit_step(chain, scored, mode, params.prm_floor, params.max_depth)?;
    }
    Ok(expansions)
}

/// Execute one pruned dual-chain rollout.
///
/// Level 0 generates `budget` candidates from the prompt and seeds both
/// chains with distinct extremes of the shared pool; afterwards each chain
/// expands independently until a final answer or the depth limit. In
/// `Stage2` mode the ORM score of each completed chain is folded into every
/// step of that chain before grading.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    gateway: &dyn InferenceGateway,
    problem: &Problem,
    role: GenRole,
    reward_mode: RewardMode,
    prompt: &str,
    stage: Stage,
    params: &RolloutParams,
    request_seed: u64,
) -> Result<RolloutResult, RolloutError> {
    assert!(params.budget >= 2, "budget must be >= 2");
    assert!(params.max_depth >= 1, "max_depth must be >= 1");

    let raw = gateway.generate_steps(role, prompt, params.budget, request_seed)?;
    let mut expansions = params.budget;
    let deduped = dedupe_candidates(raw);
    if deduped.len() < 2 {
        return Err(RolloutError::InsufficientCandidates {
            level: 0,
            distinct: deduped.len(),
        });
    }
    let scored = score_candidates(gateway, prompt, deduped, None, params.epsilon)?;
    let rewards: Vec<f64> = scored.iter().map(|c| c.reward.total).collect();
    let prms: Vec<f64> = scored.iter().map(|c| c.prm).collect();
    let selection = select_extremes(&rewards, &prms, params.prm_floor).map_err(|_| {
        RolloutError::InsufficientCandidates {
            level: 0,
            distinct: scored.len(),
        }
    })?;

    let mut max_chain = ChainState::new(ChainKind::MaxChain, prompt);
    let mut min_chain = ChainState::new(ChainKind::MinChain, prompt);
    max_chain.push(scored[selection.max_index].clone(), params.max_depth);
    min_chain.push(scored[selection.min_index].clone(), params.max_depth);

    expansions += advance_chain(gateway, &mut max_chain, role, params, request_seed)?;
    expansions += advance_chain(gateway, &mut min_chain, role, params, request_seed)?;

    if reward_mode == RewardMode::Stage2 {
        fold_orm(gateway, problem, &mut max_chain)?;
        fold_orm(gateway, problem, &mut min_chain)?;
    }

    let levels = max_chain.steps.len().max(min_chain.steps.len());
    let bound = params.budget + 2 * params.budget * (levels.saturating_sub(1));
    assert!(
        expansions <= bound,
        "pruning bound violated: {expansions} > {bound} (levels = {levels})"
    );

    Ok(RolloutResult {
        problem_id: problem.id.clone(),
        sol_max: finalize_trajectory(&max_chain, problem, stage),
        sol_min: finalize_trajectory(&min_chain, problem, stage),
        expansions,
        levels,
        stage,
    })
}

// Stage-2/3 shaping: the ORM scores the chain's complete rendering once,
// and the scalar is added at every step of that chain.
fn fold_orm(
    gateway: &dyn InferenceGateway,
    problem: &Problem,
    chain: &mut ChainState,
) -> Result<(), RolloutError> {
    let orm = gateway.score_trajectory_orm(problem, &chain.rendered_solution())?;
    for step in &mut chain.steps {
        step.reward = step.reward.with_orm_shaping(orm);
    }
    Ok(())
}
