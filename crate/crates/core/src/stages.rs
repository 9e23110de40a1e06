//! Three-stage routing of rollout outcomes into preference pairs.
//!
//! Stage 1 runs the base policy and emits a pair directly when the max
//! chain is correct and the min chain is not. When both chains fail, stage
//! 2 re-rolls under a correction prompt seeded with the failed solution and
//! ORM-shaped rewards; a corrected pair is accepted only if its chosen
//! trajectory is correct *and* strictly out-rewards the failure it started
//! from. When both chains succeed there is no contrast to learn from, so
//! stage 3 has the smaller policy re-explore with a doubled budget to
//! manufacture a plausible incorrect negative. The leftover case (min
//! correct, max incorrect) is dropped: pairing it would reward the
//! lower-scored chain.

use serde::{Deserialize, Serialize};

use crate::backend::{GenRole, InferenceGateway, Problem};
use crate::config::PipelineConfig;
use crate::curator::{validate_pair, PreferencePair, Stage};
use crate::hashing::remix;
use crate::rollout::{rollout, RewardMode, RolloutError, RolloutParams, RolloutResult, Trajectory};

/// Stage-1 generation instruction (versioned template).
pub const SELF_GENERATION_TEMPLATE: &str = include_str!("../prompts/self_generation.txt");
/// Stage-2 correction instruction (versioned template).
pub const SELF_CORRECTION_TEMPLATE: &str = include_str!("../prompts/self_correction.txt");

/// Generation prompt for a question; every pair's `prompt` field stores
/// this rendering regardless of the stage that produced the pair.
pub fn stage1_prompt(question: &str) -> String {
    format!(
        "{}\n\nProblem: {}\n\nSolution:\n",
        SELF_GENERATION_TEMPLATE.trim_end(),
        question
    )
}

/// Correction prompt: generation instruction, question, the failed solution,
/// then the correction instruction.
pub fn self_correction_prompt(question: &str, failed_solution: &str) -> String {
    format!(
        "{}\n\nProblem: {}\n\nSolution:\n{}\n\n{}\n\nSolution:\n",
        SELF_GENERATION_TEMPLATE.trim_end(),
        question,
        failed_solution.trim_end(),
        SELF_CORRECTION_TEMPLATE.trim_end()
    )
}

/// Where a problem goes after stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteDecision {
    EmitPair,
    SelfCorrect,
    Diversify,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRoute {
    pub decision: RouteDecision,
    pub reason: String,
}

/// Pure routing on the two correctness verdicts.
pub fn route_outcome(sol_max_correct: bool, sol_min_correct: bool) -> StageRoute {
    let (decision, reason) = match (sol_max_correct, sol_min_correct) {
        (true, false) => (RouteDecision::EmitPair, "stage-1 contrast"),
        (false, false) => (RouteDecision::SelfCorrect, "both incorrect"),
        (true, true) => (RouteDecision::Diversify, "both correct"),
        (false, true) => (RouteDecision::Drop, "inverted contrast"),
    };
    StageRoute {
        decision,
        reason: reason.to_string(),
    }
}

/// Result of running one stage on one problem. `accepted` iff `pair` is
/// present; `step_pairs` carries the optional per-divergence-level pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub pair: Option<PreferencePair>,
    #[serde(default)]
    pub step_pairs: Vec<PreferencePair>,
    pub rollout: Option<RolloutResult>,
    pub accepted: bool,
    pub reject_reason: Option<String>,
}

impl StageOutcome {
    fn rejected(stage: Stage, rollout: Option<RolloutResult>, reason: &str) -> Self {
        StageOutcome {
            stage,
            pair: None,
            step_pairs: Vec::new(),
            rollout,
            accepted: false,
            reject_reason: Some(reason.to_string()),
        }
    }
}

fn rollout_params(cfg: &PipelineConfig, budget: usize) -> RolloutParams {
    RolloutParams {
        budget,
        max_depth: cfg.max_depth,
        prm_floor: cfg.prm_floor,
        epsilon: cfg.epsilon,
    }
}

fn make_pair(
    problem: &Problem,
    prompt: &str,
    chosen: &Trajectory,
    rejected: &Trajectory,
    stage: Stage,
) -> PreferencePair {
    PreferencePair {
        problem_id: problem.id.clone(),
        prompt: prompt.to_string(),
        chosen: chosen.text.clone(),
        rejected: rejected.text.clone(),
        stage,
        chosen_reward: chosen.cumulative_reward,
        rejected_reward: rejected.cumulative_reward,
        chosen_correct: chosen.correct,
        rejected_correct: rejected.correct,
    }
}

// Step-level pairs: one pair per divergence level, truncating both
// trajectories to the same strict-prefix length. Verdicts and the full
// cumulative rewards of the truncations are inherited from the complete
// trajectories they came from.
fn step_level_pairs(
    problem: &Problem,
    prompt: &str,
    chosen: &Trajectory,
    rejected: &Trajectory,
    stage: Stage,
) -> Vec<PreferencePair> {
    let shared = chosen.steps.len().min(rejected.steps.len());
    if shared < 2 {
        return Vec::new();
    }
    let render = |traj: &Trajectory, levels: usize| -> (String, f64) {
        let texts: Vec<&str> = traj.steps[..levels]
            .iter()
            .map(|s| s.text.as_str())
            .collect();
        let reward: f64 = traj.steps[..levels].iter().map(|s| s.reward.total).sum();
        (texts.join("\n"), reward)
    };
    let mut pairs = Vec::new();
    for levels in 1..shared {
        let (chosen_text, chosen_reward) = render(chosen, levels);
        let (rejected_text, rejected_reward) = render(rejected, levels);
        if chosen_text == rejected_text {
            continue;
        }
        pairs.push(PreferencePair {
            problem_id: problem.id.clone(),
            prompt: prompt.to_string(),
            chosen: chosen_text,
            rejected: rejected_text,
            stage,
            chosen_reward,
            rejected_reward,
            chosen_correct: chosen.correct,
            rejected_correct: rejected.correct,
        });
    }
    pairs
}

/// Stage 1: pruned rollout with the base policy at budget `E`, then routing.
/// On an `EmitPair` route the emitted outcome is returned alongside.
pub fn run_stage1(
    gateway: &dyn InferenceGateway,
    problem: &Problem,
    cfg: &PipelineConfig,
    request_seed: u64,
) -> Result<(RolloutResult, StageRoute, Option<StageOutcome>), RolloutError> {
    assert!(
        !problem.question.trim().is_empty(),
        "problem question must be non-empty"
    );
    assert!(
        !problem.answer.trim().is_empty(),
        "problem answer must be non-empty"
    );
    let prompt = stage1_prompt(&problem.question);
    let result = rollout(
        gateway,
        problem,
        GenRole::Policy,
        RewardMode::Stage1,
        &prompt,
        Stage::SelfGeneration,
        &rollout_params(cfg, cfg.e),
        remix(request_seed, 1),
    )?;
    let route = route_outcome(result.sol_max.correct, result.sol_min.correct);
    let outcome = if route.decision == RouteDecision::EmitPair {
        let pair = make_pair(
            problem,
            &prompt,
            &result.sol_max,
            &result.sol_min,
            Stage::SelfGeneration,
        );
        Some(match validate_pair(&pair, None) {
            Ok(()) => StageOutcome {
                stage: Stage::SelfGeneration,
                step_pairs: if cfg.step_level_pairs {
                    step_level_pairs(
                        problem,
                        &prompt,
                        &result.sol_max,
                        &result.sol_min,
                        Stage::SelfGeneration,
                    )
                } else {
                    Vec::new()
                },
                pair: Some(pair),
                rollout: Some(result.clone()),
                accepted: true,
                reject_reason: None,
            },
            Err(reason) => StageOutcome::rejected(
                Stage::SelfGeneration,
                Some(result.clone()),
                &reason.to_string(),
            ),
        })
    } else {
        None
    };
    Ok((result, route, outcome))
}

/// Stage 2: self-correction of the failed stage-1 max chain (the
/// highest-reward failure is the most informative error). Accepts a pair
/// only when the corrected max chain is correct and strictly out-rewards
/// the failed solution.
pub fn self_correct(
    gateway: &dyn InferenceGateway,
    problem: &Problem,
    failed: &Trajectory,
    cfg: &PipelineConfig,
    request_seed: u64,
) -> StageOutcome {
    let prompt = self_correction_prompt(&problem.question, &failed.text);
    let result = match rollout(
        gateway,
        problem,
        GenRole::Policy,
        RewardMode::Stage2,
        &prompt,
        Stage::SelfCorrection,
        &rollout_params(cfg, cfg.e),
        remix(request_seed, 2),
    ) {
        Ok(r) => r,
        Err(_) => return StageOutcome::rejected(Stage::SelfCorrection, None, "abort"),
    };

    if !result.sol_max.correct {
        return StageOutcome::rejected(Stage::SelfCorrection, Some(result), "correction failed");
    }
    if result.sol_max.cumulative_reward <= failed.cumulative_reward {
        return StageOutcome::rejected(Stage::SelfCorrection, Some(result), "no superiority");
    }

    // Pairs train under the plain generation prompt; the correction context
    // stays in the journal.
    let pair_prompt = stage1_prompt(&problem.question);
    let pair = make_pair(
        problem,
        &pair_prompt,
        &result.sol_max,
        &result.sol_min,
        Stage::SelfCorrection,
    );
    match validate_pair(&pair, Some(failed.cumulative_reward)) {
        Ok(()) => StageOutcome {
            stage: Stage::SelfCorrection,
            step_pairs: if cfg.step_level_pairs {
                step_level_pairs(
                    problem,
                    &pair_prompt,
                    &result.sol_max,
                    &result.sol_min,
                    Stage::SelfCorrection,
                )
            } else {
                Vec::new()
            },
            pair: Some(pair),
            rollout: Some(result),
            accepted: true,
            reject_reason: None,
        },
        Err(reason) => {
            StageOutcome::rejected(Stage::SelfCorrection, Some(result), &reason.to_string())
        }
    }
}

/// Stage 3: the smaller policy re-explores the problem at budget `2E` to
/// manufacture an incorrect-but-plausible negative; the known-correct
/// stage-1 max chain stays as chosen.
pub fn diversify(
    gateway: &dyn InferenceGateway,
    problem: &Problem,
    stage1_sol_max: &Trajectory,
    cfg: &PipelineConfig,
    request_seed: u64,
) -> StageOutcome {
    let prompt = stage1_prompt(&problem.question);
    let result = match rollout(
        gateway,
        problem,
        GenRole::SmallPolicy,
        RewardMode::Stage2,
        &prompt,
        Stage::Diversity,
        &rollout_params(cfg, cfg.small_budget()),
        remix(request_seed, 3),
    ) {
        Ok(r) => r,
        Err(_) => return StageOutcome::rejected(Stage::Diversity, None, "abort"),
    };

    if result.sol_min.correct {
        return StageOutcome::rejected(Stage::Diversity, Some(result), "no incorrect found");
    }

    let pair = make_pair(
        problem,
        &prompt,
        stage1_sol_max,
        &result.sol_min,
        Stage::Diversity,
    );
    match validate_pair(&pair, None) {
        Ok(()) => StageOutcome {
            stage: Stage::Diversity,
            step_pairs: if cfg.step_level_pairs {
                step_level_pairs(
                    problem,
                    &prompt,
                    stage1_sol_max,
                    &result.sol_min,
                    Stage::Diversity,
                )
            } else {
                Vec::new()
            },
            pair: Some(pair),
            rollout: Some(result),
            accepted: true,
            reject_reason: None,
        },
        Err(reason) => StageOutcome::rejected(Stage::Diversity, Some(result), &reason.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{GatewayError, GeneratedStep, MockGateway};

    fn mock_cfg(p_policy: f64, p_small: f64) -> (PipelineConfig, MockGateway) {
        let mut cfg = PipelineConfig::default();
        cfg.mock.p_step_correct_policy = p_policy;
        cfg.mock.p_step_correct_small = p_small;
        cfg.mock.steps_per_problem = 2;
        let gw = MockGateway::new(cfg.mock, cfg.seed);
        (cfg, gw)
    }

    #[test]
    fn route_truth_table_is_exhaustive() {
        assert_eq!(route_outcome(true, false).decision, RouteDecision::EmitPair);
        assert_eq!(
            route_outcome(false, false).decision,
            RouteDecision::SelfCorrect
        );
        assert_eq!(route_outcome(true, true).decision, RouteDecision::Diversify);
        assert_eq!(route_outcome(false, true).decision, RouteDecision::Drop);
        assert_eq!(route_outcome(false, true).reason, "inverted contrast");
    }

    #[test]
    fn all_correct_world_routes_to_diversify() {
        let (cfg, gw) = mock_cfg(1.0, 0.5);
        for i in 0..5 {
            let problem = gw.spec().problem(i);
            let (_, route, outcome) = run_stage1(&gw, &problem, &cfg, i as u64).unwrap();
            assert_eq!(route.decision, RouteDecision::Diversify);
            assert!(outcome.is_none());
        }
    }

    #[test]
    fn all_broken_world_routes_to_self_correct() {
        let (cfg, gw) = mock_cfg(0.0, 0.5);
        for i in 0..5 {
            let problem = gw.spec().problem(i);
            let (_, route, _) = run_stage1(&gw, &problem, &cfg, i as u64).unwrap();
            assert_eq!(route.decision, RouteDecision::SelfCorrect);
        }
    }

    #[test]
    fn emitted_stage1_pair_is_valid_contrast() {
        let (cfg, gw) = mock_cfg(0.5, 0.5);
        let mut emitted = 0;
        for i in 0..60 {
            let problem = gw.spec().problem(i);
            let (result, route, outcome) = run_stage1(&gw, &problem, &cfg, i as u64).unwrap();
            if route.decision == RouteDecision::EmitPair {
                let outcome = outcome.expect("EmitPair routes carry an outcome");
                assert!(outcome.accepted);
                let pair = outcome.pair.unwrap();
                assert!(pair.chosen_correct);
                assert!(!pair.rejected_correct);
                assert_eq!(pair.chosen, result.sol_max.text);
                assert_eq!(pair.prompt, stage1_prompt(&problem.question));
                emitted += 1;
            }
        }
        assert!(emitted > 0, "0.5-world should emit some stage-1 pairs");
    }

    #[test]
    fn self_correction_accepts_only_superior_corrections() {
        let (cfg, gw) = mock_cfg(0.35, 0.5);
        let mut accepted = 0;
        let mut seen = 0;
        for i in 0..80 {
            let problem = gw.spec().problem(i);
            let (result, route, _) = run_stage1(&gw, &problem, &cfg, i as u64).unwrap();
            if route.decision != RouteDecision::SelfCorrect {
                continue;
            }
            seen += 1;
            let outcome = self_correct(&gw, &problem, &result.sol_max, &cfg, i as u64);
            assert_eq!(outcome.stage, Stage::SelfCorrection);
            if outcome.accepted {
                accepted += 1;
                let pair = outcome.pair.unwrap();
                assert!(pair.chosen_correct);
                assert!(pair.chosen_reward > result.sol_max.cumulative_reward);
                // The correction ran under the correction prompt, but the
                // pair trains under the stage-1 prompt.
                assert_eq!(pair.prompt, stage1_prompt(&problem.question));
            } else {
                assert!(outcome.reject_reason.is_some());
            }
        }
        assert!(seen > 0);
        assert!(accepted > 0, "some corrections should land");
    }

    #[test]
    fn diversify_pairs_policy_chosen_with_small_rejected() {
        let (cfg, gw) = mock_cfg(1.0, 0.2);
        let mut accepted = 0;
        for i in 0..20 {
            let problem = gw.spec().problem(i);
            let (result, route, _) = run_stage1(&gw, &problem, &cfg, i as u64).unwrap();
            assert_eq!(route.decision, RouteDecision::Diversify);
            let outcome = diversify(&gw, &problem, &result.sol_max, &cfg, i as u64);
            if outcome.accepted {
                accepted += 1;
                let pair = outcome.pair.unwrap();
                assert_eq!(
                    pair.chosen, result.sol_max.text,
                    "chosen is the stage-1 max chain"
                );
                assert!(!pair.rejected_correct);
                let small = outcome.rollout.unwrap();
                assert_eq!(pair.rejected, small.sol_min.text);
            } else {
                assert_eq!(outcome.reject_reason.as_deref(), Some("no incorrect found"));
            }
        }
        assert!(
            accepted > 0,
            "a 0.2 small policy should produce incorrect negatives"
        );
    }

    #[test]
    fn diversify_uses_doubled_budget() {
        let (cfg, gw) = mock_cfg(1.0, 1.0);
        let problem = gw.spec().problem(0);
        let (result, _, _) = run_stage1(&gw, &problem, &cfg, 0).unwrap();
        let outcome = diversify(&gw, &problem, &result.sol_max, &cfg, 0);
        let small = outcome.rollout.expect("rollout ran");
        // First level alone spends the doubled budget.
        assert!(small.expansions >= cfg.small_budget());
        assert_eq!(cfg.small_budget(), 10);
        // Fully-correct small policy cannot produce a negative.
        assert!(!outcome.accepted);
    }

    #[test]
    fn self_correction_prompt_embeds_failure_and_instruction() {
        let prompt = self_correction_prompt(
            "What is 2+2?",
            "Step 0: guess.\nFinal Answer: The final answer is $5$. I hope it is correct.",
        );
        assert!(prompt.contains("What is 2+2?"));
        assert!(prompt.contains("$5$"));
        assert!(prompt.contains(SELF_CORRECTION_TEMPLATE.trim_end()));
        assert!(prompt.ends_with("Solution:\n"));
        // Generation instruction comes first, correction instruction after
        // the failed solution.
        let gen_pos = prompt.find(SELF_GENERATION_TEMPLATE.trim_end()).unwrap();
        let cor_pos = prompt.find(SELF_CORRECTION_TEMPLATE.trim_end()).unwrap();
        assert!(gen_pos < cor_pos);
    }

    #[test]
    fn step_level_pairs_emitted_when_enabled() {
        let (mut cfg, _) = mock_cfg(0.5, 0.5);
        cfg.step_level_pairs = true;
        cfg.mock.steps_per_problem = 3;
        let gw = MockGateway::new(cfg.mock, cfg.seed);
        let mut saw_step_pairs = false;
        for i in 0..60 {
            let problem = gw.spec().problem(i);
            let (_, route, outcome) = run_stage1(&gw, &problem, &cfg, i as u64).unwrap();
            if route.decision == RouteDecision::EmitPair {
                let outcome = outcome.unwrap();
                if outcome.accepted && !outcome.step_pairs.is_empty() {
                    saw_step_pairs = true;
                    for sp in &outcome.step_pairs {
                        assert_ne!(sp.chosen, sp.rejected);
                        assert!(sp.chosen_correct);
                    }
                }
            }
        }
        assert!(saw_step_pairs);
    }

    // Delegates generation to a perfect mock world but pins the reward
    // models low: corrections come out correct yet cannot out-reward a
    // decent failed solution.
    struct PinnedScoresGateway {
        inner: MockGateway,
    }
    impl InferenceGateway for PinnedScoresGateway {
        fn generate_steps(
            &self,
            role: GenRole,
            prefix: &str,
            n: usize,
            seed: u64,
        ) -> Result<Vec<GeneratedStep>, GatewayError> {
            self.inner.generate_steps(role, prefix, n, seed)
        }
        fn score_step_prm(&self, _prefix: &str, _step: &str) -> Result<f64, GatewayError> {
            Ok(0.05)
        }
        fn score_trajectory_orm(&self, _p: &Problem, _s: &str) -> Result<f64, GatewayError> {
            Ok(0.0)
        }
    }

    #[test]
    fn correct_but_unimproved_correction_is_rejected_for_no_superiority() {
        let (mut cfg, _) = mock_cfg(1.0, 0.5);
        cfg.mock.steps_per_problem = 1;
        let gw = PinnedScoresGateway {
            inner: MockGateway::new(cfg.mock, cfg.seed),
        };
        let problem = gw.inner.spec().problem(0);

        // A journaled failure whose cumulative reward sits far above
        // anything a 0.05-PRM, 0-ORM rollout can accumulate.
        let failed = Trajectory {
            steps: Vec::new(),
            text: "Step 0: a wrong but confident derivation.\n\
                   Final Answer: The final answer is $999$. I hope it is correct."
                .into(),
            final_answer: None,
            correct: false,
            cumulative_reward: 50.0,
            termination: crate::rollout::Termination::FinalAnswer,
            stage: Stage::SelfGeneration,
        };

        let outcome = self_correct(&gw, &problem, &failed, &cfg, 4);
        assert!(!outcome.accepted);
        assert_eq!(outcome.reject_reason.as_deref(), Some("no superiority"));
        // The correction itself did reach the right answer.
        assert!(outcome.rollout.unwrap().sol_max.correct);
    }

    // A scripted gateway for abort-path coverage.
    struct FailingGateway;
    impl InferenceGateway for FailingGateway {
        fn generate_steps(
            &self,
            _role: GenRole,
            _prefix: &str,
            _n: usize,
            _seed: u64,
        ) -> Result<Vec<GeneratedStep>, GatewayError> {
            Err(GatewayError::Transport {
                role: crate::backend::Role::Policy,
                attempts: 3,
                cause: "connection refused".into(),
            })
        }
        fn score_step_prm(&self, _prefix: &str, _step: &str) -> Result<f64, GatewayError> {
            Ok(0.5)
        }
        fn score_trajectory_orm(&self, _p: &Problem, _s: &str) -> Result<f64, GatewayError> {
            Ok(0.0)
        }
    }

    #[test]
    fn stage2_abort_is_a_rejection_not_a_panic() {
        let (cfg, gw) = mock_cfg(0.0, 0.5);
        let problem = gw.spec().problem(0);
        let (result, _, _) = run_stage1(&gw, &problem, &cfg, 0).unwrap();
        let outcome = self_correct(&FailingGateway, &problem, &result.sol_max, &cfg, 0);
        assert!(!outcome.accepted);
        assert_eq!(outcome.reject_reason.as_deref(), Some("abort"));
        assert!(outcome.rollout.is_none());
    }
}
