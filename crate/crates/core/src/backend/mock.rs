//! Deterministic mock world standing in for the policy, PRM, and ORM roles.
//!
//! Every operation is a pure function of (world seed, run seed, call inputs),
//! so replaying a pipeline run is byte-identical and results are independent
//! of worker scheduling. The scoring table is fixed: a clean step scores 0.9
//! under the mock PRM, an error-injected step 0.1; the mock ORM is the
//! answer-match indicator.
//!
//! Step texts carry their own ground truth: error-injected steps contain the
//! token "mistakenly", and whether a chain's final answer comes out correct
//! is decided by one fresh coin per chain prefix (probability
//! `p_step_correct_*` for the generating role). Keying that coin on the full
//! prefix makes the max- and min-chain outcomes of one problem independent
//! draws, which is what the routing-fraction checks rely on.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{clamp_unit, GatewayError, GenRole, GeneratedStep, InferenceGateway, Problem};
use crate::answer::{answers_equal, extract_final_answer, normalize_answer};
use crate::hashing::{stable_hash64, unit_f64};

/// Parameters of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockWorldSpec {
    #[serde(default = "default_n_problems")]
    pub n_problems: usize,
    /// Probability a policy-generated step is clean, and that a policy
    /// chain's final answer lands on the gold value.
    #[serde(default = "default_p_policy")]
    pub p_step_correct_policy: f64,
    /// Same for the smaller diversity policy.
    #[serde(default = "default_p_small")]
    pub p_step_correct_small: f64,
    /// Work steps before the final-answer level; must be >= 1 so the two
    /// chains have diverged before their outcome coins are drawn.
    #[serde(default = "default_steps")]
    pub steps_per_problem: usize,
    #[serde(default = "default_world_seed")]
    pub seed: u64,
}

fn default_n_problems() -> usize {
    500
}
fn default_p_policy() -> f64 {
    0.8
}
fn default_p_small() -> f64 {
    0.5
}
fn default_steps() -> usize {
    3
}
fn default_world_seed() -> u64 {
    7
}

impl Default for MockWorldSpec {
    fn default() -> Self {
        MockWorldSpec {
            n_problems: default_n_problems(),
            p_step_correct_policy: default_p_policy(),
            p_step_correct_small: default_p_small(),
            steps_per_problem: default_steps(),
            seed: default_world_seed(),
        }
    }
}

impl MockWorldSpec {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_step_correct_policy", self.p_step_correct_policy),
            ("p_step_correct_small", self.p_step_correct_small),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        if self.steps_per_problem == 0 {
            return Err("steps_per_problem must be >= 1".to_string());
        }
        Ok(())
    }

    fn params(&self, index: usize) -> (u64, u64, u64) {
        let h = stable_hash64(&[&self.seed.to_le_bytes(), b"problem", &index.to_le_bytes()]);
        let a = 10 + h % 90;
        let b = 2 + (h >> 8) % 8;
        let c = 3 + (h >> 16) % 17;
        (a, b, c)
    }

    /// Gold final answer of problem `index`.
    pub fn gold_answer(&self, index: usize) -> i64 {
        let (a, b, c) = self.params(index);
        (a + b * c) as i64
    }

    /// The `index`-th synthetic problem; a pure function of (spec, index).
    pub fn problem(&self, index: usize) -> Problem {
        let (a, b, c) = self.params(index);
        Problem {
            id: format!("mock-{index:05}"),
            question: format!(
                "[mock:{index}] A tally starts at {a} and each of {b} rounds adds {c} more. \
                 What is the final tally?"
            ),
            answer: (a + b * c).to_string(),
        }
    }

    pub fn problems(&self) -> Vec<Problem> {
        (0..self.n_problems).map(|i| self.problem(i)).collect()
    }

    /// Write the corpus as `{id, question, answer}` JSONL.
    pub fn write_corpus(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut file = std::fs::File::create(path)?;
        for problem in self.problems() {
            let line = serde_json::to_string(&problem).map_err(std::io::Error::other)?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
        }
        file.flush()
    }
}

/// Token marking an error-injected mock step.
pub const ERROR_MARKER: &str = "mistakenly";

static MOCK_ID_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\[mock:(\d+)\]").unwrap());

const FINAL_LEADS: [&str; 10] = [
    "Collecting the results,",
    "Combining the steps above,",
    "Putting everything together,",
    "Summing the contributions,",
    "Reading off the total,",
    "After the last round,",
    "Evaluating the expression,",
    "Tallying the additions,",
    "Carrying out the final sum,",
    "Resolving the running total,",
];

/// Deterministic gateway over a [`MockWorldSpec`].
pub struct MockGateway {
    spec: MockWorldSpec,
    base: u64,
}

impl MockGateway {
    /// `run_seed` is folded into every draw so a different pipeline seed
    /// yields a different (but equally deterministic) world trace.
    pub fn new(spec: MockWorldSpec, run_seed: u64) -> Self {
        let base = stable_hash64(&[&spec.seed.to_le_bytes(), &run_seed.to_le_bytes()]);
        MockGateway { spec, base }
    }

    pub fn spec(&self) -> &MockWorldSpec {
        &self.spec
    }

    fn draw(&self, tag: &[u8], prefix: &str, index: u64) -> u64 {
        stable_hash64(&[
            &self.base.to_le_bytes(),
            tag,
            prefix.as_bytes(),
            &index.to_le_bytes(),
        ])
    }

    /// Gold answer for the problem referenced in `prefix`, or a
    /// prefix-derived stand-in when no marker is present.
    fn gold_for_prefix(&self, prefix: &str) -> i64 {
        match MOCK_ID_RE
            .captures(prefix)
            .and_then(|c| c[1].parse::<usize>().ok())
        {
            Some(index) => self.spec.gold_answer(index),
            None => (stable_hash64(&[b"gold", prefix.as_bytes()]) % 900 + 100) as i64,
        }
    }

    /// Committed steps so far: non-empty lines after the last "Solution:".
    fn committed_steps(prefix: &str) -> usize {
        let tail = match prefix.rfind("Solution:") {
            Some(pos) => {
                let after = &prefix[pos..];
                match after.find('\n') {
                    Some(nl) => &after[nl + 1..],
                    None => "",
                }
            }
            None => prefix,
        };
        tail.lines().filter(|l| !l.trim().is_empty()).count()
    }

    fn p_correct(&self, role: GenRole) -> f64 {
        match role {
            GenRole::Policy => self.spec.p_step_correct_policy,
            GenRole::SmallPolicy => self.spec.p_step_correct_small,
        }
    }
}

impl InferenceGateway for MockGateway {
    fn generate_steps(
        &self,
        role: GenRole,
        prefix: &str,
        n: usize,
        request_seed: u64,
    ) -> Result<Vec<GeneratedStep>, GatewayError> {
        assert!(n >= 2, "generation budget must be >= 2, got {n}");
        let p = self.p_correct(role);
        let level = Self::committed_steps(prefix);
        let mut out = Vec::with_capacity(n);

        if level >= self.spec.steps_per_problem {
            // Final-answer level. One outcome coin per chain prefix: every
            // candidate of this expansion states the same answer.
            let coin = unit_f64(self.draw(b"traj", prefix, request_seed));
            let gold = self.gold_for_prefix(prefix);
            let answer = if coin < p {
                gold
            } else {
                gold + 1 + (self.draw(b"off", prefix, request_seed) % 7) as i64
            };
            for i in 0..n {
                let lead = FINAL_LEADS[i % FINAL_LEADS.len()];
                let lik = 0.30 + 0.60 * unit_f64(self.draw(b"lik", prefix, mix(request_seed, i)));
                out.push(GeneratedStep {
                    text: format!(
                        "{lead} Final Answer: The final answer is ${answer}$. I hope it is correct."
                    ),
                    policy_likelihood: lik,
                });
            }
        } else {
            for i in 0..n {
                let err = unit_f64(self.draw(b"err", prefix, mix(request_seed, i))) >= p;
                let value = 100 + self.draw(b"val", prefix, mix(request_seed, i)) % 900;
                let lik = 0.30 + 0.60 * unit_f64(self.draw(b"lik", prefix, mix(request_seed, i)));
                let text = if err {
                    format!("Step {level}: {ERROR_MARKER} dropping a term, leaving {value}.")
                } else {
                    format!("Step {level}: carrying the running total forward to {value}.")
                };
                out.push(GeneratedStep {
                    text,
                    policy_likelihood: lik,
                });
            }
        }
        Ok(out)
    }

    fn score_step_prm(&self, prefix: &str, step: &str) -> Result<f64, GatewayError> {
        assert!(!step.is_empty(), "cannot score an empty step");
        let score = if let Some(ans) = extract_final_answer(step) {
            let gold = self.gold_for_prefix(prefix).to_string();
            if answers_equal(&ans.canonical, &normalize_answer(&gold)) {
                0.9
            } else {
                0.1
            }
        } else if step.contains(ERROR_MARKER) {
            0.1
        } else {
            0.9
        };
        Ok(clamp_unit(score))
    }

    fn score_trajectory_orm(
        &self,
        problem: &Problem,
        solution_text: &str,
    ) -> Result<f64, GatewayError> {
        let score = match extract_final_answer(solution_text) {
            Some(ans) if answers_equal(&ans.canonical, &normalize_answer(&problem.answer)) => 1.0,
            _ => 0.0,
        };
        Ok(clamp_unit(score))
    }
}

fn mix(request_seed: u64, index: usize) -> u64 {
    request_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64)
}
