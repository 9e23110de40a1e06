//! DPO objective as verified scalar math, plus a toy tabular trainer.
//!
//! The loss for one preference pair is `-log sigmoid(beta * (a - b))` with
//! `a` and `b` the chosen/rejected log-ratios against a frozen reference.
//! Everything here is exact-formula code with analytic gradients; the toy
//! trainer demonstrates preference alignment end-to-end on exported pairs
//! without any tokenizer or GPU machinery.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curator::PreferencePair;

#[derive(Debug, Error, PartialEq)]
pub enum DpoError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("cannot score ({context:?}, {response:?}): not in policy table")]
    Score { context: String, response: String },
}

/// The four sequence log-probabilities one DPO step consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoExample {
    pub logp_theta_chosen: f64,
    pub logp_theta_rejected: f64,
    pub logp_ref_chosen: f64,
    pub logp_ref_rejected: f64,
}

impl DpoExample {
    pub fn new(
        logp_theta_chosen: f64,
        logp_theta_rejected: f64,
        logp_ref_chosen: f64,
        logp_ref_rejected: f64,
    ) -> Self {
        let ex = DpoExample {
            logp_theta_chosen,
            logp_theta_rejected,
            logp_ref_chosen,
            logp_ref_rejected,
        };
        ex.check();
        ex
    }

    fn check(&self) {
        assert!(
            self.logp_theta_chosen.is_finite()
                && self.logp_theta_rejected.is_finite()
                && self.logp_ref_chosen.is_finite()
                && self.logp_ref_rejected.is_finite(),
            "log-probabilities must be finite: {self:?}"
        );
    }

    /// beta * ((ltc - lrc) - (ltr - lrr)); the scalar the sigmoid sees.
    fn margin_logit(&self, beta: f64) -> f64 {
        let a = self.logp_theta_chosen - self.logp_ref_chosen;
        let b = self.logp_theta_rejected - self.logp_ref_rejected;
        beta * (a - b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoParams {
    pub beta: f64,
}

impl Default for DpoParams {
    fn default() -> Self {
        DpoParams { beta: 0.8 }
    }
}

impl DpoParams {
    pub fn new(beta: f64) -> Self {
        assert!(
            beta.is_finite() && beta > 0.0,
            "beta must be positive and finite"
        );
        DpoParams { beta }
    }
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(z)` for one example, via the stable softplus form.
pub fn dpo_loss(example: &DpoExample, params: &DpoParams) -> f64 {
    example.check();
    softplus(-example.margin_logit(params.beta))
}

/// Partial derivatives of `dpo_loss` in the two policy log-probabilities
/// (`d_chosen`, `d_rejected`); the reference terms are constants.
pub fn dpo_grad(example: &DpoExample, params: &DpoParams) -> (f64, f64) {
    example.check();
    let z = example.margin_logit(params.beta);
    let slope = params.beta * (1.0 - sigmoid(z));
    (-slope, slope)
}

/// Arithmetic mean of per-example losses.
pub fn batch_loss(examples: &[DpoExample], params: &DpoParams) -> Result<f64, DpoError> {
    if examples.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let sum: f64 = examples.iter().map(|e| dpo_loss(e, params)).sum();
    Ok(sum / examples.len() as f64)
}

/// Sum of per-token log-probabilities over response tokens only. The empty
/// response sums to 0 and is flagged as degenerate.
pub fn sequence_logprob_tokens(response_token_logps: &[f64]) -> SequenceScore {
    SequenceScore {
        logprob: response_token_logps.iter().sum(),
        degenerate: response_token_logps.is_empty(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceScore {
    pub logprob: f64,
    pub degenerate: bool,
}

/// A tabular softmax policy: per context, a logit for every known response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    logits: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ToyPolicy {
    pub fn new() -> Self {
        ToyPolicy {
            logits: BTreeMap::new(),
        }
    }

    /// Register a (context, response) cell, initialized to logit 0 unless set.
    pub fn set_logit(&mut self, context: &str, response: &str, logit: f64) {
        self.logits
            .entry(context.to_string())
            .or_default()
            .insert(response.to_string(), logit);
    }

    pub fn contexts(&self) -> impl Iterator<Item = &String> {
        self.logits.keys()
    }

    /// Softmax probability of `response` under `context`.
    pub fn prob(&self, context: &str, response: &str) -> Result<f64, DpoError> {
        Ok(self.logprob(context, response)?.exp())
    }

    /// Log-probability of `response` under `context`; this is the sequence
    /// log-probability unit the DPO objective consumes for toy policies.
    pub fn logprob(&self, context: &str, response: &str) -> Result<f64, DpoError> {
        let row = self.logits.get(context).ok_or_else(|| DpoError::Score {
            context: context.to_string(),
            response: response.to_string(),
        })?;
        let logit = *row.get(response).ok_or_else(|| DpoError::Score {
            context: context.to_string(),
            response: response.to_string(),
        })?;
        Ok(logit - log_sum_exp(row.values().copied()))
    }

    fn row(&self, context: &str) -> Option<&BTreeMap<String, f64>> {
        self.logits.get(context)
    }
}

impl Default for ToyPolicy {
    fn default() -> Self {
        Self::new()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// One row of the training trace emitted by [`toy_train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginPoint {
    pub step: usize,
    pub loss: f64,
    /// mean(logp_theta_chosen - logp_theta_rejected) over the pair set.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutcome {
    pub policy: ToyPolicy,
    pub trace: Vec<MarginPoint>,
}

/// Full-batch gradient descent of the DPO loss over a tabular policy.
///
/// Every pair's (prompt, chosen) and (prompt, rejected) must exist in the
/// policy table; the reference stays frozen. `lr = 0` is the null update
/// and returns the policy unchanged. Negative `lr` or `steps = 0` are
/// contract violations.
pub fn toy_train(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[PreferencePair],
    steps: usize,
    lr: f64,
    params: &DpoParams,
) -> Result<ToyTrainOutcome, DpoError> {
    assert!(
        lr >= 0.0 && lr.is_finite(),
        "learning rate must be non-negative"
    );
    assert!(steps > 0, "steps must be positive");
    if pairs.is_empty() {
        return Err(DpoError::EmptyBatch);
    }

    let mut policy = policy.clone();
    let mut trace = Vec::with_capacity(steps);
    let n = pairs.len() as f64;

    for step in 0..steps {
        // grad[(context, response)] accumulated over the batch mean.
        let mut grad: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut margin_sum = 0.0;

        for pair in pairs {
            let ltc = policy.logprob(&pair.prompt, &pair.chosen)?;
            let ltr = policy.logprob(&pair.prompt, &pair.rejected)?;
            let lrc = reference.logprob(&pair.prompt, &pair.chosen)?;
            let lrr = reference.logprob(&pair.prompt, &pair.rejected)?;
            let example = DpoExample::new(ltc, ltr, lrc, lrr);
            loss_sum += dpo_loss(&example, params);
            margin_sum += ltc - ltr;
            let (d_chosen, d_rejected) = dpo_grad(&example, params);

            // d logp(x, y) / d logit(x, r) = 1[r == y] - p(r | x); chain
            // both sequence gradients through the softmax of this context.
            let row = policy.row(&pair.prompt).expect("scored above").clone();
            for (response, _) in row {
                let p = policy.prob(&pair.prompt, &response)?;
                let mut g = 0.0;
                if response == pair.chosen {
                    g += d_chosen * (1.0 - p);
                } else {
                    g += d_chosen * (-p);
                }
                if response == pair.rejected {
                    g += d_rejected * (1.0 - p);
                } else {
                    g += d_rejected * (-p);
                }
                *grad.entry((pair.prompt.clone(), response)).or_insert(0.0) += g / n;
            }
        }

        trace.push(MarginPoint {
            step,
            loss: loss_sum / n,
            margin: margin_sum / n,
        });

        if lr > 0.0 {
            for ((context, response), g) in grad {
                let row = policy.logits.get_mut(&context).expect("scored above");
                *row.get_mut(&response).expect("scored above") -= lr * g;
            }
        }
    }

    Ok(ToyTrainOutcome { policy, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curator::Stage;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn example(ltc: f64, ltr: f64, lrc: f64, lrr: f64) -> DpoExample {
        DpoExample::new(ltc, ltr, lrc, lrr)
    }

    #[test]
    fn equal_ratios_give_ln2() {
        let ex = example(-1.0, -2.0, -1.0, -2.0); // a = b = 0
        let loss = dpo_loss(&ex, &DpoParams::default());
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn closed_form_at_unit_gap() {
        // a - b = 1, beta = 0.8 -> loss = ln(1 + e^{-0.8})
        let ex = example(-1.0, -2.0, -1.5, -1.5); // a = 0.5, b = -0.5
        let loss = dpo_loss(&ex, &DpoParams::new(0.8));
        let expected = (1.0 + (-0.8f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.3711007).abs() < 1e-7);
    }

    #[test]
    fn loss_vanishes_monotonically_at_large_margin() {
        let params = DpoParams::new(0.8);
        let mut prev = f64::INFINITY;
        for gap in [0.0, 1.0, 5.0, 20.0, 50.0, 200.0] {
            let ex = example(gap, 0.0, 0.0, 0.0);
            let loss = dpo_loss(&ex, &params);
            assert!(loss >= 0.0);
            assert!(loss < prev, "loss not decreasing at gap {gap}");
            prev = loss;
        }
        // Saturation limit.
        let ex = example(2000.0, 0.0, 0.0, 0.0);
        assert!(dpo_loss(&ex, &params) < 1e-12);
    }

    #[test]
    fn gradient_at_zero_margin() {
        let ex = example(-1.0, -1.0, -1.0, -1.0);
        let (dc, dr) = dpo_grad(&ex, &DpoParams::new(0.8));
        assert!((dc - (-0.4)).abs() < 1e-12);
        assert!((dr - 0.4).abs() < 1e-12);
    }

    #[test]
    fn gradient_antisymmetry() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let ex = example(
                rng.random_range(-5.0..0.0),
                rng.random_range(-5.0..0.0),
                rng.random_range(-5.0..0.0),
                rng.random_range(-5.0..0.0),
            );
            let (dc, dr) = dpo_grad(&ex, &DpoParams::new(rng.random_range(0.1..2.0)));
            assert_eq!(dc, -dr);
        }
    }

    #[test]
    fn finite_difference_matches_analytic() {
        let mut rng = StdRng::seed_from_u64(7);
        let params = DpoParams::new(0.8);
        let h = 1e-5;
        for _ in 0..1000 {
            let ex = example(
                rng.random_range(-3.0..0.0),
                rng.random_range(-3.0..0.0),
                rng.random_range(-3.0..0.0),
                rng.random_range(-3.0..0.0),
            );
            let (dc, dr) = dpo_grad(&ex, &params);

            let mut plus = ex;
            plus.logp_theta_chosen += h;
            let mut minus = ex;
            minus.logp_theta_chosen -= h;
            let fd_c = (dpo_loss(&plus, &params) - dpo_loss(&minus, &params)) / (2.0 * h);
            assert!(
                (fd_c - dc).abs() / dc.abs().max(1e-12) < 1e-6,
                "fd {fd_c} vs {dc}"
            );

            let mut plus = ex;
            plus.logp_theta_rejected += h;
            let mut minus = ex;
            minus.logp_theta_rejected -= h;
            let fd_r = (dpo_loss(&plus, &params) - dpo_loss(&minus, &params)) / (2.0 * h);
            assert!(
                (fd_r - dr).abs() / dr.abs().max(1e-12) < 1e-6,
                "fd {fd_r} vs {dr}"
            );
        }
    }

    #[test]
    fn reference_shift_invariance() {
        let params = DpoParams::new(0.8);
        let ex = example(-1.0, -2.5, -1.2, -2.0);
        let base = dpo_loss(&ex, &params);
        for c in [-3.0, -0.5, 0.7, 10.0] {
            let shifted = example(
                ex.logp_theta_chosen,
                ex.logp_theta_rejected,
                ex.logp_ref_chosen + c,
                ex.logp_ref_rejected + c,
            );
            assert!((dpo_loss(&shifted, &params) - base).abs() < 1e-9);
        }
    }

    #[test]
    #[should_panic]
    fn non_finite_input_is_contract_violation() {
        example(f64::NAN, -1.0, -1.0, -1.0);
    }

    #[test]
    fn batch_loss_laws() {
        let params = DpoParams::default();
        let e1 = example(-1.0, -2.0, -1.1, -1.9);
        assert_eq!(batch_loss(&[e1], &params).unwrap(), dpo_loss(&e1, &params));
        assert!((batch_loss(&[e1, e1], &params).unwrap() - dpo_loss(&e1, &params)).abs() < 1e-15);
        assert_eq!(batch_loss(&[], &params), Err(DpoError::EmptyBatch));

        // Mixed batch vs naive summation oracle.
        let mut rng = StdRng::seed_from_u64(3);
        let batch: Vec<DpoExample> = (0..64)
            .map(|_| {
                example(
                    rng.random_range(-4.0..0.0),
                    rng.random_range(-4.0..0.0),
                    rng.random_range(-4.0..0.0),
                    rng.random_range(-4.0..0.0),
                )
            })
            .collect();
        let mut naive = 0.0;
        for e in &batch {
            naive += dpo_loss(e, &params);
        }
        naive /= batch.len() as f64;
        assert!((batch_loss(&batch, &params).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn sequence_logprob_sums_tokens() {
        let s = sequence_logprob_tokens(&[-1.0, -2.0]);
        assert_eq!(s.logprob, -3.0);
        assert!(!s.degenerate);
        let empty = sequence_logprob_tokens(&[]);
        assert_eq!(empty.logprob, 0.0);
        assert!(empty.degenerate);
    }

    fn synthetic_pairs(n_contexts: usize) -> (ToyPolicy, Vec<PreferencePair>) {
        let mut policy = ToyPolicy::new();
        let mut pairs = Vec::new();
        for i in 0..n_contexts {
            let ctx = format!("ctx-{i}");
            policy.set_logit(&ctx, "good", 0.0);
            policy.set_logit(&ctx, "bad", 0.0);
            pairs.push(PreferencePair {
                problem_id: format!("p-{i}"),
                prompt: ctx,
                chosen: "good".into(),
                rejected: "bad".into(),
                stage: Stage::SelfGeneration,
                chosen_reward: 1.0,
                rejected_reward: 0.0,
                chosen_correct: true,
                rejected_correct: false,
            });
        }
        (policy, pairs)
    }

    #[test]
    fn toy_policy_probabilities_sum_to_one() {
        let mut policy = ToyPolicy::new();
        policy.set_logit("c", "r1", 0.3);
        policy.set_logit("c", "r2", -1.7);
        policy.set_logit("c", "r3", 4.0);
        let total: f64 = ["r1", "r2", "r3"]
            .iter()
            .map(|r| policy.prob("c", r).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_lookup_returns_stored_value_for_proper_distributions() {
        // When the stored logits already form a normalized distribution,
        // the softmax is the identity and the lookup returns the table
        // entry directly.
        let (a, b) = (0.25f64, 0.75f64);
        let mut policy = ToyPolicy::new();
        policy.set_logit("c", "r1", a.ln());
        policy.set_logit("c", "r2", b.ln());
        assert!((policy.logprob("c", "r1").unwrap() - a.ln()).abs() < 1e-12);
        assert!((policy.logprob("c", "r2").unwrap() - b.ln()).abs() < 1e-12);
        assert!(matches!(
            policy.logprob("c", "missing"),
            Err(DpoError::Score { .. })
        ));
    }

    #[test]
    fn training_raises_margin_on_separable_set() {
        let (policy, pairs) = synthetic_pairs(20);
        let reference = policy.clone();
        let out = toy_train(&policy, &reference, &pairs, 200, 0.1, &DpoParams::default()).unwrap();
        let first = out.trace.first().unwrap();
        let last = out.trace.last().unwrap();
        assert!(
            last.margin > first.margin,
            "margin {} -> {}",
            first.margin,
            last.margin
        );
        assert!(last.loss < first.loss);
    }

    #[test]
    fn margin_rises_across_learning_rates() {
        let (policy, pairs) = synthetic_pairs(20);
        let reference = policy.clone();
        for lr in [0.01, 0.1, 0.3, 0.5] {
            let out =
                toy_train(&policy, &reference, &pairs, 200, lr, &DpoParams::default()).unwrap();
            assert!(
                out.trace.last().unwrap().margin > out.trace.first().unwrap().margin,
                "lr = {lr}"
            );
        }
    }

    #[test]
    fn zero_learning_rate_is_null_update() {
        let (policy, pairs) = synthetic_pairs(4);
        let reference = policy.clone();
        let out = toy_train(&policy, &reference, &pairs, 10, 0.0, &DpoParams::default()).unwrap();
        assert_eq!(out.policy, policy);
    }

    #[test]
    fn degenerate_pair_contributes_zero_gradient() {
        // chosen == rejected makes z depend on nothing; the two softmax
        // gradient paths cancel exactly and logits stay put.
        let mut policy = ToyPolicy::new();
        policy.set_logit("c", "same", 0.2);
        policy.set_logit("c", "other", -0.4);
        let reference = policy.clone();
        let pair = PreferencePair {
            problem_id: "p".into(),
            prompt: "c".into(),
            chosen: "same".into(),
            rejected: "same".into(),
            stage: Stage::SelfGeneration,
            chosen_reward: 0.0,
            rejected_reward: 0.0,
            chosen_correct: true,
            rejected_correct: false,
        };
        let out = toy_train(&policy, &reference, &[pair], 5, 0.5, &DpoParams::default()).unwrap();
        assert_eq!(out.policy, policy);
    }

    #[test]
    #[should_panic]
    fn negative_lr_is_contract_violation() {
        let (policy, pairs) = synthetic_pairs(2);
        let _ = toy_train(
            &policy,
            &policy.clone(),
            &pairs,
            1,
            -0.1,
            &DpoParams::default(),
        );
    }

    proptest! {
        #[test]
        fn loss_positive_and_decreasing_in_z(
            ltc in -6.0f64..0.0, ltr in -6.0f64..0.0,
            lrc in -6.0f64..0.0, lrr in -6.0f64..0.0,
            beta in 0.1f64..3.0,
        ) {
            let params = DpoParams::new(beta);
            let ex = example(ltc, ltr, lrc, lrr);
            let loss = dpo_loss(&ex, &params);
            prop_assert!(loss > 0.0);
            let better = example(ltc + 0.1, ltr, lrc, lrr);
            prop_assert!(dpo_loss(&better, &params) < loss);
        }
    }
}
