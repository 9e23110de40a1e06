//! Shaped step rewards and extreme-candidate selection.
//!
//! Stage 1 scores a step as its PRM value plus an advantage term crediting
//! likelihood progress over the previous step; stages 2 and 3 add an
//! outcome-level shaping term on top. Selection keeps only the highest- and
//! lowest-reward candidates per level, with a plausibility floor keeping the
//! min side from latching onto garbage steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp applied to the advantage denominator; the previous step's PRM score
/// can be arbitrarily small and the formula is otherwise singular.
pub const ADVANTAGE_EPSILON: f64 = 1e-6;

/// Default plausibility floor for min-side selection (0 disables).
pub const DEFAULT_PRM_FLOOR: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("need at least 2 candidates, got {0}")]
    InsufficientCandidates(usize),
}

/// A step reward split into its three addends. `total` is exactly
/// `prm + orm_shaping + advantage`; totals are deliberately unclamped
/// (the advantage term makes them unbounded and downstream only orders).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub prm: f64,
    pub advantage: f64,
    pub orm_shaping: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Fold an outcome-level shaping value into an existing breakdown,
    /// keeping the `total = prm + orm_shaping + advantage` identity exact.
    pub fn with_orm_shaping(self, orm: f64) -> Self {
        RewardBreakdown {
            orm_shaping: orm,
            total: self.prm + orm + self.advantage,
            ..self
        }
    }
}

fn check_unit(value: f64, name: &str) {
    assert!(
        (0.0..=1.0).contains(&value),
        "{name} must lie in [0,1], got {value}"
    );
}

fn check_likelihood(value: f64, name: &str) {
    assert!(
        value > 0.0 && value <= 1.0,
        "{name} must lie in (0,1], got {value}"
    );
}

/// Stage-1 step reward.
///
/// At `t = 0` the PRM score is assigned directly; for later steps an
/// advantage term `(pol_t - pol_prev) / max(prm_prev, eps)` is added.
/// The `prev` arguments are ignored at `t = 0`. Out-of-range inputs are
/// programming errors and panic.
pub fn stage1_reward(
    t: usize,
    prm_t: f64,
    pol_t: f64,
    pol_prev: f64,
    prm_prev: f64,
) -> RewardBreakdown {
    stage1_reward_with_epsilon(t, prm_t, pol_t, pol_prev, prm_prev, ADVANTAGE_EPSILON)
}

/// [`stage1_reward`] with a configurable denominator clamp.
pub fn stage1_reward_with_epsilon(
    t: usize,
    prm_t: f64,
    pol_t: f64,
    pol_prev: f64,
    prm_prev: f64,
    epsilon: f64,
) -> RewardBreakdown {
    check_unit(prm_t, "prm_t");
    assert!(epsilon > 0.0, "epsilon must be positive");
    if t == 0 {
        return RewardBreakdown {
            prm: prm_t,
            advantage: 0.0,
            orm_shaping: 0.0,
            total: prm_t,
        };
    }
    check_likelihood(pol_t, "pol_t");
    check_likelihood(pol_prev, "pol_prev");
    check_unit(prm_prev, "prm_prev");
    let advantage = (pol_t - pol_prev) / prm_prev.max(epsilon);
    RewardBreakdown {
        prm: prm_t,
        advantage,
        orm_shaping: 0.0,
        total: prm_t + advantage,
    }
}

/// Stage-2/3 step reward: stage-1 reward plus an outcome shaping term
/// `orm_sol` added at every step.
pub fn stage2_reward(
    t: usize,
    prm_t: f64,
    orm_sol: f64,
    pol_t: f64,
    pol_prev: f64,
    prm_prev: f64,
) -> RewardBreakdown {
    stage2_reward_with_epsilon(
        t,
        prm_t,
        orm_sol,
        pol_t,
        pol_prev,
        prm_prev,
        ADVANTAGE_EPSILON,
    )
}

/// [`stage2_reward`] with a configurable denominator clamp.
pub fn stage2_reward_with_epsilon(
    t: usize,
    prm_t: f64,
    orm_sol: f64,
    pol_t: f64,
    pol_prev: f64,
    prm_prev: f64,
    epsilon: f64,
) -> RewardBreakdown {
    check_unit(orm_sol, "orm_sol");
    stage1_reward_with_epsilon(t, prm_t, pol_t, pol_prev, prm_prev, epsilon)
        .with_orm_shaping(orm_sol)
}

/// Result of picking the extreme candidates of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeSelection {
    pub max_index: usize,
    pub min_index: usize,
    pub rewards: Vec<f64>,
}

/// Index of the maximum reward; ties break toward the lowest index.
pub fn argmax_reward(rewards: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &r) in rewards.iter().enumerate() {
        match best {
            Some(b) if rewards[b] >= r => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Index of the minimum reward over the plausible subset
/// `{i in allowed : prm[i] >= floor}`, falling back to all of `allowed`
/// when the subset is empty. Ties break toward the lowest index.
pub fn plausible_argmin(
    rewards: &[f64],
    prms: &[f64],
    floor: f64,
    allowed: impl Fn(usize) -> bool,
) -> Option<usize> {
    let scan = |plausible_only: bool| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &r) in rewards.iter().enumerate() {
            if !allowed(i) || (plausible_only && prms[i] < floor) {
                continue;
            }
            match best {
                Some(b) if rewards[b] <= r => {}
                _ => best = Some(i),
            }
        }
        best
    };
    scan(true).or_else(|| scan(false))
}

/// Pick the max- and min-reward candidates of one level.
///
/// `rewards` and `prms` are parallel; the min side is restricted to
/// plausible candidates (`prm >= prm_floor`) when any exist besides the
/// max pick. The two indices are always distinct for lists of length >= 2;
/// all ties break toward the lowest index.
pub fn select_extremes(
    rewards: &[f64],
    prms: &[f64],
    prm_floor: f64,
) -> Result<ExtremeSelection, RewardError> {
    assert_eq!(rewards.len(), prms.len(), "rewards/prms length mismatch");
    if rewards.len() < 2 {
        return Err(RewardError::InsufficientCandidates(rewards.len()));
    }
    let max_index = argmax_reward(rewards).expect("non-empty");
    let min_index =
        plausible_argmin(rewards, prms, prm_floor, |i| i != max_index).expect("len >= 2");
    Ok(ExtremeSelection {
        max_index,
        min_index,
        rewards: rewards.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent direct transcriptions of the two reward formulas; the
    // implementation must agree with these to 1e-12 (exercised again at
    // scale by the acceptance suite).
    fn stage1_direct(t: usize, prm_t: f64, pol_t: f64, pol_prev: f64, prm_prev: f64) -> f64 {
        if t == 0 {
            prm_t
        } else {
            prm_t + (pol_t - pol_prev) / if prm_prev > 1e-6 { prm_prev } else { 1e-6 }
        }
    }

    fn stage2_direct(
        t: usize,
        prm_t: f64,
        orm: f64,
        pol_t: f64,
        pol_prev: f64,
        prm_prev: f64,
    ) -> f64 {
        if t == 0 {
            prm_t + orm
        } else {
            prm_t + orm + (pol_t - pol_prev) / if prm_prev > 1e-6 { prm_prev } else { 1e-6 }
        }
    }

    #[test]
    fn stage1_t0_is_prm_identity() {
        let r = stage1_reward(0, 0.7, 0.5, 0.5, 0.5);
        assert_eq!(r.total, 0.7);
        assert_eq!(r.advantage, 0.0);
        assert_eq!(r.orm_shaping, 0.0);
    }

    #[test]
    fn stage1_hand_evaluation() {
        // 0.8 + (0.6 - 0.5)/0.5 = 1.0
        let r = stage1_reward(1, 0.8, 0.6, 0.5, 0.5);
        assert!((r.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stage1_epsilon_clamp_with_zero_numerator() {
        // Numerator is zero, so the clamped denominator still yields 0.
        let r = stage1_reward(1, 0.5, 0.4, 0.4, 1e-9);
        assert!((r.total - 0.5).abs() < 1e-12);
        assert_eq!(r.advantage, 0.0);
    }

    #[test]
    fn stage2_hand_evaluations() {
        let r = stage2_reward(0, 0.6, 1.0, 0.5, 0.5, 0.5);
        assert!((r.total - 1.6).abs() < 1e-12);

        // 0.7 + 0 + (0.5 - 0.6)/0.5 = 0.5
        let r = stage2_reward(2, 0.7, 0.0, 0.5, 0.6, 0.5);
        assert!((r.total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stage2_with_zero_orm_degenerates_to_stage1() {
        for &(t, prm_t, pol_t, pol_prev, prm_prev) in &[
            (0usize, 0.3, 0.9, 0.2, 0.8),
            (1, 0.9, 0.2, 0.9, 0.3),
            (4, 0.05, 0.5, 0.5, 0.0),
        ] {
            let a = stage1_reward(t, prm_t, pol_t, pol_prev, prm_prev);
            let b = stage2_reward(t, prm_t, 0.0, pol_t, pol_prev, prm_prev);
            assert_eq!(a.total, b.total);
        }
    }

    #[test]
    fn breakdown_identity_holds() {
        let r = stage2_reward(3, 0.8, 0.7, 0.6, 0.9, 0.4);
        assert_eq!(r.total, r.prm + r.orm_shaping + r.advantage);
    }

    #[test]
    #[should_panic]
    fn out_of_range_prm_is_contract_violation() {
        stage1_reward(0, 1.5, 0.5, 0.5, 0.5);
    }

    #[test]
    #[should_panic]
    fn zero_likelihood_is_contract_violation() {
        stage1_reward(1, 0.5, 0.0, 0.5, 0.5);
    }

    #[test]
    fn select_extremes_basic() {
        let sel = select_extremes(&[0.2, 0.9, 0.5], &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!((sel.max_index, sel.min_index), (1, 0));
    }

    #[test]
    fn select_extremes_all_ties_forces_distinct() {
        let sel = select_extremes(&[0.5, 0.5, 0.5], &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!((sel.max_index, sel.min_index), (0, 1));
    }

    #[test]
    fn select_extremes_plausibility_filter() {
        // Index 1 has the lowest reward but an implausible PRM score.
        let sel = select_extremes(&[0.9, 0.02, 0.4], &[0.9, 0.01, 0.4], 0.05).unwrap();
        assert_eq!((sel.max_index, sel.min_index), (0, 2));
    }

    #[test]
    fn select_extremes_falls_back_when_all_implausible() {
        let sel = select_extremes(&[0.9, 0.4, 0.2], &[0.01, 0.01, 0.01], 0.05).unwrap();
        assert_eq!((sel.max_index, sel.min_index), (0, 2));
    }

    #[test]
    fn select_extremes_rejects_short_lists() {
        assert_eq!(
            select_extremes(&[0.5], &[0.5], 0.0),
            Err(RewardError::InsufficientCandidates(1))
        );
    }

    #[test]
    fn exhaustive_small_case_agreement() {
        // Brute-force oracle over every list of length <= 6 on a 5-value
        // grid, floor 0: first-index argmax; first-index argmin excluding
        // the max pick.
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        for len in 2..=6usize {
            let mut idx = vec![0usize; len];
            loop {
                let rewards: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
                let prms = vec![1.0; len];

                let mut bf_max = 0;
                for i in 1..len {
                    if rewards[i] > rewards[bf_max] {
                        bf_max = i;
                    }
                }
                let mut bf_min = usize::MAX;
                for i in 0..len {
                    if i == bf_max {
                        continue;
                    }
                    if bf_min == usize::MAX || rewards[i] < rewards[bf_min] {
                        bf_min = i;
                    }
                }

                let sel = select_extremes(&rewards, &prms, 0.0).unwrap();
                assert_eq!(sel.max_index, bf_max, "rewards {rewards:?}");
                assert_eq!(sel.min_index, bf_min, "rewards {rewards:?}");

                // odometer increment
                let mut k = 0;
                loop {
                    idx[k] += 1;
                    if idx[k] < grid.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                    if k == len {
                        break;
                    }
                }
                if k == len {
                    break;
                }
            }
        }
    }

    proptest! {
        #[test]
        fn oracle_equivalence(
            t in 0usize..8,
            prm_t in 0.0f64..=1.0,
            orm in 0.0f64..=1.0,
            pol_t in 1e-9f64..=1.0,
            pol_prev in 1e-9f64..=1.0,
            prm_prev in 0.0f64..=1.0,
        ) {
            let r1 = stage1_reward(t, prm_t, pol_t, pol_prev, prm_prev);
            prop_assert!((r1.total - stage1_direct(t, prm_t, pol_t, pol_prev, prm_prev)).abs() < 1e-12);
            let r2 = stage2_reward(t, prm_t, orm, pol_t, pol_prev, prm_prev);
            prop_assert!((r2.total - stage2_direct(t, prm_t, orm, pol_t, pol_prev, prm_prev)).abs() < 1e-12);
        }

        #[test]
        fn scale_monotonicity(
            prm_t in 0.0f64..0.99,
            pol_t in 0.01f64..0.98,
            pol_prev in 0.01f64..0.98,
            prm_prev in 0.0f64..=1.0,
            bump in 0.001f64..0.01,
        ) {
            let base = stage1_reward(1, prm_t, pol_t, pol_prev, prm_prev).total;
            prop_assert!(stage1_reward(1, prm_t + bump, pol_t, pol_prev, prm_prev).total > base);
            prop_assert!(stage1_reward(1, prm_t, pol_t + bump, pol_prev, prm_prev).total > base);
            prop_assert!(stage1_reward(1, prm_t, pol_t, pol_prev + bump, prm_prev).total < base);
        }

        #[test]
        fn t0_totals_bounded(prm_t in 0.0f64..=1.0, orm in 0.0f64..=1.0) {
            let s1 = stage1_reward(0, prm_t, 0.5, 0.5, 0.5).total;
            prop_assert!((0.0..=1.0).contains(&s1));
            let s2 = stage2_reward(0, prm_t, orm, 0.5, 0.5, 0.5).total;
            prop_assert!((0.0..=2.0).contains(&s2));
        }

        #[test]
        fn extremes_bracket_all(rewards in proptest::collection::vec(0.0f64..=1.0, 2..10)) {
            let prms = vec![1.0; rewards.len()];
            let sel = select_extremes(&rewards, &prms, 0.0).unwrap();
            prop_assert_ne!(sel.max_index, sel.min_index);
            for &r in &rewards {
                prop_assert!(rewards[sel.max_index] >= r);
            }
            // min is global over the complement of the max pick; with >= 2
            // distinct values it is the true minimum.
            let distinct = rewards.iter().any(|&r| r != rewards[0]);
            if distinct {
                for &r in &rewards {
                    prop_assert!(rewards[sel.min_index] <= r);
                }
            }
        }
    }
}
