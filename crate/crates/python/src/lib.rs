//! Python bindings: answer grading, reward shaping, extreme selection,
//! routing, the DPO loss/gradient, and a mock-world pipeline driver.
//!
//! Build with `cargo build --release -p prefgen-python`; the resulting
//! `libprefgen.so` imports as module `prefgen` (see python/smoke_test.py).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prefgen_core::answer;
use prefgen_core::backend::{MockGateway, MockWorldSpec};
use prefgen_core::config::PipelineConfig;
use prefgen_core::dpo;
use prefgen_core::pipeline;
use prefgen_core::reward;
use prefgen_core::rollout::Trajectory;
use prefgen_core::stages;

/// Pull the final answer out of a completion; None when the marker phrase
/// never occurs.
#[pyfunction]
fn extract_final_answer<'py>(
    py: Python<'py>,
    completion: &str,
) -> PyResult<Option<Bound<'py, PyDict>>> {
    match answer::extract_final_answer(completion) {
        None => Ok(None),
        Some(ans) => {
            let d = PyDict::new(py);
            d.set_item("raw", ans.raw)?;
            d.set_item("canonical", ans.canonical)?;
            Ok(Some(d))
        }
    }
}

#[pyfunction]
fn normalize_answer(raw: &str) -> String {
    answer::normalize_answer(raw)
}

/// Exact-rational answer equality; both sides are normalized first.
#[pyfunction]
fn answers_equal(a: &str, b: &str) -> bool {
    answer::answers_equal(&answer::normalize_answer(a), &answer::normalize_answer(b))
}

fn breakdown_dict<'py>(
    py: Python<'py>,
    r: reward::RewardBreakdown,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("prm", r.prm)?;
    d.set_item("advantage", r.advantage)?;
    d.set_item("orm_shaping", r.orm_shaping)?;
    d.set_item("total", r.total)?;
    Ok(d)
}

/// Stage-1 step reward (PRM plus advantage); prev-values are ignored at t=0.
#[pyfunction]
#[pyo3(signature = (t, prm_t, pol_t=1.0, pol_prev=1.0, prm_prev=1.0))]
fn stage1_reward<'py>(
    py: Python<'py>,
    t: usize,
    prm_t: f64,
    pol_t: f64,
    pol_prev: f64,
    prm_prev: f64,
) -> PyResult<Bound<'py, PyDict>> {
    breakdown_dict(
        py,
        reward::stage1_reward(t, prm_t, pol_t, pol_prev, prm_prev),
    )
}

/// Stage-2/3 step reward (adds the outcome shaping term at every step).
#[pyfunction]
#[pyo3(signature = (t, prm_t, orm_sol, pol_t=1.0, pol_prev=1.0, prm_prev=1.0))]
fn stage2_reward<'py>(
    py: Python<'py>,
    t: usize,
    prm_t: f64,
    orm_sol: f64,
    pol_t: f64,
    pol_prev: f64,
    prm_prev: f64,
) -> PyResult<Bound<'py, PyDict>> {
    breakdown_dict(
        py,
        reward::stage2_reward(t, prm_t, orm_sol, pol_t, pol_prev, prm_prev),
    )
}

/// (max_index, min_index) of one candidate level; the min side honors the
/// plausibility floor and the indices are always distinct.
#[pyfunction]
#[pyo3(signature = (rewards, prms, prm_floor=0.05))]
fn select_extremes(rewards: Vec<f64>, prms: Vec<f64>, prm_floor: f64) -> PyResult<(usize, usize)> {
    if rewards.len() != prms.len() {
        return Err(PyValueError::new_err(
            "rewards and prms must have equal length",
        ));
    }
    reward::select_extremes(&rewards, &prms, prm_floor)
        .map(|sel| (sel.max_index, sel.min_index))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Route a problem on its two chain verdicts: "emit_pair", "self_correct",
/// "diversify", or "drop".
#[pyfunction]
fn route_decision(sol_max_correct: bool, sol_min_correct: bool) -> String {
    match stages::route_outcome(sol_max_correct, sol_min_correct).decision {
        stages::RouteDecision::EmitPair => "emit_pair",
        stages::RouteDecision::SelfCorrect => "self_correct",
        stages::RouteDecision::Diversify => "diversify",
        stages::RouteDecision::Drop => "drop",
    }
    .to_string()
}

fn example(ltc: f64, ltr: f64, lrc: f64, lrr: f64) -> dpo::DpoExample {
    dpo::DpoExample::new(ltc, ltr, lrc, lrr)
}

/// -log sigmoid(beta * ((ltc - lrc) - (ltr - lrr))).
#[pyfunction]
#[pyo3(signature = (logp_theta_chosen, logp_theta_rejected, logp_ref_chosen, logp_ref_rejected, beta=0.8))]
fn dpo_loss(
    logp_theta_chosen: f64,
    logp_theta_rejected: f64,
    logp_ref_chosen: f64,
    logp_ref_rejected: f64,
    beta: f64,
) -> f64 {
    dpo::dpo_loss(
        &example(
            logp_theta_chosen,
            logp_theta_rejected,
            logp_ref_chosen,
            logp_ref_rejected,
        ),
        &dpo::DpoParams::new(beta),
    )
}

/// (d loss / d logp_theta_chosen, d loss / d logp_theta_rejected).
#[pyfunction]
#[pyo3(signature = (logp_theta_chosen, logp_theta_rejected, logp_ref_chosen, logp_ref_rejected, beta=0.8))]
fn dpo_grad(
    logp_theta_chosen: f64,
    logp_theta_rejected: f64,
    logp_ref_chosen: f64,
    logp_ref_rejected: f64,
    beta: f64,
) -> (f64, f64) {
    dpo::dpo_grad(
        &example(
            logp_theta_chosen,
            logp_theta_rejected,
            logp_ref_chosen,
            logp_ref_rejected,
        ),
        &dpo::DpoParams::new(beta),
    )
}

/// Mean loss over (ltc, ltr, lrc, lrr) tuples.
#[pyfunction]
#[pyo3(signature = (examples, beta=0.8))]
fn batch_loss(examples: Vec<(f64, f64, f64, f64)>, beta: f64) -> PyResult<f64> {
    let examples: Vec<dpo::DpoExample> = examples
        .into_iter()
        .map(|(a, b, c, d)| example(a, b, c, d))
        .collect();
    dpo::batch_loss(&examples, &dpo::DpoParams::new(beta))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn trajectory_dict<'py>(py: Python<'py>, traj: &Trajectory) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("text", &traj.text)?;
    d.set_item(
        "final_answer",
        traj.final_answer.as_ref().map(|a| a.canonical.clone()),
    )?;
    d.set_item("correct", traj.correct)?;
    d.set_item("cumulative_reward", traj.cumulative_reward)?;
    d.set_item("steps", traj.steps.len())?;
    Ok(d)
}

/// In-process pipeline over the deterministic mock world.
#[pyclass]
struct MockPipeline {
    cfg: PipelineConfig,
}

#[pymethods]
impl MockPipeline {
    #[new]
    #[pyo3(signature = (n_problems=500, seed=0, p_policy=0.8, p_small=0.5, steps_per_problem=3, e=5, max_depth=10, concurrency=4))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_problems: usize,
        seed: u64,
        p_policy: f64,
        p_small: f64,
        steps_per_problem: usize,
        e: usize,
        max_depth: usize,
        concurrency: usize,
    ) -> PyResult<Self> {
        let mut cfg = PipelineConfig {
            seed,
            e,
            max_depth,
            concurrency,
            mock: MockWorldSpec {
                n_problems,
                p_step_correct_policy: p_policy,
                p_step_correct_small: p_small,
                steps_per_problem,
                seed: 7,
            },
            ..Default::default()
        };
        cfg.normalize();
        cfg.validate()
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(MockPipeline { cfg })
    }

    /// The index-th synthetic problem.
    fn problem<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let problem = self.cfg.mock.problem(index);
        let d = PyDict::new(py);
        d.set_item("id", problem.id)?;
        d.set_item("question", problem.question)?;
        d.set_item("answer", problem.answer)?;
        Ok(d)
    }

    /// Write the corpus as {id, question, answer} JSONL.
    fn write_corpus(&self, path: &str) -> PyResult<()> {
        self.cfg
            .mock
            .write_corpus(std::path::Path::new(path))
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Stage-1 rollout plus routing for one problem.
    fn rollout<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let gateway = MockGateway::new(self.cfg.mock, self.cfg.seed);
        let problem = self.cfg.mock.problem(index);
        let seed = prefgen_core::hashing::problem_seed(self.cfg.seed, &problem.id);
        let (result, route, _) = stages::run_stage1(&gateway, &problem, &self.cfg, seed)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let d = PyDict::new(py);
        d.set_item("problem_id", &problem.id)?;
        d.set_item("gold_answer", &problem.answer)?;
        d.set_item(
            "route",
            match route.decision {
                stages::RouteDecision::EmitPair => "emit_pair",
                stages::RouteDecision::SelfCorrect => "self_correct",
                stages::RouteDecision::Diversify => "diversify",
                stages::RouteDecision::Drop => "drop",
            },
        )?;
        d.set_item("sol_max", trajectory_dict(py, &result.sol_max)?)?;
        d.set_item("sol_min", trajectory_dict(py, &result.sol_min)?)?;
        d.set_item("expansions", result.expansions)?;
        d.set_item("levels", result.levels)?;
        Ok(d)
    }

    /// Run the full pipeline into `out_dir` (pairs.jsonl, stats.json,
    /// journal.jsonl) and return the stats.
    #[pyo3(signature = (out_dir, resume=false))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        out_dir: &str,
        resume: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let out = std::path::Path::new(out_dir);
        std::fs::create_dir_all(out).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let problems_path = out.join("problems.jsonl");
        self.cfg
            .mock
            .write_corpus(&problems_path)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let stats = pipeline::run(&self.cfg, &problems_path, out, resume)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let d = PyDict::new(py);
        d.set_item("total_questions", stats.total_questions)?;
        d.set_item("pairs_stage1", stats.pairs_stage1)?;
        d.set_item("pairs_stage2", stats.pairs_stage2)?;
        d.set_item("pairs_stage3", stats.pairs_stage3)?;
        d.set_item("total_pairs", stats.total_pairs)?;
        d.set_item("aborted", stats.aborted)?;
        d.set_item("dropped", stats.dropped)?;
        Ok(d)
    }
}

#[pymodule]
fn prefgen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(extract_final_answer, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(answers_equal, m)?)?;
    m.add_function(wrap_pyfunction!(stage1_reward, m)?)?;
    m.add_function(wrap_pyfunction!(stage2_reward, m)?)?;
    m.add_function(wrap_pyfunction!(select_extremes, m)?)?;
    m.add_function(wrap_pyfunction!(route_decision, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_grad, m)?)?;
    m.add_function(wrap_pyfunction!(batch_loss, m)?)?;
    m.add_class::<MockPipeline>()?;
    Ok(())
}
