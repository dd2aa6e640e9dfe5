use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{lbfgs, levenberg_marquardt, Adam, LbfgsConfig, LmConfig};
use super::{Batch, CurveModel, IcpProblem, ParamScale};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneStep,
    MultiStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Adam with a fixed step length per epoch.
    Adaptive,
    /// Plain gradient step with Armijo backtracking from the scheduled step.
    Armijo,
}

/// Minimizer used between reassignments in Multi-Step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    Lbfgs,
    /// Damped Gauss-Newton on the exact pixel-term curvature.
    GaussNewton,
}

/// Solver settings, read from and written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub p: f64,
    /// `[epochs, alpha]` pieces; the last step length continues past the end.
    pub alpha_schedule: Vec<(usize, f64)>,
    /// Pixels per batch. Defaults to 4000 for One-Step and 51041 for
    /// Multi-Step; values at or above the pixel count mean full batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub n_nodes: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub inner_solver: InnerSolver,
    /// Iteration cap of the Multi-Step inner solver.
    pub inner_max_iter: usize,
    pub rk4_substeps: usize,
    pub param_scale: ParamScale,
    /// Relative change of the full-batch cost over one epoch below which
    /// One-Step stops.
    pub stagnation_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::OneStep,
            p: 2.0,
            alpha_schedule: vec![(10, 0.2)],
            batch_size: None,
            n_nodes: 40,
            epochs: 10,
            seed: 12345,
            optimizer: Optimizer::Adaptive,
            inner_solver: InnerSolver::Lbfgs,
            inner_max_iter: 200,
            rk4_substeps: 2,
            param_scale: ParamScale::default(),
            stagnation_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn multi_step() -> Self {
        Self {
            method: Method::MultiStep,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return bad("p must be a finite number >= 1");
        }
        if self.alpha_schedule.is_empty() {
            return bad("alpha_schedule needs at least one [epochs, alpha] entry");
        }
        if self.alpha_schedule.iter().any(|&(_, a)| !(a > 0.0 && a.is_finite())) {
            return bad("step lengths must be positive");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        if self.n_nodes < 2 {
            return bad("n_nodes must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.inner_max_iter == 0 || self.rk4_substeps == 0 {
            return bad("inner_max_iter and rk4_substeps must be positive");
        }
        if !(self.stagnation_tol >= 0.0) {
            return bad("stagnation_tol must be non-negative");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.method {
            Method::OneStep => 4000,
            Method::MultiStep => 51041,
        })
    }

    /// Step length used in epoch `epoch` (0-based).
    pub fn alpha(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for &(n, a) in &self.alpha_schedule {
            end += n;
            if epoch < end {
                return a;
            }
        }
        self.alpha_schedule.last().map(|&(_, a)| a).unwrap_or(0.2)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("solver config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One solver iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub epoch: usize,
    /// Batch cost after reassignment, rescaled to the full pixel count.
    /// For Multi-Step: the cost at the end of the inner solve.
    pub cost: f64,
    /// Pixels whose closest node changed at this reassignment.
    pub reassignments: usize,
    /// Euclidean length of the parameter update.
    pub step: f64,
    pub seconds: f64,
}

/// Cost before and after one reassignment, at the same parameters and over
/// the same pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorEvent {
    pub iter: usize,
    pub full_batch: bool,
    pub cost_old: f64,
    pub cost_new: f64,
}

impl MonitorEvent {
    pub fn violated(&self) -> bool {
        self.cost_new > self.cost_old + 1e-12 * self.cost_old
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Full-batch cost changed by less than the tolerance over an epoch.
    Stagnation,
    /// No correspondence changed and the inner solver converged.
    FixedPoint,
    EpochBudget,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub rows: Vec<TraceRow>,
    /// Full-batch cost at `theta0`.
    pub initial_cost: f64,
    /// Full-batch cost at the end of every epoch.
    pub epoch_costs: Vec<f64>,
    pub monitor: Vec<MonitorEvent>,
    /// Final parameters in model units.
    pub theta: Vec<f64>,
    pub reason: StopReason,
}

impl SolveTrace {
    fn new(theta: Vec<f64>) -> Self {
        Self {
            rows: Vec::new(),
            initial_cost: f64::NAN,
            epoch_costs: Vec::new(),
            monitor: Vec::new(),
            theta,
            reason: StopReason::EpochBudget,
        }
    }

    pub fn converged(&self) -> bool {
        matches!(self.reason, StopReason::Stagnation | StopReason::FixedPoint)
    }

    pub fn full_batch_violations(&self) -> usize {
        self.monitor.iter().filter(|e| e.full_batch && e.violated()).count()
    }

    pub fn batch_violations(&self) -> usize {
        self.monitor.iter().filter(|e| !e.full_batch && e.violated()).count()
    }

    pub fn final_cost(&self) -> f64 {
        self.epoch_costs.last().copied().unwrap_or(self.initial_cost)
    }

    /// Number of epochs needed to bring the full-batch cost to `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        if self.initial_cost <= target {
            return Some(0);
        }
        self.epoch_costs.iter().position(|&c| c <= target).map(|e| e + 1)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,epoch,cost,reassignments,step,seconds")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.16e},{},{:.16e},{:.6}",
                r.iter, r.epoch, r.cost, r.reassignments, r.step, r.seconds
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub theta: Vec<f64>,
    pub trace: SolveTrace,
}

pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub(crate) fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

/// Runs the solver selected by `cfg.method`.
pub fn solve<M: CurveModel>(problem: &IcpProblem<M>, cfg: &SolverConfig) -> Result<SolveOutput> {
    match cfg.method {
        Method::OneStep => solve_onestep(problem, cfg),
        Method::MultiStep => solve_multistep(problem, cfg),
    }
}

fn fail(err: Error, trace: SolveTrace) -> Error {
    match err {
        Error::Solver { .. } => err,
        other => {
            let mut trace = trace;
            trace.reason = StopReason::Failed;
            Error::Solver {
                message: other.to_string(),
                trace: Some(Box::new(trace)),
            }
        }
    }
}

/// Reassigns the pixels of `batch`, records the monitor event and updates
/// the stored per-pixel assignment.
fn reassign<M: CurveModel>(
    problem: &IcpProblem<M>,
    projections: &[super::NodeProjections],
    batch: &Batch,
    stored: &mut [Vec<u32>],
    iter: usize,
    full_batch: bool,
    trace: &mut SolveTrace,
) -> (Vec<Vec<u32>>, usize) {
    let new = problem.assign(projections, batch);
    let mut old = Vec::with_capacity(new.len());
    let mut new_masked = Vec::with_capacity(new.len());
    let mut changed = 0;
    let mut any_old = false;
    for (g, (idx, asg)) in batch.indices.iter().zip(&new).enumerate() {
        let prev: Vec<u32> = idx.iter().map(|&i| stored[g][i as usize]).collect();
        changed += prev.iter().zip(asg).filter(|(a, b)| a != b).count();
        any_old |= prev.iter().any(|&j| j != u32::MAX);
        new_masked.push(
            prev.iter()
                .zip(asg)
                .map(|(&p, &n)| if p == u32::MAX { u32::MAX } else { n })
                .collect::<Vec<_>>(),
        );
        for (&i, &j) in idx.iter().zip(asg) {
            stored[g][i as usize] = j;
        }
        old.push(prev);
    }
    if any_old {
        trace.monitor.push(MonitorEvent {
            iter,
            full_batch,
            cost_old: problem.raw_cost(projections, batch, &old),
            cost_new: problem.raw_cost(projections, batch, &new_masked),
        });
        if let Some(e) = trace.monitor.last().filter(|e| e.violated()) {
            log::warn!("reassignment increased the cost at iteration {iter}: {e:?}");
        }
    }
    (new, changed)
}

fn epoch_batches(pixels: &[Vec<nalgebra::Vector2<f64>>], n_batches: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    if n_batches == 1 {
        return vec![Batch::full(pixels)];
    }
    let shuffled: Vec<Vec<u32>> = pixels
        .iter()
        .map(|v| {
            let mut idx: Vec<u32> = (0..v.len() as u32).collect();
            idx.shuffle(rng);
            idx
        })
        .collect();
    (0..n_batches)
        .map(|b| Batch {
            indices: shuffled
                .iter()
                .map(|idx| {
                    let lo = b * idx.len() / n_batches;
                    let hi = (b + 1) * idx.len() / n_batches;
                    idx[lo..hi].to_vec()
                })
                .collect(),
        })
        .collect()
}

/// Random batch of about `size` pixels, split across views in proportion to
/// their pixel counts.
fn sample_batch(pixels: &[Vec<nalgebra::Vector2<f64>>], size: usize, rng: &mut ChaCha8Rng) -> Batch {
    let total: usize = pixels.iter().map(Vec::len).sum();
    let mut indices = Vec::with_capacity(pixels.len());
    let mut taken = 0;
    let mut seen = 0;
    for v in pixels {
        seen += v.len();
        let upto = (size as u128 * seen as u128 / total as u128) as usize;
        let k = upto - taken;
        taken = upto;
        let mut idx: Vec<u32> = (0..v.len() as u32).collect();
        let (chosen, _) = idx.partial_shuffle(rng, k);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        indices.push(chosen);
    }
    Batch { indices }
}

fn validate_problem<M: CurveModel>(problem: &IcpProblem<M>, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if problem.norm.p() != cfg.p {
        return Err(Error::Config(format!(
            "problem uses p = {} but the solver config says {}",
            problem.norm.p(),
            cfg.p
        )));
    }
    Ok(())
}

/// One descent step per reassignment, over disjoint mini-batches.
pub fn solve_onestep<M: CurveModel>(problem: &IcpProblem<M>, cfg: &SolverConfig) -> Result<SolveOutput> {
    validate_problem(problem, cfg)?;
    let mut trace = SolveTrace::new(problem.theta0.clone());
    match onestep_inner(problem, cfg, &mut trace) {
        Ok(theta) => Ok(SolveOutput { theta, trace }),
        Err(e) => Err(fail(e, trace)),
    }
}

fn onestep_inner<M: CurveModel>(
    problem: &IcpProblem<M>,
    cfg: &SolverConfig,
    trace: &mut SolveTrace,
) -> Result<Vec<f64>> {
    const ARMIJO_C: f64 = 1e-4;
    let clock = Stopwatch::start();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = problem.total_pixels();
    let n_batches = total.div_ceil(cfg.batch_size().min(total));
    let mut theta = DVector::from_column_slice(&problem.theta0);
    let mut stored: Vec<Vec<u32>> = problem.pixels.iter().map(|v| vec![u32::MAX; v.len()]).collect();
    let mut adam = Adam::new(theta.len());
    trace.initial_cost = problem.full_cost(theta.as_slice())?;
    let mut previous = trace.initial_cost;
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let alpha = cfg.alpha(epoch);
        for batch in epoch_batches(&problem.pixels, n_batches, &mut rng) {
            let proj = problem.project(theta.as_slice(), true)?;
            let (asg, changed) = reassign(problem, &proj, &batch, &mut stored, iter, n_batches == 1, trace);
            let eval = problem.cost(&proj, &batch, &asg, true)?;
            let grad = eval.gradient.expect("gradient requested");
            let update = match cfg.optimizer {
                Optimizer::Adaptive => adam.step(&grad, alpha),
                Optimizer::Armijo => {
                    let g2 = grad.norm_squared();
                    let mut t = alpha;
                    let mut update = DVector::zeros(theta.len());
                    for _ in 0..60 {
                        let trial = &theta - &grad * t;
                        let ok = problem
                            .project(trial.as_slice(), false)
                            .and_then(|p| problem.cost(&p, &batch, &asg, false))
                            .map(|c| c.cost <= eval.cost - ARMIJO_C * t * g2)
                            .unwrap_or(false);
                        if ok {
                            update = -&grad * t;
                            break;
                        }
                        t *= 0.5;
                    }
                    update
                }
            };
            theta += &update;
            trace.theta = theta.as_slice().to_vec();
            trace.rows.push(TraceRow {
                iter,
                epoch,
                cost: eval.cost,
                reassignments: changed,
                step: update.norm(),
                seconds: clock.seconds(),
            });
            iter += 1;
        }
        let cost = problem.full_cost(theta.as_slice())?;
        trace.epoch_costs.push(cost);
        log::info!("epoch {epoch}: full-batch cost {cost:.6e}");
        if (previous - cost).abs() < cfg.stagnation_tol * previous.abs() {
            trace.reason = StopReason::Stagnation;
            break;
        }
        previous = cost;
    }
    Ok(theta.as_slice().to_vec())
}

/// Full inner minimization between reassignments.
pub fn solve_multistep<M: CurveModel>(problem: &IcpProblem<M>, cfg: &SolverConfig) -> Result<SolveOutput> {
    validate_problem(problem, cfg)?;
    let mut trace = SolveTrace::new(problem.theta0.clone());
    match multistep_inner(problem, cfg, &mut trace) {
        Ok(theta) => Ok(SolveOutput { theta, trace }),
        Err(e) => Err(fail(e, trace)),
    }
}

fn multistep_inner<M: CurveModel>(
    problem: &IcpProblem<M>,
    cfg: &SolverConfig,
    trace: &mut SolveTrace,
) -> Result<Vec<f64>> {
    let clock = Stopwatch::start();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = problem.total_pixels();
    let full = cfg.batch_size() >= total;
    let mut theta = DVector::from_column_slice(&problem.theta0);
    let mut stored: Vec<Vec<u32>> = problem.pixels.iter().map(|v| vec![u32::MAX; v.len()]).collect();
    let lbfgs_cfg = LbfgsConfig {
        max_iter: cfg.inner_max_iter,
        ..Default::default()
    };
    let lm_cfg = LmConfig {
        max_iter: cfg.inner_max_iter,
        ..Default::default()
    };
    trace.initial_cost = problem.full_cost(theta.as_slice())?;
    for epoch in 0..cfg.epochs {
        let batch = if full {
            Batch::full(&problem.pixels)
        } else {
            sample_batch(&problem.pixels, cfg.batch_size(), &mut rng)
        };
        let proj = problem.project(theta.as_slice(), false)?;
        let (asg, changed) = reassign(problem, &proj, &batch, &mut stored, epoch, full, trace);
        let out = match cfg.inner_solver {
            InnerSolver::Lbfgs => {
                let fg = |x: &DVector<f64>| {
                    let p = problem.project(x.as_slice(), true)?;
                    let c = problem.cost(&p, &batch, &asg, true)?;
                    Ok((c.cost, c.gradient.expect("gradient requested")))
                };
                lbfgs(fg, theta.clone(), &lbfgs_cfg)?
            }
            InnerSolver::GaussNewton => {
                let fgh = |x: &DVector<f64>| {
                    let p = problem.project(x.as_slice(), true)?;
                    let c = problem.cost_hessian(&p, &batch, &asg)?;
                    Ok((
                        c.cost,
                        c.gradient.expect("gradient requested"),
                        c.hessian.expect("hessian requested"),
                    ))
                };
                let f = |x: &DVector<f64>| {
                    let p = problem.project(x.as_slice(), false)?;
                    Ok(problem.cost(&p, &batch, &asg, false)?.cost)
                };
                levenberg_marquardt(fgh, f, theta.clone(), &lm_cfg)?
            }
        };
        let step = (&out.x - &theta).norm();
        theta = out.x;
        trace.theta = theta.as_slice().to_vec();
        trace.rows.push(TraceRow {
            iter: epoch,
            epoch,
            cost: out.cost,
            reassignments: changed,
            step,
            seconds: clock.seconds(),
        });
        let cost = problem.full_cost(theta.as_slice())?;
        trace.epoch_costs.push(cost);
        log::info!(
            "outer iteration {epoch}: {changed} reassignments, {} inner iterations (converged {}), full-batch cost {cost:.6e}",
            out.iterations,
            out.converged
        );
        if changed == 0 && out.converged {
            trace.reason = StopReason::FixedPoint;
            break;
        }
    }
    Ok(theta.as_slice().to_vec())
}
