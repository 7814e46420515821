//! Imitation-learning and system-identification experiment logic: expert
//! dataset generation, the imitation / model / transition losses, hand-rolled
//! RMSprop and Adam, and per-method training loops with best-validation
//! selection.
//!
//! Runs are deterministic given the config seed: dataset draws, batch
//! shuffles, and gradient reduction all happen in a fixed sequential order.

use crate::core::Trajectory;
use crate::envs::{GoalCost, LinearDyn};
use crate::mpc::{mpc_solve, CostModel, DynModel, FixedPoint, MpcProblem, ParamDyn, SolveAudit};
use crate::mpc_diff::{
    dyn_param_grad, goal_cost_grad, linear_dyn_grad, mpc_backward, MpcGradients,
};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::Arc;

/// Attempts allowed per dataset slot before generation is declared stuck.
const MAX_DRAWS_PER_RECORD: usize = 50;
/// Central-difference step over dynamics parameters for the transition-loss
/// parameter Jacobian.
const SYSID_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub enum ImitationError {
    InvalidConfig(String),
    /// Dataset generation exhausted its draw budget on one record slot.
    DatasetGeneration { slot: usize },
    /// Every solve in a batch or evaluation split failed to converge.
    /// `curves` holds the epochs recorded before the abort (empty when the
    /// error comes from a standalone evaluation).
    AllSkipped { epoch: usize, curves: Vec<EpochStats> },
    /// Parameters or losses went non-finite; `curves` holds the epochs
    /// recorded before the abort.
    Diverged { epoch: usize, curves: Vec<EpochStats> },
    ParamMismatch { expected: usize, got: usize },
}

impl ImitationError {
    /// Learning-curve rows recorded before an aborted run stopped, so
    /// callers can persist partial results.
    pub fn partial_curves(&self) -> &[EpochStats] {
        match self {
            ImitationError::AllSkipped { curves, .. } | ImitationError::Diverged { curves, .. } => {
                curves
            }
            _ => &[],
        }
    }
}

impl fmt::Display for ImitationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImitationError::InvalidConfig(s) => write!(f, "invalid config: {s}"),
            ImitationError::DatasetGeneration { slot } => {
                write!(f, "dataset generation stuck: no converged expert solve for slot {slot}")
            }
            ImitationError::AllSkipped { epoch, .. } => {
                write!(f, "every solve failed to converge at epoch {epoch}")
            }
            ImitationError::Diverged { epoch, .. } => {
                write!(f, "parameters diverged (non-finite) at epoch {epoch}")
            }
            ImitationError::ParamMismatch { expected, got } => {
                write!(f, "parameter structure mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for ImitationError {}

/// A dynamics+cost pair with solver settings: enough to pose the control
/// problem from any initial state.  Expert and learner are both controllers;
/// they differ only in parameters.
#[derive(Debug, Clone)]
pub struct Controller<D, C> {
    pub dynamics: D,
    pub cost: C,
    pub horizon: usize,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    pub convergence_tol: f64,
    pub max_iters: usize,
    /// Optional shared sink recording solver-invariant violations for every
    /// solve issued through this controller.
    pub audit: Option<Arc<SolveAudit>>,
}

impl<D: DynModel + Clone, C: CostModel + Clone> Controller<D, C> {
    pub fn new(
        dynamics: D,
        cost: C,
        horizon: usize,
        u_lower: DVector<f64>,
        u_upper: DVector<f64>,
    ) -> Self {
        Controller {
            dynamics,
            cost,
            horizon,
            u_lower,
            u_upper,
            convergence_tol: 1e-7,
            max_iters: 200,
            audit: None,
        }
    }

    /// The control problem from `x_init`, always warm-started at zero
    /// controls.  The fixed warm start is what makes the imitation loss
    /// vanish exactly when the learner equals the expert.
    pub fn problem_for(&self, x_init: &DVector<f64>) -> MpcProblem<D, C> {
        MpcProblem::new(
            self.dynamics.clone(),
            self.cost.clone(),
            self.horizon,
            x_init.clone(),
            self.u_lower.clone(),
            self.u_upper.clone(),
        )
        .expect("controller dimensions are validated at construction")
        .with_tol(self.convergence_tol)
        .with_max_iters(self.max_iters)
    }

    pub fn solve(&self, x_init: &DVector<f64>) -> FixedPoint {
        let problem = self.problem_for(x_init);
        let fp = mpc_solve(&problem);
        if let Some(audit) = &self.audit {
            audit.record(&problem, &fp);
        }
        fp
    }
}

/// One expert demonstration: an initial state and the expert's converged
/// nominal trajectory from it.
#[derive(Debug, Clone)]
pub struct ImitationRecord {
    pub x_init: DVector<f64>,
    pub expert: Trajectory,
}

#[derive(Debug, Clone)]
pub struct ImitationDataset {
    pub train: Vec<ImitationRecord>,
    pub val: Vec<ImitationRecord>,
    pub test: Vec<ImitationRecord>,
    pub seed: u64,
}

/// Draw `(train, val, test)` expert demonstrations, redrawing any initial
/// state whose expert solve fails to converge: stored trajectories are
/// converged fixed points only.
pub fn generate_dataset<D, C, S>(
    expert: &Controller<D, C>,
    sizes: (usize, usize, usize),
    seed: u64,
    mut sample_state: S,
) -> Result<ImitationDataset, ImitationError>
where
    D: DynModel + Clone,
    C: CostModel + Clone,
    S: FnMut(&mut ChaCha8Rng) -> DVector<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: Vec<Vec<ImitationRecord>> = Vec::with_capacity(3);
    let mut slot = 0;
    for &size in &[sizes.0, sizes.1, sizes.2] {
        let mut records = Vec::with_capacity(size);
        for _ in 0..size {
            let mut found = None;
            for _ in 0..MAX_DRAWS_PER_RECORD {
                let x_init = sample_state(&mut rng);
                let fp = expert.solve(&x_init);
                if fp.converged {
                    found = Some(ImitationRecord { x_init, expert: fp.traj });
                    break;
                }
            }
            match found {
                Some(r) => records.push(r),
                None => return Err(ImitationError::DatasetGeneration { slot }),
            }
            slot += 1;
        }
        splits.push(records);
    }
    let test = splits.pop().expect("three splits were pushed");
    let val = splits.pop().expect("three splits were pushed");
    let train = splits.pop().expect("three splits were pushed");
    Ok(ImitationDataset { train, val, test, seed })
}

/// Uniform pendulum initial state: angle in `[-pi, pi)` embedded as cos/sin,
/// angular velocity in `[-1, 1)`.
pub fn sample_pendulum_state(rng: &mut ChaCha8Rng) -> DVector<f64> {
    let th = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let om = rng.gen_range(-1.0..1.0);
    DVector::from_vec(vec![th.cos(), th.sin(), om])
}

/// Uniform cartpole initial state: position in `[-0.5, 0.5)`, angle in
/// `[-pi, pi)` embedded, both velocities in `[-0.5, 0.5)`.
pub fn sample_cartpole_state(rng: &mut ChaCha8Rng) -> DVector<f64> {
    let pos = rng.gen_range(-0.5..0.5);
    let vel = rng.gen_range(-0.5..0.5);
    let th = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let om = rng.gen_range(-0.5..0.5);
    DVector::from_vec(vec![pos, vel, th.cos(), th.sin(), om])
}

/// Which trajectory blocks the imitation loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Full joint vectors (states and controls) per timestep.
    FullTrajectory,
    /// Controls only; the state block of the trajectory gradient is zero.
    ControlsOnly,
}

/// Squared distance of one learner fixed point to the expert demonstration,
/// with the (unnormalized) loss gradient over the learner trajectory.
fn datum_loss_grad(
    fp: &FixedPoint,
    record: &ImitationRecord,
    kind: LossKind,
    n_state: usize,
) -> (f64, Vec<DVector<f64>>) {
    let horizon = fp.traj.horizon();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let d = fp.traj.tau(t) - record.expert.tau(t);
        let mut g = &d * 2.0;
        match kind {
            LossKind::FullTrajectory => loss += d.dot(&d),
            LossKind::ControlsOnly => {
                let du = d.rows(n_state, d.len() - n_state);
                loss += du.dot(&du);
                for i in 0..n_state {
                    g[i] = 0.0;
                }
            }
        }
        grad.push(g);
    }
    (loss, grad)
}

/// Mean imitation loss of a learner over demonstrations, without gradients.
/// Non-converged solves are skipped and counted; the mean runs over the
/// converged rest.
pub fn imitation_eval<D: DynModel + Clone, C: CostModel + Clone>(
    learner: &Controller<D, C>,
    records: &[ImitationRecord],
    kind: LossKind,
    epoch: usize,
) -> Result<(f64, usize), ImitationError> {
    let mut loss = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for record in records {
        let fp = learner.solve(&record.x_init);
        if !fp.converged {
            skipped += 1;
            continue;
        }
        let (l, _) = datum_loss_grad(&fp, record, kind, learner.dynamics.n_state());
        loss += l;
        used += 1;
    }
    if used == 0 {
        return Err(ImitationError::AllSkipped { epoch, curves: Vec::new() });
    }
    Ok((loss / used as f64, skipped))
}

/// Mean imitation loss over a batch plus, per converged datum, the solved
/// fixed point and its expansion-level gradients with the `1/|converged|`
/// scaling already applied — ready for the per-method parameter chain rule.
#[allow(clippy::type_complexity)]
fn imitation_batch<D: DynModel + Clone, C: CostModel + Clone>(
    learner: &Controller<D, C>,
    batch: &[&ImitationRecord],
    kind: LossKind,
    epoch: usize,
) -> Result<(f64, Vec<(FixedPoint, MpcGradients)>, usize), ImitationError> {
    let n_state = learner.dynamics.n_state();
    let mut solved = Vec::with_capacity(batch.len());
    let mut skipped = 0usize;
    for record in batch {
        let fp = learner.solve(&record.x_init);
        if !fp.converged {
            skipped += 1;
            continue;
        }
        let (l, g) = datum_loss_grad(&fp, record, kind, n_state);
        solved.push((record.x_init.clone(), fp, l, g));
    }
    if solved.is_empty() {
        return Err(ImitationError::AllSkipped { epoch, curves: Vec::new() });
    }
    let count = solved.len() as f64;
    let mut loss = 0.0;
    let mut out = Vec::with_capacity(solved.len());
    for (x_init, fp, l, mut grad_tau) in solved {
        loss += l;
        for g in &mut grad_tau {
            *g /= count;
        }
        let problem = learner.problem_for(&x_init);
        // the fixed point converged, so the backward pass can only fail on a
        // genuinely singular free block, which is worth a loud stop
        let mg = mpc_backward(&problem, &fp, &grad_tau)
            .expect("backward pass on a converged fixed point");
        out.push((fp, mg));
    }
    Ok((loss / count, out, skipped))
}

/// Mean squared error between two flattened parameter vectors of equal
/// structure.
pub fn model_loss(a: &[f64], b: &[f64]) -> Result<f64, ImitationError> {
    if a.len() != b.len() {
        return Err(ImitationError::ParamMismatch { expected: a.len(), got: b.len() });
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// One observed state transition `(x, u) -> x_next`.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

/// All single-step transitions contained in a set of demonstrations.
pub fn transitions_of(records: &[ImitationRecord]) -> Vec<Transition> {
    let mut out = Vec::new();
    for record in records {
        for t in 0..record.expert.horizon() - 1 {
            out.push(Transition {
                x: record.expert.x[t].clone(),
                u: record.expert.u[t].clone(),
                x_next: record.expert.x[t + 1].clone(),
            });
        }
    }
    out
}

/// Mean squared next-state prediction error.
pub fn sysid_loss<D: DynModel>(dynamics: &D, transitions: &[Transition]) -> f64 {
    let total: f64 = transitions
        .iter()
        .map(|tr| {
            let d = dynamics.step(&tr.x, &tr.u) - &tr.x_next;
            d.dot(&d)
        })
        .sum();
    total / transitions.len() as f64
}

/// Transition loss with its parameter gradient: the residual adjoint
/// `2 (f(x, u) - x')` contracted with parameter Jacobian-vector products of
/// the step map, the latter by central differences (the parameter vectors
/// here are tiny).
fn sysid_accumulate<'a, D, I>(dynamics: &D, transitions: I) -> (f64, Vec<f64>)
where
    D: ParamDyn,
    I: Iterator<Item = &'a Transition>,
{
    let params = dynamics.params();
    let probes: Vec<(D, D)> = (0..params.len())
        .map(|i| {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[i] += SYSID_FD_STEP;
            minus[i] -= SYSID_FD_STEP;
            (dynamics.with_params(&plus), dynamics.with_params(&minus))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    let mut count = 0usize;
    for tr in transitions {
        let resid = dynamics.step(&tr.x, &tr.u) - &tr.x_next;
        loss += resid.dot(&resid);
        for (g, (plus, minus)) in grad.iter_mut().zip(&probes) {
            let jvp =
                (plus.step(&tr.x, &tr.u) - minus.step(&tr.x, &tr.u)) / (2.0 * SYSID_FD_STEP);
            *g += 2.0 * jvp.dot(&resid);
        }
        count += 1;
    }
    let scale = 1.0 / count.max(1) as f64;
    (loss * scale, grad.into_iter().map(|g| g * scale).collect())
}

/// Transition loss and gradient over a full transition set.
pub fn sysid_grad<D: ParamDyn>(dynamics: &D, transitions: &[Transition]) -> (f64, Vec<f64>) {
    sysid_accumulate(dynamics, transitions.iter())
}

/// RMSprop: `acc = decay acc + (1 - decay) g^2`, then
/// `p -= lr g / sqrt(acc + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    acc: Vec<f64>,
}

impl RmsProp {
    pub fn new(lr: f64, decay: f64, dim: usize) -> Self {
        RmsProp { lr, decay, eps: 1e-8, acc: vec![0.0; dim] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.acc.len());
        for i in 0..params.len() {
            self.acc[i] = self.decay * self.acc[i] + (1.0 - self.decay) * grad[i] * grad[i];
            params[i] -= self.lr * grad[i] / (self.acc[i] + self.eps).sqrt();
        }
    }
}

/// Adam with bias correction (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Optimizer choice as plain config data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerSpec {
    RmsProp { lr: f64, decay: f64 },
    Adam { lr: f64 },
}

enum Optimizer {
    RmsProp(RmsProp),
    Adam(Adam),
}

impl Optimizer {
    fn new(spec: OptimizerSpec, dim: usize) -> Self {
        match spec {
            OptimizerSpec::RmsProp { lr, decay } => {
                Optimizer::RmsProp(RmsProp::new(lr, decay, dim))
            }
            OptimizerSpec::Adam { lr } => Optimizer::Adam(Adam::new(lr, dim)),
        }
    }
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::RmsProp(o) => o.step(params, grad),
            Optimizer::Adam(o) => o.step(params, grad),
        }
    }
}

/// Training method tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Learn linear dynamics through the full-trajectory imitation loss.
    LqrDx,
    /// Learn structured dynamics parameters through the control-only loss.
    MpcDx,
    /// Learn goal-cost parameters with known dynamics, alternating the
    /// weight and goal blocks.
    MpcCost,
    /// Learn dynamics and cost together; cost blocks alternate, dynamics
    /// update every epoch.
    MpcCostDx,
    /// Regress dynamics parameters on next-state transitions.
    Sysid,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs per alternation block for cost learning (weights first).
    pub alternation_period: usize,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self, expected_method: Method, train_size: usize) -> Result<(), ImitationError> {
        if self.method != expected_method {
            return Err(ImitationError::InvalidConfig(format!(
                "config method {:?} does not match the training entry point {:?}",
                self.method, expected_method
            )));
        }
        if self.alternation_period == 0 {
            return Err(ImitationError::InvalidConfig(
                "alternation_period must be at least 1".to_string(),
            ));
        }
        if self.batch_size == 0 || self.batch_size > train_size {
            return Err(ImitationError::InvalidConfig(format!(
                "batch_size {} must be in 1..={train_size}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(ImitationError::InvalidConfig("epochs must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Losses recorded at one epoch boundary; epoch 0 is the evaluation at the
/// initial parameters, before any update.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    /// Mean squared parameter distance to the expert, when the learner's
    /// parameter structure matches the expert's.
    pub model_loss: Option<f64>,
    /// Solves skipped for non-convergence during this epoch (training
    /// batches plus the three split evaluations).
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// One row per epoch, including the pre-training row at epoch 0.
    pub curves: Vec<EpochStats>,
    /// Parameters at the best validation loss seen during the run.
    pub best_params: Vec<f64>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub final_params: Vec<f64>,
}

/// What each method supplies to the shared epoch loop: parameter access,
/// batch gradients, split evaluation, domain projection, and the per-epoch
/// update mask for alternation schedules.
trait TrainMethod {
    type Item;
    fn dim(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);
    fn project(&self, _p: &mut [f64]) {}
    /// Expert parameters for the model loss, when the structures match.
    fn expert_params(&self) -> Option<&[f64]>;
    fn batch_grad(
        &self,
        batch: &[&Self::Item],
        epoch: usize,
    ) -> Result<(f64, Vec<f64>, usize), ImitationError>;
    fn eval_split(
        &self,
        items: &[Self::Item],
        epoch: usize,
    ) -> Result<(f64, usize), ImitationError>;
    fn update_mask(&self, _epoch: usize, _period: usize) -> Vec<bool> {
        vec![true; self.dim()]
    }
}

fn eval_epoch<M: TrainMethod>(
    method: &M,
    train: &[M::Item],
    val: &[M::Item],
    test: &[M::Item],
    epoch: usize,
    extra_skipped: usize,
) -> Result<EpochStats, ImitationError> {
    let (train_loss, s1) = method.eval_split(train, epoch)?;
    let (val_loss, s2) = method.eval_split(val, epoch)?;
    let (test_loss, s3) = method.eval_split(test, epoch)?;
    let model = match method.expert_params() {
        Some(expert) => Some(model_loss(&method.params(), expert)?),
        None => None,
    };
    Ok(EpochStats {
        epoch,
        train_loss,
        val_loss,
        test_loss,
        model_loss: model,
        skipped: extra_skipped + s1 + s2 + s3,
    })
}

/// Shared optimizer loop: epoch-0 evaluation, shuffled mini-batches, masked
/// updates, domain projection, divergence detection, best-validation
/// tracking.  Any abort carries the learning curves recorded so far.
fn run_training<M: TrainMethod>(
    method: &mut M,
    expected_method: Method,
    train: &[M::Item],
    val: &[M::Item],
    test: &[M::Item],
    cfg: &TrainConfig,
) -> Result<TrainResult, ImitationError> {
    cfg.validate(expected_method, train.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = method.params();
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let mut curves: Vec<EpochStats> = Vec::with_capacity(cfg.epochs + 1);

    let attach = |err: ImitationError, curves: &[EpochStats]| match err {
        ImitationError::AllSkipped { epoch, .. } => {
            ImitationError::AllSkipped { epoch, curves: curves.to_vec() }
        }
        other => other,
    };

    let initial = match eval_epoch(method, train, val, test, 0, 0) {
        Ok(stats) => stats,
        Err(e) => return Err(attach(e, &curves)),
    };
    let mut best_val = initial.val_loss;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    curves.push(initial);

    for epoch in 1..=cfg.epochs {
        let mask = method.update_mask(epoch, cfg.alternation_period);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut train_skipped = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&M::Item> = chunk.iter().map(|&i| &train[i]).collect();
            let (_, mut grad, skipped) = match method.batch_grad(&batch, epoch) {
                Ok(out) => out,
                Err(e) => return Err(attach(e, &curves)),
            };
            train_skipped += skipped;
            for (g, &allowed) in grad.iter_mut().zip(&mask) {
                if !allowed {
                    *g = 0.0;
                }
            }
            opt.step(&mut params, &grad);
            method.project(&mut params);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(ImitationError::Diverged { epoch, curves });
            }
            method.set_params(&params);
        }
        let stats = match eval_epoch(method, train, val, test, epoch, train_skipped) {
            Ok(stats) => stats,
            Err(e) => return Err(attach(e, &curves)),
        };
        if !(stats.train_loss.is_finite()
            && stats.val_loss.is_finite()
            && stats.test_loss.is_finite())
        {
            return Err(ImitationError::Diverged { epoch, curves });
        }
        if stats.val_loss < best_val {
            best_val = stats.val_loss;
            best_params = params.clone();
            best_epoch = epoch;
        }
        curves.push(stats);
    }

    Ok(TrainResult {
        curves,
        best_params,
        best_val_loss: best_val,
        best_epoch,
        final_params: params,
    })
}

/// Alternation mask over a `[weights_sq | goal]` block starting at `offset`:
/// the weight half moves first, switching every `period` epochs; everything
/// before `offset` always moves.
fn cost_alternation_mask(
    epoch: usize,
    period: usize,
    k: usize,
    offset: usize,
    dim: usize,
) -> Vec<bool> {
    let weights_turn = ((epoch - 1) / period) % 2 == 0;
    let mut mask = vec![true; dim];
    for (i, m) in mask.iter_mut().enumerate().skip(offset) {
        let in_weights = i - offset < k;
        *m = if in_weights { weights_turn } else { !weights_turn };
    }
    mask
}

// --------------------------------------------------------------------------
// lqr.dx: learn (A, B) of linear dynamics through the full-trajectory loss.
// --------------------------------------------------------------------------

struct LqrDxMethod<C: CostModel + Clone> {
    learner: Controller<LinearDyn, C>,
    expert: Vec<f64>,
}

impl<C: CostModel + Clone> TrainMethod for LqrDxMethod<C> {
    type Item = ImitationRecord;
    fn dim(&self) -> usize {
        self.learner.dynamics.params().len()
    }
    fn params(&self) -> Vec<f64> {
        self.learner.dynamics.params()
    }
    fn set_params(&mut self, p: &[f64]) {
        self.learner.dynamics = self.learner.dynamics.with_params(p);
    }
    fn expert_params(&self) -> Option<&[f64]> {
        Some(&self.expert)
    }
    fn batch_grad(
        &self,
        batch: &[&ImitationRecord],
        epoch: usize,
    ) -> Result<(f64, Vec<f64>, usize), ImitationError> {
        let (loss, solved, skipped) =
            imitation_batch(&self.learner, batch, LossKind::FullTrajectory, epoch)?;
        let n = self.learner.dynamics.n_state();
        let m = self.learner.dynamics.n_ctrl();
        let mut grad = vec![0.0; self.dim()];
        for (_, mg) in &solved {
            for (g, d) in grad.iter_mut().zip(linear_dyn_grad(n, m, mg)) {
                *g += d;
            }
        }
        Ok((loss, grad, skipped))
    }
    fn eval_split(
        &self,
        records: &[ImitationRecord],
        epoch: usize,
    ) -> Result<(f64, usize), ImitationError> {
        imitation_eval(&self.learner, records, LossKind::FullTrajectory, epoch)
    }
}

/// Learn linear dynamics by imitation; `learner` carries the initial
/// parameters, `expert_params` the flattened true `(A, B)` for the model
/// loss.
pub fn train_lqr_dx<C: CostModel + Clone>(
    learner: Controller<LinearDyn, C>,
    expert_params: Vec<f64>,
    dataset: &ImitationDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, ImitationError> {
    let mut method = LqrDxMethod { learner, expert: expert_params };
    run_training(&mut method, Method::LqrDx, &dataset.train, &dataset.val, &dataset.test, cfg)
}

// --------------------------------------------------------------------------
// mpc.dx: learn structured dynamics parameters through the control-only loss.
// --------------------------------------------------------------------------

struct MpcDxMethod<D: ParamDyn, C: CostModel + Clone> {
    learner: Controller<D, C>,
    expert: Vec<f64>,
}

impl<D: ParamDyn, C: CostModel + Clone> TrainMethod for MpcDxMethod<D, C> {
    type Item = ImitationRecord;
    fn dim(&self) -> usize {
        self.learner.dynamics.params().len()
    }
    fn params(&self) -> Vec<f64> {
        self.learner.dynamics.params()
    }
    fn set_params(&mut self, p: &[f64]) {
        self.learner.dynamics = self.learner.dynamics.with_params(p);
    }
    fn project(&self, p: &mut [f64]) {
        self.learner.dynamics.project_params(p);
    }
    fn expert_params(&self) -> Option<&[f64]> {
        Some(&self.expert)
    }
    fn batch_grad(
        &self,
        batch: &[&ImitationRecord],
        epoch: usize,
    ) -> Result<(f64, Vec<f64>, usize), ImitationError> {
        let (loss, solved, skipped) =
            imitation_batch(&self.learner, batch, LossKind::ControlsOnly, epoch)?;
        let mut grad = vec![0.0; self.dim()];
        for (fp, mg) in &solved {
            for (g, d) in grad.iter_mut().zip(dyn_param_grad(&self.learner.dynamics, fp, mg)) {
                *g += d;
            }
        }
        Ok((loss, grad, skipped))
    }
    fn eval_split(
        &self,
        records: &[ImitationRecord],
        epoch: usize,
    ) -> Result<(f64, usize), ImitationError> {
        imitation_eval(&self.learner, records, LossKind::ControlsOnly, epoch)
    }
}

/// Learn structured dynamics parameters (mass, length, gravity, ...) by
/// imitating expert controls.
pub fn train_mpc_dx<D: ParamDyn, C: CostModel + Clone>(
    learner: Controller<D, C>,
    expert_params: Vec<f64>,
    dataset: &ImitationDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, ImitationError> {
    let mut method = MpcDxMethod { learner, expert: expert_params };
    run_training(&mut method, Method::MpcDx, &dataset.train, &dataset.val, &dataset.test, cfg)
}

// --------------------------------------------------------------------------
// mpc.cost / mpc.cost.dx: learn the goal cost (optionally plus dynamics).
// --------------------------------------------------------------------------

/// Learnable vector of a goal cost: `[weights^2 | goal]`.
pub fn goal_cost_params(cost: &GoalCost) -> Vec<f64> {
    let k = cost.weights.len();
    let mut out = Vec::with_capacity(2 * k);
    out.extend(cost.weights.iter().map(|w| w * w));
    out.extend(cost.goal.iter());
    out
}

/// Inverse of [`goal_cost_params`]: weights are recovered as
/// `sqrt(max(w2, 0))`, so slightly negative optimizer iterates are legal.
pub fn goal_cost_from_params(p: &[f64]) -> GoalCost {
    let k = p.len() / 2;
    let weights = DVector::from_iterator(k, p[..k].iter().map(|w| w.max(0.0).sqrt()));
    let goal = DVector::from_iterator(k, p[k..].iter().copied());
    GoalCost::new(weights, goal)
}

struct MpcCostMethod<D: DynModel + Clone> {
    learner: Controller<D, GoalCost>,
    expert: Option<Vec<f64>>,
}

impl<D: DynModel + Clone> TrainMethod for MpcCostMethod<D> {
    type Item = ImitationRecord;
    fn dim(&self) -> usize {
        2 * self.learner.cost.weights.len()
    }
    fn params(&self) -> Vec<f64> {
        goal_cost_params(&self.learner.cost)
    }
    fn set_params(&mut self, p: &[f64]) {
        self.learner.cost = goal_cost_from_params(p);
    }
    fn project(&self, p: &mut [f64]) {
        let k = self.learner.cost.weights.len();
        for v in &mut p[..k] {
            *v = v.max(0.0);
        }
    }
    fn expert_params(&self) -> Option<&[f64]> {
        self.expert.as_deref()
    }
    fn batch_grad(
        &self,
        batch: &[&ImitationRecord],
        epoch: usize,
    ) -> Result<(f64, Vec<f64>, usize), ImitationError> {
        let (loss, solved, skipped) =
            imitation_batch(&self.learner, batch, LossKind::ControlsOnly, epoch)?;
        let k = self.learner.cost.weights.len();
        let mut grad = vec![0.0; 2 * k];
        for (_, mg) in &solved {
            let g = goal_cost_grad(&self.learner.cost, mg);
            for i in 0..k {
                grad[i] += g.weights_sq[i];
                grad[k + i] += g.goal[i];
            }
        }
        Ok((loss, grad, skipped))
    }
    fn eval_split(
        &self,
        records: &[ImitationRecord],
        epoch: usize,
    ) -> Result<(f64, usize), ImitationError> {
        imitation_eval(&self.learner, records, LossKind::ControlsOnly, epoch)
    }
    fn update_mask(&self, epoch: usize, period: usize) -> Vec<bool> {
        let k = self.learner.cost.weights.len();
        cost_alternation_mask(epoch, period, k, 0, 2 * k)
    }
}

/// Learn the goal-cost parameters with known dynamics, alternating the
/// weight and goal blocks every `alternation_period` epochs.
pub fn train_mpc_cost<D: DynModel + Clone>(
    learner: Controller<D, GoalCost>,
    expert_params: Option<Vec<f64>>,
    dataset: &ImitationDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, ImitationError> {
    let mut method = MpcCostMethod { learner, expert: expert_params };
    run_training(&mut method, Method::MpcCost, &dataset.train, &dataset.val, &dataset.test, cfg)
}

struct MpcCostDxMethod<D: ParamDyn> {
    learner: Controller<D, GoalCost>,
    expert: Option<Vec<f64>>,
}

impl<D: ParamDyn> MpcCostDxMethod<D> {
    fn dyn_dim(&self) -> usize {
        self.learner.dynamics.params().len()
    }
}

impl<D: ParamDyn> TrainMethod for MpcCostDxMethod<D> {
    type Item = ImitationRecord;
    fn dim(&self) -> usize {
        self.dyn_dim() + 2 * self.learner.cost.weights.len()
    }
    fn params(&self) -> Vec<f64> {
        let mut out = self.learner.dynamics.params();
        out.extend(goal_cost_params(&self.learner.cost));
        out
    }
    fn set_params(&mut self, p: &[f64]) {
        let d = self.dyn_dim();
        self.learner.dynamics = self.learner.dynamics.with_params(&p[..d]);
        self.learner.cost = goal_cost_from_params(&p[d..]);
    }
    fn project(&self, p: &mut [f64]) {
        let d = self.dyn_dim();
        self.learner.dynamics.project_params(&mut p[..d]);
        let k = self.learner.cost.weights.len();
        for v in &mut p[d..d + k] {
            *v = v.max(0.0);
        }
    }
    fn expert_params(&self) -> Option<&[f64]> {
        self.expert.as_deref()
    }
    fn batch_grad(
        &self,
        batch: &[&ImitationRecord],
        epoch: usize,
    ) -> Result<(f64, Vec<f64>, usize), ImitationError> {
        let (loss, solved, skipped) =
            imitation_batch(&self.learner, batch, LossKind::ControlsOnly, epoch)?;
        let d = self.dyn_dim();
        let k = self.learner.cost.weights.len();
        let mut grad = vec![0.0; d + 2 * k];
        for (fp, mg) in &solved {
            for (g, v) in grad[..d]
                .iter_mut()
                .zip(dyn_param_grad(&self.learner.dynamics, fp, mg))
            {
                *g += v;
            }
            let gc = goal_cost_grad(&self.learner.cost, mg);
            for i in 0..k {
                grad[d + i] += gc.weights_sq[i];
                grad[d + k + i] += gc.goal[i];
            }
        }
        Ok((loss, grad, skipped))
    }
    fn eval_split(
        &self,
        records: &[ImitationRecord],
        epoch: usize,
    ) -> Result<(f64, usize), ImitationError> {
        imitation_eval(&self.learner, records, LossKind::ControlsOnly, epoch)
    }
    fn update_mask(&self, epoch: usize, period: usize) -> Vec<bool> {
        let k = self.learner.cost.weights.len();
        // dynamics parameters move every epoch; cost blocks alternate
        cost_alternation_mask(epoch, period, k, self.dyn_dim(), self.dim())
    }
}

/// Learn dynamics parameters and the goal cost together; the cost blocks
/// follow the alternation schedule while dynamics update every epoch.
pub fn train_mpc_cost_dx<D: ParamDyn>(
    learner: Controller<D, GoalCost>,
    expert_params: Option<Vec<f64>>,
    dataset: &ImitationDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, ImitationError> {
    let mut method = MpcCostDxMethod { learner, expert: expert_params };
    run_training(&mut method, Method::MpcCostDx, &dataset.train, &dataset.val, &dataset.test, cfg)
}

// --------------------------------------------------------------------------
// sysid: regress dynamics parameters on next-state transitions.
// --------------------------------------------------------------------------

struct SysidMethod<D: ParamDyn> {
    dynamics: D,
    expert: Vec<f64>,
}

impl<D: ParamDyn> TrainMethod for SysidMethod<D> {
    type Item = Transition;
    fn dim(&self) -> usize {
        self.dynamics.params().len()
    }
    fn params(&self) -> Vec<f64> {
        self.dynamics.params()
    }
    fn set_params(&mut self, p: &[f64]) {
        self.dynamics = self.dynamics.with_params(p);
    }
    fn project(&self, p: &mut [f64]) {
        self.dynamics.project_params(p);
    }
    fn expert_params(&self) -> Option<&[f64]> {
        Some(&self.expert)
    }
    fn batch_grad(
        &self,
        batch: &[&Transition],
        _epoch: usize,
    ) -> Result<(f64, Vec<f64>, usize), ImitationError> {
        let (loss, grad) = sysid_accumulate(&self.dynamics, batch.iter().copied());
        Ok((loss, grad, 0))
    }
    fn eval_split(
        &self,
        transitions: &[Transition],
        _epoch: usize,
    ) -> Result<(f64, usize), ImitationError> {
        Ok((sysid_loss(&self.dynamics, transitions), 0))
    }
}

/// Fit dynamics parameters to the dataset's observed transitions.  The
/// learning-curve losses are transition losses; downstream imitation quality
/// of the fitted model is evaluated separately by the caller.
pub fn train_sysid<D: ParamDyn>(
    dynamics: D,
    expert_params: Vec<f64>,
    dataset: &ImitationDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, ImitationError> {
    let train = transitions_of(&dataset.train);
    let val = transitions_of(&dataset.val);
    let test = transitions_of(&dataset.test);
    let mut method = SysidMethod { dynamics, expert: expert_params };
    run_training(&mut method, Method::Sysid, &train, &val, &test, cfg)
}
