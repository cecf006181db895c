//! Preconditioned heavy-ball SGD on the linearized problem, its closed-form
//! dynamics, and a reference trainer for the nonlinear network.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{check_len, LqfError, Result};
use crate::kfac::KfacState;
use crate::linalg::{guard, spd_inverse, spectral_map, sym_eigen_desc, symmetrize};
use crate::net::{Evaluator, NetworkSpec, ParamVector, TangentModel};
use crate::quadratic::{argmax, LinearizedProblem};

/// Divergence is declared when the loss exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PreconditionerKind {
    None,
    /// K-FAC inverse; `damping` overrides the estimated state's damping.
    Kfac { damping: Option<f64> },
    ExactInverse,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl PreconditionerKind {
    pub fn adam() -> Self {
        PreconditionerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// `η_t = η / (1 + t/horizon)` over global steps `t`.
    Decay { horizon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StopRule {
    /// Full gradient norm below `stop_tolerance × ‖g(start)‖`.
    GradientNorm,
    /// Train error below `threshold` for `patience` consecutive epochs.
    TrainError { threshold: f64, patience: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub momentum: f64,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub preconditioner: PreconditionerKind,
    pub max_epochs: usize,
    pub stop_tolerance: f64,
    pub stop: StopRule,
    pub schedule: Schedule,
    pub seed: u64,
    /// Record wall-clock time in step records (breaks bit-identical metrics).
    pub wall_clock: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            eta: 0.1,
            momentum: 0.0,
            batch_size: None,
            preconditioner: PreconditionerKind::Kfac { damping: None },
            max_epochs: 1000,
            stop_tolerance: 1e-8,
            stop: StopRule::GradientNorm,
            schedule: Schedule::Constant,
            seed: 0,
            wall_clock: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(LqfError::contract(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LqfError::contract(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > samples {
                return Err(LqfError::contract(format!("batch_size must be in 1..={samples}, got {b}")));
            }
        }
        if !(self.stop_tolerance >= 0.0) {
            return Err(LqfError::contract("stop_tolerance must be >= 0"));
        }
        if let Schedule::Decay { horizon } = self.schedule {
            if !(horizon > 0.0) {
                return Err(LqfError::contract("decay horizon must be > 0"));
            }
        }
        if let PreconditionerKind::Adam { beta1, beta2, eps } = self.preconditioner {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(LqfError::contract("adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }

    fn eta_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.eta,
            Schedule::Decay { horizon } => self.eta / (1.0 + step as f64 / horizon),
        }
    }
}

/// A matrix `A` applied to gradients. May keep state (Adam).
pub trait Preconditioner {
    fn precondition(&mut self, grad: &DVector<f64>) -> Result<DVector<f64>>;
}

pub struct Identity;

impl Preconditioner for Identity {
    fn precondition(&mut self, grad: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(grad.clone())
    }
}

/// A fixed dense matrix.
pub struct DensePreconditioner(pub DMatrix<f64>);

impl Preconditioner for DensePreconditioner {
    fn precondition(&mut self, grad: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("preconditioned gradient", self.0.ncols(), grad.len())?;
        Ok(&self.0 * grad)
    }
}

impl Preconditioner for KfacState {
    fn precondition(&mut self, grad: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_inverse(grad)
    }
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, m: DVector::zeros(dim), v: DVector::zeros(dim), t: 0 }
    }
}

impl Preconditioner for Adam {
    fn precondition(&mut self, grad: &DVector<f64>) -> Result<DVector<f64>> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.m = &self.m * b1 + grad * (1.0 - b1);
        self.v = &self.v * b2 + grad.component_mul(grad) * (1.0 - b2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        Ok(DVector::from_fn(grad.len(), |k, _| (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub dist_to_opt: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    TrainError,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Record 0 is the start point; then one per epoch.
    pub records: Vec<StepRecord>,
    pub final_dw: DVector<f64>,
    pub steps: usize,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.records.last().expect("trajectory has a start record").loss
    }

    /// One JSON object per record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Start point and reference optimum for [`train_from`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    pub start: Option<&'a DVector<f64>>,
    /// When given, records carry `‖w_t − w*‖`.
    pub reference: Option<&'a DVector<f64>>,
}

/// Trains from `dw = 0`.
pub fn train(problem: &LinearizedProblem, config: &OptimizerConfig, kfac: Option<&KfacState>) -> Result<Trajectory> {
    train_from(problem, config, kfac, TrainOptions::default())
}

/// Resolves the configured preconditioner and trains.
pub fn train_from(
    problem: &LinearizedProblem,
    config: &OptimizerConfig,
    kfac: Option<&KfacState>,
    options: TrainOptions<'_>,
) -> Result<Trajectory> {
    config.validate(problem.samples())?;
    match (config.preconditioner, kfac) {
        (PreconditionerKind::Kfac { damping }, Some(state)) => {
            check_len("curvature parameter count", problem.dim(), state.dim())?;
            let gamma = damping.unwrap_or(state.damping()) + problem.lambda();
            let mut state = state.with_damping(gamma)?;
            run(problem, config, &mut state, options)
        }
        (PreconditionerKind::Kfac { .. }, None) => {
            Err(LqfError::contract("kfac preconditioner requires an estimated curvature state"))
        }
        (_, Some(_)) => Err(LqfError::contract("curvature state supplied without the kfac preconditioner")),
        (PreconditionerKind::None, None) => run(problem, config, &mut Identity, options),
        (PreconditionerKind::ExactInverse, None) => {
            let mut inv = spd_inverse(&problem.exact_hessian()?)?;
            symmetrize(&mut inv);
            run(problem, config, &mut DensePreconditioner(inv), options)
        }
        (PreconditionerKind::Adam { beta1, beta2, eps }, None) => {
            run(problem, config, &mut Adam::new(problem.dim(), beta1, beta2, eps), options)
        }
    }
}

/// Heavy-ball iteration `w ← w − η_t·A·g + m·(w − w_prev)` with any preconditioner.
pub fn run(
    problem: &LinearizedProblem,
    config: &OptimizerConfig,
    precond: &mut dyn Preconditioner,
    options: TrainOptions<'_>,
) -> Result<Trajectory> {
    config.validate(problem.samples())?;
    let n = problem.samples();
    let d = problem.dim();
    let mut w = match options.start {
        Some(s) => {
            check_len("start point", d, s.len())?;
            s.clone()
        }
        None => DVector::zeros(d),
    };
    if let Some(r) = options.reference {
        check_len("reference optimum", d, r.len())?;
    }
    let clock = Instant::now();
    let record = |step: usize, epoch: usize, w: &DVector<f64>, grad: &DVector<f64>| StepRecord {
        step,
        epoch,
        loss: problem.loss(w),
        grad_norm: grad.norm(),
        dist_to_opt: options.reference.map(|r| (w - r).norm()),
        wall_ms: config.wall_clock.then(|| clock.elapsed().as_secs_f64() * 1e3),
    };

    let grad0 = problem.gradient(&w);
    let first = record(0, 0, &w, &grad0);
    let initial_loss = first.loss.max(f64::MIN_POSITIVE);
    let grad_scale = first.grad_norm;
    let mut records = vec![first];
    if grad_scale == 0.0 && config.stop == StopRule::GradientNorm {
        return Ok(Trajectory { records, final_dw: w, steps: 0, stop_reason: StopReason::Converged });
    }

    let batch = config.batch_size.unwrap_or(n);
    let full_batch = batch == n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prev = w.clone();
    let mut step = 0;
    let mut streak = 0;
    let mut grad = grad0;
    for epoch in 1..=config.max_epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let g = if full_batch { grad.clone() } else { problem.batch_gradient(&w, chunk) };
            let direction = precond.precondition(&g)?;
            let next = &w - direction * config.eta_at(step) + (&w - &prev) * config.momentum;
            prev = std::mem::replace(&mut w, next);
            step += 1;
            if full_batch {
                grad = problem.gradient(&w);
            }
        }
        if !full_batch {
            grad = problem.gradient(&w);
        }
        let rec = record(step, epoch, &w, &grad);
        if !rec.loss.is_finite() || rec.loss > DIVERGENCE_FACTOR * initial_loss {
            return Err(LqfError::Divergence { step, loss: rec.loss });
        }
        records.push(rec);
        let reason = match config.stop {
            StopRule::GradientNorm => (grad.norm() <= config.stop_tolerance * grad_scale).then_some(StopReason::Converged),
            StopRule::TrainError { threshold, patience } => {
                if problem.error_rate(&w)? < threshold {
                    streak += 1;
                } else {
                    streak = 0;
                }
                (streak >= patience).then_some(StopReason::TrainError)
            }
        };
        if let Some(stop_reason) = reason {
            return Ok(Trajectory { records, final_dw: w, steps: step, stop_reason });
        }
    }
    Ok(Trajectory { records, final_dw: w, steps: step, stop_reason: StopReason::MaxEpochs })
}

/// `(I − ηAH)ᵗ (w0 − w*)` by repeated multiplication.
pub fn predicted_distance(
    h: &DMatrix<f64>,
    a: &DMatrix<f64>,
    eta: f64,
    t: usize,
    w0_minus_wstar: &DVector<f64>,
) -> Result<DVector<f64>> {
    guard(h.nrows())?;
    check_len("curvature columns", h.nrows(), h.ncols())?;
    check_len("preconditioner rows", h.nrows(), a.nrows())?;
    check_len("preconditioner columns", h.nrows(), a.ncols())?;
    check_len("initial offset", h.nrows(), w0_minus_wstar.len())?;
    let step = DMatrix::identity(h.nrows(), h.nrows()) - a * h * eta;
    let mut e = w0_minus_wstar.clone();
    for _ in 0..t {
        e = &step * e;
    }
    Ok(e)
}

/// `2 / λ_max(A^{1/2} H A^{1/2})` for symmetric positive definite `A`.
pub fn max_stable_lr(h: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<f64> {
    guard(h.nrows())?;
    check_len("preconditioner size", h.nrows(), a.nrows())?;
    let mut a = a.clone();
    symmetrize(&mut a);
    let (values, vectors) = sym_eigen_desc(&a);
    if values.iter().any(|&v| v <= 0.0) {
        return Err(LqfError::NotPositiveDefinite("preconditioner".into()));
    }
    let root = spectral_map(&values, &vectors, f64::sqrt);
    let mut product = &root * h * &root;
    symmetrize(&mut product);
    let (eig, _) = sym_eigen_desc(&product);
    let top = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(2.0 / top)
}

/// `η / ((1 − m)·b)`.
pub fn effective_learning_rate(eta: f64, momentum: f64, batch_size: usize) -> f64 {
    eta / ((1.0 - momentum) * batch_size as f64)
}

/// Error rate of the tangent model at `w0 + dw`.
pub fn evaluate(model: &TangentModel, dw: &DVector<f64>, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(LqfError::EmptyDataset);
    }
    let wrong: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(argmax(model.linear_forward(dw, data.input(i))?.as_slice()) != data.label(i)))
        .collect::<Result<_>>()?;
    Ok(wrong.iter().filter(|&&w| w).count() as f64 / data.len() as f64)
}

/// Error rate of a plain network.
pub fn evaluate_nonlinear(spec: &NetworkSpec, params: &ParamVector, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(LqfError::EmptyDataset);
    }
    let eval = Evaluator::new(spec)?;
    let net = eval.bind(params.values.as_slice());
    let mut wrong = 0;
    for (x, y) in data.iter() {
        if argmax(&net.forward(x)?) != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NonlinearLoss {
    CrossEntropy,
    /// `½‖f(x) − α·onehot(y)‖²`.
    Mse { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearConfig {
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: NonlinearLoss,
    /// Stop once the train error stays below `threshold` for `patience` epochs.
    pub stop: Option<(f64, usize)>,
    pub seed: u64,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        NonlinearConfig {
            eta: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 100,
            loss: NonlinearLoss::CrossEntropy,
            stop: None,
            seed: 0,
        }
    }
}

impl NonlinearConfig {
    /// Settings for producing a pre-trained linearization point.
    pub fn pretraining() -> Self {
        NonlinearConfig { eta: 0.05, batch_size: 32, epochs: 50, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearRun {
    pub records: Vec<NonlinearRecord>,
    pub params: ParamVector,
}

/// Loss and its gradient with respect to the outputs.
fn output_loss(out: &[f64], label: usize, loss: NonlinearLoss) -> (f64, Vec<f64>) {
    match loss {
        NonlinearLoss::CrossEntropy => {
            let top = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = out.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = exp.iter().sum();
            let value = z.ln() + top - out[label];
            let mut grad: Vec<f64> = exp.iter().map(|e| e / z).collect();
            grad[label] -= 1.0;
            (value, grad)
        }
        NonlinearLoss::Mse { alpha } => {
            let mut grad = out.to_vec();
            grad[label] -= alpha;
            (0.5 * grad.iter().map(|g| g * g).sum::<f64>(), grad)
        }
    }
}

fn nonlinear_epoch_stats(eval: &Evaluator, w: &[f64], data: &LabeledDataset, config: &NonlinearConfig) -> Result<(f64, f64)> {
    let net = eval.bind(w);
    let mut total = 0.0;
    let mut wrong = 0;
    for (x, y) in data.iter() {
        let out = net.forward(x)?;
        total += output_loss(&out, y, config.loss).0;
        if argmax(&out) != y {
            wrong += 1;
        }
    }
    let decay = 0.5 * config.weight_decay * w.iter().map(|v| v * v).sum::<f64>();
    Ok((total / data.len() as f64 + decay, wrong as f64 / data.len() as f64))
}

/// Mini-batch SGD with heavy-ball momentum and weight decay on the network itself.
pub fn train_nonlinear(
    spec: &NetworkSpec,
    w0: &ParamVector,
    data: &LabeledDataset,
    config: &NonlinearConfig,
) -> Result<NonlinearRun> {
    if !(config.eta >= 0.0) || !(0.0..1.0).contains(&config.momentum) || config.batch_size == 0 {
        return Err(LqfError::contract("nonlinear trainer needs eta >= 0, momentum in [0, 1), batch_size >= 1"));
    }
    if data.is_empty() {
        return Err(LqfError::EmptyDataset);
    }
    if !w0.matches(spec) {
        return Err(LqfError::contract("initial weights do not match network"));
    }
    if data.classes > spec.output_dim || data.dim != spec.input_dim {
        return Err(LqfError::contract("dataset does not fit network input/output"));
    }
    let eval = Evaluator::new(spec)?;
    let d = w0.dim();
    let mut w = w0.values.as_slice().to_vec();
    let mut velocity = vec![0.0; d];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (loss0, err0) = nonlinear_epoch_stats(&eval, &w, data, config)?;
    let initial = loss0.max(f64::MIN_POSITIVE);
    let mut records = vec![NonlinearRecord { epoch: 0, loss: loss0, train_error: err0 }];
    let mut streak = 0;
    let mut grad = vec![0.0; d];
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            {
                let net = eval.bind(&w);
                for &i in chunk {
                    let trace = net.trace(data.input(i))?;
                    let (_, cot) = output_loss(trace.output(), data.label(i), config.loss);
                    net.backward(&trace, &cot, &mut grad, |_, _| {})?;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for k in 0..d {
                let g = grad[k] * scale + config.weight_decay * w[k];
                velocity[k] = config.momentum * velocity[k] - config.eta * g;
                w[k] += velocity[k];
            }
        }
        let (loss, train_error) = nonlinear_epoch_stats(&eval, &w, data, config)?;
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            return Err(LqfError::Divergence { step: epoch, loss });
        }
        records.push(NonlinearRecord { epoch, loss, train_error });
        if let Some((threshold, patience)) = config.stop {
            streak = if train_error < threshold { streak + 1 } else { 0 };
            if streak >= patience {
                break;
            }
        }
    }
    let params = ParamVector::new(DVector::from_vec(w), w0.layout.clone())?;
    Ok(NonlinearRun { records, params })
}
