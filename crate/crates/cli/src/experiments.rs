//! Desk-scale comparison experiments: transfer tasks, k-shot, online
//! learning and summarization.

use lqf::data::{gen_pretrained_base, kshot_subsample, BlobTask, LabeledDataset};
use lqf::influence::{summarize_with_scores, DropMode, Influence, InverseProvider};
use lqf::kfac::{estimate, KfacConfig};
use lqf::net::{NetworkSpec, ParamVector, TangentModel};
use lqf::quadratic::{assemble, LinearizedProblem};
use lqf::trainer::{evaluate_nonlinear, train_from, train_nonlinear, NonlinearConfig, NonlinearLoss, OptimizerConfig, TrainOptions};
use lqf::{LqfError, Result};

/// A source task for pre-training and a target task for fine-tuning.
///
/// The target keeps the first `classes` source clusters, moved by `shift`,
/// under new labels, so the pre-trained head is replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferTask {
    pub source_classes: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub shift: f64,
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub pretrain_epochs: usize,
    pub pretrain_per_class: usize,
}

impl Default for TransferTask {
    fn default() -> Self {
        TransferTask {
            source_classes: 6,
            classes: 3,
            dim: 8,
            separation: 3.0,
            shift: 1.0,
            hidden: vec![16],
            slope: 0.01,
            pretrain_epochs: 30,
            pretrain_per_class: 50,
        }
    }
}

/// A pre-trained network and the target task it is fine-tuned on.
pub struct TaskInstance {
    pub spec: NetworkSpec,
    pub w0: ParamVector,
    pub target: BlobTask,
    pub seed: u64,
}

impl TaskInstance {
    pub fn model(&self) -> Result<TangentModel> {
        TangentModel::new(self.spec.clone(), self.w0.clone())
    }

    /// Seeded sample from the target task; `stream` separates independent draws.
    pub fn sample(&self, per_class: usize, stream: u64, name: &str) -> Result<LabeledDataset> {
        self.target.sample(per_class, mix(self.seed, stream), name)
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

impl TransferTask {
    pub fn build(&self, seed: u64) -> Result<TaskInstance> {
        if self.classes > self.source_classes {
            return Err(LqfError::contract(format!(
                "target has {} classes but the source only {}",
                self.classes, self.source_classes
            )));
        }
        let spec = NetworkSpec::mlp(self.dim, &self.hidden, self.classes, self.slope)?;
        let source = BlobTask::new(self.source_classes, self.dim, self.separation);
        let target = BlobTask { means: source.means[..self.classes].to_vec() }.shifted(self.shift, mix(seed, 1));
        let pretrain = source.sample(self.pretrain_per_class, mix(seed, 2), "source")?;
        let w0 = gen_pretrained_base(&spec, &pretrain, self.pretrain_epochs, mix(seed, 3))?;
        Ok(TaskInstance { spec, w0, target, seed })
    }
}

/// Grid for the nonlinear fine-tuning reference.
#[derive(Debug, Clone, PartialEq)]
pub struct NlftGrid {
    pub etas: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub loss: NonlinearLoss,
}

impl Default for NlftGrid {
    fn default() -> Self {
        NlftGrid {
            etas: vec![0.01, 0.001],
            weight_decays: vec![1e-4, 1e-5],
            epochs: 100,
            batch_size: 16,
            momentum: 0.9,
            loss: NonlinearLoss::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub eta: f64,
    pub weight_decay: f64,
    pub val_error: f64,
    pub test_error: f64,
    pub params: ParamVector,
}

/// Trains every grid cell and keeps the one with the lowest validation error
/// (first cell on ties).
pub fn nlft_grid(
    spec: &NetworkSpec,
    w0: &ParamVector,
    train: &LabeledDataset,
    val: &LabeledDataset,
    test: &LabeledDataset,
    grid: &NlftGrid,
    seed: u64,
) -> Result<GridResult> {
    let mut best: Option<GridResult> = None;
    for &eta in &grid.etas {
        for &weight_decay in &grid.weight_decays {
            let config = NonlinearConfig {
                eta,
                momentum: grid.momentum,
                weight_decay,
                batch_size: grid.batch_size.min(train.len()),
                epochs: grid.epochs,
                loss: grid.loss,
                stop: None,
                seed,
            };
            let params = train_nonlinear(spec, w0, train, &config)?.params;
            let val_error = evaluate_nonlinear(spec, &params, val)?;
            if best.as_ref().is_none_or(|b| val_error < b.val_error) {
                let test_error = evaluate_nonlinear(spec, &params, test)?;
                best = Some(GridResult { eta, weight_decay, val_error, test_error, params });
            }
        }
    }
    best.ok_or_else(|| LqfError::contract("empty fine-tuning grid"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KshotTrial {
    pub k: usize,
    pub seed: u64,
    pub lqf_error: f64,
    pub lqf_lambda: f64,
    pub nlft_error: f64,
    pub nlft_eta: f64,
    pub nlft_weight_decay: f64,
}

/// Sizes of the held-out sets used by the k-shot comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KshotSizes {
    pub pool_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for KshotSizes {
    fn default() -> Self {
        KshotSizes { pool_per_class: 20, val_per_class: 20, test_per_class: 100 }
    }
}

/// LQF (closed form) against the best nonlinear grid cell on `k` samples per
/// class. Both pick their regularization on the same validation set.
pub fn kshot_trial(
    instance: &TaskInstance,
    k: usize,
    sizes: KshotSizes,
    alpha: f64,
    lambdas: &[f64],
    grid: &NlftGrid,
) -> Result<KshotTrial> {
    let pool = instance.sample(sizes.pool_per_class, 10, "pool")?;
    let val = instance.sample(sizes.val_per_class, 11, "val")?;
    let test = instance.sample(sizes.test_per_class, 12, "test")?;
    let train = kshot_subsample(&pool, k, mix(instance.seed, 13 + k as u64))?;
    let model = instance.model()?;
    let (lqf_lambda, dw) = select_lambda(&model, &train, &val, alpha, lambdas)?;
    let lqf_error = assemble(&model, &test, alpha, lqf_lambda)?.error_rate(&dw)?;
    let nlft = nlft_grid(&instance.spec, &instance.w0, &train, &val, &test, grid, instance.seed)?;
    Ok(KshotTrial {
        k,
        seed: instance.seed,
        lqf_error,
        lqf_lambda,
        nlft_error: nlft.test_error,
        nlft_eta: nlft.eta,
        nlft_weight_decay: nlft.weight_decay,
    })
}

/// Closed-form solution at the λ with the lowest validation error (first on ties).
pub fn select_lambda(
    model: &TangentModel,
    train: &LabeledDataset,
    val: &LabeledDataset,
    alpha: f64,
    lambdas: &[f64],
) -> Result<(f64, nalgebra::DVector<f64>)> {
    let first = *lambdas.first().ok_or_else(|| LqfError::contract("empty lambda grid"))?;
    let problem = assemble(model, train, alpha, first)?;
    let val_problem = assemble(model, val, alpha, first)?;
    let mut best: Option<(f64, f64, nalgebra::DVector<f64>)> = None;
    for &lambda in lambdas {
        let dw = problem.with_lambda(lambda)?.closed_form()?;
        let err = val_problem.error_rate(&dw)?;
        if best.as_ref().is_none_or(|b| err < b.1) {
            best = Some((lambda, err, dw));
        }
    }
    let (lambda, _, dw) = best.expect("grid is non-empty");
    Ok((lambda, dw))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStep {
    pub step: usize,
    pub samples: usize,
    pub incremental_error: f64,
    /// Same trainer and stop rule, started from zero on the same data.
    pub retrained_error: f64,
    /// Closed-form minimizer on the same data.
    pub paragon_error: f64,
    pub epochs: usize,
    pub retrained_epochs: usize,
}

/// Incremental LQF over a growing dataset against retraining from scratch
/// and against the closed-form minimizer.
///
/// Step `t` trains on all data seen so far, starting from step `t−1`'s
/// weights, with a fresh curvature estimate for the grown dataset.
pub fn online_trial(
    instance: &TaskInstance,
    increments: usize,
    per_increment: usize,
    test_per_class: usize,
    alpha: f64,
    lambda: f64,
    trainer: &OptimizerConfig,
    kfac: KfacConfig,
) -> Result<Vec<OnlineStep>> {
    let stream = instance.sample(per_increment * increments, 20, "stream")?;
    let test = instance.sample(test_per_class, 21, "test")?;
    let model = instance.model()?;
    let test_problem = assemble(&model, &test, alpha, lambda)?;
    let c = stream.classes;
    let mut dw = nalgebra::DVector::zeros(model.dim());
    let mut steps = Vec::with_capacity(increments);
    for t in 1..=increments {
        let seen = stream.prefix(t * per_increment * c)?;
        let problem = assemble(&model, &seen, alpha, lambda)?;
        let uses_kfac = matches!(trainer.preconditioner, lqf::trainer::PreconditionerKind::Kfac { .. });
        let state = if uses_kfac { Some(estimate(&model, &seen, kfac)?) } else { None };
        let config = OptimizerConfig { batch_size: trainer.batch_size.map(|b| b.min(seen.len())), ..trainer.clone() };
        let traj = train_from(&problem, &config, state.as_ref(), TrainOptions { start: Some(&dw), reference: None })?;
        dw = traj.final_dw;
        let retrained = train_from(&problem, &config, state.as_ref(), TrainOptions::default())?;
        let paragon = problem.closed_form()?;
        steps.push(OnlineStep {
            step: t,
            samples: seen.len(),
            incremental_error: test_problem.error_rate(&dw)?,
            retrained_error: test_problem.error_rate(&retrained.final_dw)?,
            paragon_error: test_problem.error_rate(&paragon)?,
            epochs: traj.records.len() - 1,
            retrained_epochs: retrained.records.len() - 1,
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummarizationTrial {
    pub seed: u64,
    pub k: usize,
    pub full_error: f64,
    pub drop_top_error: f64,
    pub drop_bottom_error: f64,
}

/// Drops the `k` highest and lowest F-SI samples and re-solves.
pub fn summarization_trial(
    problem: &LinearizedProblem,
    validation: &LinearizedProblem,
    test: &LinearizedProblem,
    k: usize,
    seed: u64,
) -> Result<SummarizationTrial> {
    let wstar = problem.closed_form()?;
    let scores = Influence::new(problem, &wstar, InverseProvider::Exact)?.fsi_scores(validation)?;
    let top = summarize_with_scores(problem, &scores, test, k, DropMode::DropTop)?;
    let bottom = summarize_with_scores(problem, &scores, test, k, DropMode::DropBottom)?;
    Ok(SummarizationTrial {
        seed,
        k,
        full_error: test.error_rate(&wstar)?,
        drop_top_error: top.test_error,
        drop_bottom_error: bottom.test_error,
    })
}

/// Mean and normal-approximation 95% half-width.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}
