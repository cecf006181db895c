//! Builds models, datasets and solver settings from a [`Config`].

use std::path::PathBuf;

use lqf::data::{load_csv, LabeledDataset};
use lqf::kfac::{DampingMode, KfacConfig};
use lqf::net::{NetworkSpec, ParamVector, TangentModel};
use lqf::quadratic::{assemble, LinearizedProblem, DEFAULT_ALPHA};
use lqf::trainer::{NonlinearLoss, OptimizerConfig, PreconditionerKind, Schedule, StopRule};
use lqf::{LqfError, Result};

use crate::config::Config;
use crate::experiments::{KshotSizes, NlftGrid, TaskInstance, TransferTask};

pub fn transfer_task(cfg: &Config) -> Result<TransferTask> {
    let d = TransferTask::default();
    Ok(TransferTask {
        source_classes: cfg.get("data.source_classes", d.source_classes)?,
        classes: cfg.get("data.classes", d.classes)?,
        dim: cfg.get("data.dim", d.dim)?,
        separation: cfg.real("data.separation", d.separation)?,
        shift: cfg.real("data.shift", d.shift)?,
        hidden: cfg.list("net.hidden", "16")?,
        slope: cfg.real("net.slope", d.slope)?,
        pretrain_epochs: cfg.get("pretrain.epochs", d.pretrain_epochs)?,
        pretrain_per_class: cfg.get("pretrain.per_class", d.pretrain_per_class)?,
    })
}

/// Weight decay used when `problem.lambda` is not set.
pub const DEFAULT_LAMBDA: f64 = 1.0;

pub struct ProblemSettings {
    pub alpha: f64,
    pub lambda: f64,
}

pub fn problem_settings(cfg: &Config) -> Result<ProblemSettings> {
    Ok(ProblemSettings {
        alpha: cfg.real("problem.alpha", DEFAULT_ALPHA)?,
        lambda: cfg.real("problem.lambda", DEFAULT_LAMBDA)?,
    })
}

/// A linearized model with its training, validation and test data.
pub struct Workbench {
    pub model: TangentModel,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub alpha: f64,
    pub lambda: f64,
}

impl Workbench {
    pub fn problem(&self) -> Result<LinearizedProblem> {
        assemble(&self.model, &self.train, self.alpha, self.lambda)
    }

    pub fn val_problem(&self) -> Result<LinearizedProblem> {
        assemble(&self.model, &self.val, self.alpha, self.lambda)
    }

    pub fn test_problem(&self) -> Result<LinearizedProblem> {
        assemble(&self.model, &self.test, self.alpha, self.lambda)
    }
}

fn load(path: &str) -> Result<LabeledDataset> {
    load_csv(&PathBuf::from(path))
}

/// Files when given (`data.train`, `data.val`, `data.test`, `net.spec`,
/// `net.weights`), otherwise a seeded synthetic transfer task.
pub fn workbench(cfg: &Config, seed: u64) -> Result<Workbench> {
    let settings = problem_settings(cfg)?;
    let files = (cfg.optional("data.train"), cfg.optional("data.val"), cfg.optional("data.test"));
    let spec_path = cfg.optional("net.spec");
    let weights_path = cfg.optional("net.weights");
    let per_class = cfg.get("data.per_class", 30usize)?;
    let val_per_class = cfg.get("data.val_per_class", 20usize)?;
    let test_per_class = cfg.get("data.test_per_class", 50usize)?;

    let (model, train, val, test) = match (files, spec_path) {
        ((Some(train), val, test), Some(spec_path)) => {
            let spec = NetworkSpec::load(&PathBuf::from(spec_path))?;
            let w0 = match weights_path {
                Some(p) => ParamVector::load(&PathBuf::from(p))?,
                None => ParamVector::init(&spec, seed),
            };
            let train = load(&train)?;
            let test = match test {
                Some(p) => load(&p)?,
                None => train.clone(),
            };
            let val = match val {
                Some(p) => load(&p)?,
                None => test.clone(),
            };
            (TangentModel::new(spec, w0)?, train, val, test)
        }
        ((None, None, None), None) => {
            if weights_path.is_some() {
                return Err(LqfError::contract("`net.weights` needs `net.spec` and `data.train`"));
            }
            let instance: TaskInstance = transfer_task(cfg)?.build(seed)?;
            let train = instance.sample(per_class, 0, "train")?;
            let val = instance.sample(val_per_class, 1, "val")?;
            let test = instance.sample(test_per_class, 2, "test")?;
            (instance.model()?, train, val, test)
        }
        _ => return Err(LqfError::contract("file inputs need both `data.train` and `net.spec`")),
    };
    Ok(Workbench { model, train, val, test, alpha: settings.alpha, lambda: settings.lambda })
}

pub fn kfac_config(cfg: &Config) -> Result<KfacConfig> {
    let damping = cfg.string("kfac.damping", "auto");
    let damping = if damping == "auto" {
        None
    } else {
        let v: f64 = damping
            .parse()
            .map_err(|_| LqfError::contract(format!("config key `kfac.damping`: cannot parse `{damping}`")))?;
        Some(v)
    };
    let mode = match cfg.choice("kfac.mode", "factored", &["factored", "eigen"])?.as_str() {
        "eigen" => DampingMode::Eigen,
        _ => DampingMode::Factored,
    };
    Ok(KfacConfig { damping, mode })
}

/// Defaults differ from the library's: heavy-ball momentum 0.9 and a longer
/// epoch budget, as used for fine-tuning runs.
pub fn optimizer_config(cfg: &Config, seed: u64) -> Result<OptimizerConfig> {
    let d = OptimizerConfig::default();
    let preconditioner = match cfg
        .choice("trainer.preconditioner", "kfac", &["kfac", "none", "exact-inverse", "adam"])?
        .as_str()
    {
        "none" => PreconditionerKind::None,
        "exact-inverse" => PreconditionerKind::ExactInverse,
        "adam" => PreconditionerKind::Adam {
            beta1: cfg.real("adam.beta1", 0.9)?,
            beta2: cfg.real("adam.beta2", 0.999)?,
            eps: cfg.real("adam.eps", 1e-8)?,
        },
        _ => PreconditionerKind::Kfac { damping: None },
    };
    let batch = cfg.string("trainer.batch_size", "full");
    let batch_size = if batch == "full" {
        None
    } else {
        Some(
            batch
                .parse()
                .map_err(|_| LqfError::contract(format!("config key `trainer.batch_size`: cannot parse `{batch}`")))?,
        )
    };
    let schedule = match cfg.choice("trainer.schedule", "constant", &["constant", "decay"])?.as_str() {
        "decay" => Schedule::Decay { horizon: cfg.real("trainer.decay_horizon", 100.0)? },
        _ => Schedule::Constant,
    };
    Ok(OptimizerConfig {
        eta: cfg.real("trainer.eta", d.eta)?,
        momentum: cfg.real("trainer.momentum", 0.9)?,
        batch_size,
        preconditioner,
        max_epochs: cfg.get("trainer.max_epochs", 20_000usize)?,
        stop_tolerance: cfg.real("trainer.stop_tolerance", d.stop_tolerance)?,
        stop: StopRule::GradientNorm,
        schedule,
        seed,
        wall_clock: cfg.get("metrics.wall_clock", false)?,
    })
}

pub fn nlft_grid(cfg: &Config) -> Result<NlftGrid> {
    let d = NlftGrid::default();
    let loss = match cfg.choice("nlft.loss", "ce", &["ce", "mse"])?.as_str() {
        "mse" => NonlinearLoss::Mse { alpha: cfg.real("problem.alpha", DEFAULT_ALPHA)? },
        _ => NonlinearLoss::CrossEntropy,
    };
    Ok(NlftGrid {
        etas: cfg.list("nlft.etas", "0.01,0.001")?,
        weight_decays: cfg.list("nlft.weight_decays", "1e-4,1e-5")?,
        epochs: cfg.get("nlft.epochs", d.epochs)?,
        batch_size: cfg.get("nlft.batch_size", d.batch_size)?,
        momentum: cfg.real("nlft.momentum", d.momentum)?,
        loss,
    })
}

pub fn kshot_sizes(cfg: &Config) -> Result<KshotSizes> {
    let d = KshotSizes::default();
    Ok(KshotSizes {
        pool_per_class: cfg.get("kshot.pool_per_class", d.pool_per_class)?,
        val_per_class: cfg.get("data.val_per_class", d.val_per_class)?,
        test_per_class: cfg.get("data.test_per_class", d.test_per_class)?,
    })
}
