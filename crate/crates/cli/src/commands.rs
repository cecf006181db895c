//! The `lqf` subcommands. Each resolves its whole configuration, writes the
//! snapshot, then runs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use lqf::influence::{brute_force_report, spearman, summarize_with_scores, DropMode, Influence, InverseProvider};
use lqf::kfac::{estimate, KfacState};
use lqf::lambda::{cold_path, lambda_gradient, validation_loss, warm_start_path, GradientMode};
use lqf::linalg::{relative_error, spectral_map, sym_eigen_desc, symmetrize};
use lqf::net::ParamVector;
use lqf::quadratic::spectrum;
use lqf::trainer::{
    effective_learning_rate, max_stable_lr, train_from, PreconditionerKind, StopRule, TrainOptions,
};
use lqf::verify::run_suite;
use lqf::{LqfError, Result};

use crate::config::Config;
use crate::experiments::{kshot_trial, mean_ci, online_trial};
use crate::output::{csv_table, real, Output};
use crate::setup::{kfac_config, kshot_sizes, nlft_grid, optimizer_config, problem_settings, transfer_task, workbench, Workbench};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Solve,
    Spectrum,
    Influence,
    Fsi,
    Summarize,
    LambdaPath,
    Kshot,
    Online,
    Verify,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Train,
        Command::Solve,
        Command::Spectrum,
        Command::Influence,
        Command::Fsi,
        Command::Summarize,
        Command::LambdaPath,
        Command::Kshot,
        Command::Online,
        Command::Verify,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Solve => "solve",
            Command::Spectrum => "spectrum",
            Command::Influence => "influence",
            Command::Fsi => "fsi",
            Command::Summarize => "summarize",
            Command::LambdaPath => "lambda-path",
            Command::Kshot => "kshot",
            Command::Online => "online",
            Command::Verify => "verify",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Result of a run that completed without error. `failures` counts failed
/// checks for commands that verify something.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Outcome {
    pub failures: usize,
}

pub fn execute(command: Command, cfg: &Config, out: &Path) -> Result<Outcome> {
    let seed = cfg.get("seed", 0u64)?;
    match command {
        Command::Train => train(cfg, seed, out),
        Command::Solve => solve(cfg, seed, out),
        Command::Spectrum => spectrum_cmd(cfg, seed, out),
        Command::Influence => influence(cfg, seed, out),
        Command::Fsi => fsi(cfg, seed, out),
        Command::Summarize => summarize(cfg, seed, out),
        Command::LambdaPath => lambda_path(cfg, seed, out),
        Command::Kshot => kshot(cfg, seed, out),
        Command::Online => online(cfg, seed, out),
        Command::Verify => verify(cfg, seed, out),
    }
}

fn begin(cfg: &Config, command: Command, out: &Path) -> Result<Output> {
    cfg.check_unused()?;
    Output::create(out, cfg, command.name())
}

fn solution(wb: &Workbench, dw: &DVector<f64>) -> Result<ParamVector> {
    ParamVector::new(dw.clone(), wb.model.w0().layout.clone())
}

fn errors(wb: &Workbench, dw: &DVector<f64>) -> Result<(f64, f64, f64)> {
    Ok((
        wb.problem()?.error_rate(dw)?,
        wb.val_problem()?.error_rate(dw)?,
        wb.test_problem()?.error_rate(dw)?,
    ))
}

fn train(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let wb = workbench(cfg, seed)?;
    let kcfg = kfac_config(cfg)?;
    let opt = optimizer_config(cfg, seed)?;
    let mut out = begin(cfg, Command::Train, out)?;

    let problem = wb.problem()?;
    let wstar = problem.closed_form()?;
    let state = match opt.preconditioner {
        PreconditionerKind::Kfac { .. } => Some(estimate(&wb.model, &wb.train, kcfg)?),
        _ => None,
    };
    let traj = train_from(&problem, &opt, state.as_ref(), TrainOptions { start: None, reference: Some(&wstar) })?;
    for r in &traj.records {
        out.metric("step", serde_json::to_value(r).map_err(|e| LqfError::Format(e.to_string()))?)?;
    }
    let rows = traj.records.iter().map(|r| {
        vec![
            r.step.to_string(),
            r.epoch.to_string(),
            real(r.loss),
            real(r.grad_norm),
            r.dist_to_opt.map(real).unwrap_or_default(),
        ]
    });
    out.write("trajectory.csv", csv_table(&["step", "epoch", "loss", "grad_norm", "dist_to_opt"], rows)?)?;

    let optimum = problem.loss(&wstar);
    let final_loss = traj.final_loss();
    let (train_error, val_error, test_error) = errors(&wb, &traj.final_dw)?;
    let batch = opt.batch_size.unwrap_or(problem.samples());
    out.metric(
        "summary",
        json!({
            "samples": problem.samples(),
            "dim": problem.dim(),
            "steps": traj.steps,
            "epochs": traj.records.len() - 1,
            "stop_reason": traj.stop_reason,
            "final_loss": final_loss,
            "closed_form_loss": optimum,
            "relative_gap": (final_loss - optimum) / optimum.abs().max(f64::MIN_POSITIVE),
            "kfac_damping": state.as_ref().map(KfacState::damping),
            "effective_learning_rate": effective_learning_rate(opt.eta, opt.momentum, batch),
            "train_error": train_error,
            "val_error": val_error,
            "test_error": test_error,
        }),
    )?;
    solution(&wb, &traj.final_dw)?.save(&out.path("solution.lqfw"))?;
    if let Some(state) = &state {
        state.save(&out.path("kfac.lqfk"))?;
    }
    out.finish()?;
    Ok(Outcome::default())
}

fn solve(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let wb = workbench(cfg, seed)?;
    let mut out = begin(cfg, Command::Solve, out)?;
    let problem = wb.problem()?;
    let dw = problem.closed_form()?;
    let (train_error, val_error, test_error) = errors(&wb, &dw)?;
    out.metric(
        "summary",
        json!({
            "samples": problem.samples(),
            "dim": problem.dim(),
            "loss": problem.loss(&dw),
            "gradient_norm": problem.gradient(&dw).norm(),
            "weight_norm": dw.norm(),
            "train_error": train_error,
            "val_error": val_error,
            "test_error": test_error,
        }),
    )?;
    problem.save(&out.path("problem.lqfp"))?;
    solution(&wb, &dw)?.save(&out.path("solution.lqfw"))?;
    out.finish()?;
    Ok(Outcome::default())
}

/// `A^{1/2} H A^{1/2}` eigenvalues, descending.
fn preconditioned_eigenvalues(h: &DMatrix<f64>, a: &DMatrix<f64>) -> DVector<f64> {
    let mut a = a.clone();
    symmetrize(&mut a);
    let (values, vectors) = sym_eigen_desc(&a);
    let root = spectral_map(&values, &vectors, |v| v.max(0.0).sqrt());
    let mut m = &root * h * &root;
    symmetrize(&mut m);
    sym_eigen_desc(&m).0
}

fn spectrum_cmd(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let wb = workbench(cfg, seed)?;
    let kcfg = kfac_config(cfg)?;
    let mut out = begin(cfg, Command::Spectrum, out)?;
    let problem = wb.problem()?;
    let h = problem.exact_hessian()?;
    let plain = spectrum(&h)?;
    let state = estimate(&wb.model, &wb.train, kcfg)?;
    let damped = state.with_damping(state.damping() + problem.lambda())?;
    let kinv = damped.inverse_matrix()?;
    let pre = preconditioned_eigenvalues(&h, &kinv);
    let pre_kappa = pre[0] / pre[pre.len() - 1];
    let identity = DMatrix::identity(h.nrows(), h.ncols());
    let rows = (0..plain.eigenvalues.len()).map(|i| vec![i.to_string(), real(plain.eigenvalues[i]), real(pre[i])]);
    out.write("spectrum.csv", csv_table(&["index", "hessian", "kfac_preconditioned"], rows)?)?;
    out.metric(
        "summary",
        json!({
            "dim": problem.dim(),
            "lambda_max": plain.eigenvalues[0],
            "lambda_min": plain.eigenvalues[plain.eigenvalues.len() - 1],
            "condition_number": plain.condition_number,
            "kfac_condition_number": pre_kappa,
            "kfac_damping": state.damping(),
            "kfac_approximation_error": state.approximation_error(&problem)?,
            "max_stable_lr_identity": max_stable_lr(&h, &identity)?,
            "max_stable_lr_kfac": max_stable_lr(&h, &kinv)?,
        }),
    )?;
    out.finish()?;
    Ok(Outcome::default())
}

fn influence(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let wb = workbench(cfg, seed)?;
    let kcfg = kfac_config(cfg)?;
    let brute = cfg.get("influence.brute_force", false)?;
    let mut out = begin(cfg, Command::Influence, out)?;
    let problem = wb.problem()?;
    let val = wb.val_problem()?;
    let wstar = problem.closed_form()?;
    let exact = Influence::new(&problem, &wstar, InverseProvider::Exact)?.report(&val)?;
    let state = estimate(&wb.model, &wb.train, kcfg)?;
    let approx = Influence::new(&problem, &wstar, InverseProvider::Kfac(&state))?.report(&val)?;
    out.write("influence.csv", exact.to_csv()?)?;
    out.write("influence_kfac.csv", approx.to_csv()?)?;

    let mut deltas = Vec::new();
    for row in &exact.rows {
        for (v, d) in row.activation_deltas.iter().enumerate() {
            for (c, x) in d.iter().enumerate() {
                deltas.push(vec![row.sample_id.to_string(), v.to_string(), c.to_string(), real(*x)]);
            }
        }
    }
    out.write("activation_deltas.csv", csv_table(&["sample_id", "val_id", "class", "delta"], deltas)?)?;

    for (e, k) in exact.rows.iter().zip(&approx.rows) {
        out.metric(
            "sample",
            json!({
                "sample_id": e.sample_id,
                "label": problem.labels().map(|l| l[e.sample_id]),
                "fsi": e.fsi,
                "fsi_kfac": k.fsi,
                "weight_delta_norm": e.weight_delta_norm,
                "weight_delta_norm_kfac": k.weight_delta_norm,
            }),
        )?;
    }
    let mut summary = json!({
        "samples": problem.samples(),
        "validation_samples": val.samples(),
        "spearman_exact_vs_kfac": spearman(&exact.scores(), &approx.scores())?,
    });
    if brute {
        let reference = brute_force_report(&problem, &wstar, &val)?;
        out.write("influence_brute_force.csv", reference.to_csv()?)?;
        let worst = exact
            .rows
            .iter()
            .zip(&reference.rows)
            .map(|(a, b)| {
                let a = DVector::from_iterator(a.activation_deltas.len() * problem.classes(), a.activation_deltas.iter().flatten().copied());
                let b = DVector::from_iterator(b.activation_deltas.len() * problem.classes(), b.activation_deltas.iter().flatten().copied());
                relative_error(&a, &b)
            })
            .fold(0.0f64, f64::max);
        summary["max_relative_error_vs_brute_force"] = json!(worst);
    }
    out.metric("summary", summary)?;
    out.finish()?;
    Ok(Outcome::default())
}

fn fsi(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let wb = workbench(cfg, seed)?;
    let kcfg = kfac_config(cfg)?;
    let method = cfg.choice("influence.method", "exact", &["exact", "kfac"])?;
    let mut out = begin(cfg, Command::Fsi, out)?;
    let problem = wb.problem()?;
    let val = wb.val_problem()?;
    let wstar = problem.closed_form()?;
    let state;
    let provider = if method == "kfac" {
        state = estimate(&wb.model, &wb.train, kcfg)?;
        InverseProvider::Kfac(&state)
    } else {
        InverseProvider::Exact
    };
    let scores = Influence::new(&problem, &wstar, provider)?.fsi_scores(&val)?;
    let order = lqf::influence::rank_descending(&scores);
    let mut rank = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let labels = wb.train.labels();
    let rows = (0..scores.len()).map(|i| vec![i.to_string(), labels[i].to_string(), real(scores[i]), rank[i].to_string()]);
    out.write("fsi.csv", csv_table(&["sample_id", "label", "fsi", "rank"], rows)?)?;
    for (i, s) in scores.iter().enumerate() {
        out.metric("sample", json!({ "sample_id": i, "fsi": s, "rank": rank[i] }))?;
    }
    let total: f64 = scores.iter().sum();
    out.metric("summary", json!({ "method": method, "samples": scores.len(), "total_fsi": total }))?;
    out.finish()?;
    Ok(Outcome::default())
}

fn summarize(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let ks: Vec<usize> = cfg.list("summarize.k", "0,5,10,20")?;
    let seeds = cfg.get("summarize.seeds", 1u64)?;
    let benches: Vec<Workbench> = (0..seeds).map(|s| workbench(cfg, seed + s)).collect::<Result<_>>()?;
    let mut out = begin(cfg, Command::Summarize, out)?;
    let mut rows = Vec::new();
    for (s, wb) in benches.iter().enumerate() {
        let run_seed = seed + s as u64;
        let problem = wb.problem()?;
        let val = wb.val_problem()?;
        let test = wb.test_problem()?;
        let wstar = problem.closed_form()?;
        let scores = Influence::new(&problem, &wstar, InverseProvider::Exact)?.fsi_scores(&val)?;
        for &k in &ks {
            for mode in [DropMode::DropTop, DropMode::DropBottom] {
                let summary = summarize_with_scores(&problem, &scores, &test, k, mode)?;
                out.metric(
                    "drop",
                    json!({ "seed": run_seed, "k": k, "mode": mode.as_str(), "test_error": summary.test_error }),
                )?;
                rows.push(vec![run_seed.to_string(), k.to_string(), mode.as_str().to_string(), real(summary.test_error)]);
            }
        }
    }
    out.write("summarize.csv", csv_table(&["seed", "k", "mode", "test_error"], rows)?)?;
    out.finish()?;
    Ok(Outcome::default())
}

fn lambda_path(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let wb = workbench(cfg, seed)?;
    let kcfg = kfac_config(cfg)?;
    let opt = optimizer_config(cfg, seed)?;
    let lambdas: Vec<f64> = cfg.list("lambda.values", "1e-1,3e-2,1e-2,3e-3,1e-3,3e-4,1e-4")?;
    let descent_steps = cfg.get("lambda.descent_steps", 0usize)?;
    let descent_rate = cfg.real("lambda.descent_rate", 0.5)?;
    let descent_start = cfg.real("lambda.descent_start", 1e-1)?;
    let mut out = begin(cfg, Command::LambdaPath, out)?;
    if lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(LqfError::contract("config key `lambda.values`: every value must be > 0"));
    }
    let problem = wb.problem()?;
    let val = wb.val_problem()?;
    let state = match opt.preconditioner {
        PreconditionerKind::Kfac { .. } => Some(estimate(&wb.model, &wb.train, kcfg)?),
        _ => None,
    };
    let warm = warm_start_path(&problem, Some(&val), &lambdas, &opt, state.as_ref())?;
    let cold = cold_path(&problem, Some(&val), &lambdas, &opt, state.as_ref())?;
    out.write("lambda_warm.csv", warm.to_csv()?)?;
    out.write("lambda_cold.csv", cold.to_csv()?)?;
    for (w, c) in warm.points.iter().zip(&cold.points) {
        let at = problem.with_lambda(w.lambda)?;
        let exact = at.closed_form()?;
        let mode = match &state {
            Some(s) => GradientMode::Kfac(s),
            None => GradientMode::Exact,
        };
        out.metric(
            "lambda",
            json!({
                "lambda": w.lambda,
                "warm_train_loss": w.train_loss,
                "cold_train_loss": c.train_loss,
                "closed_form_train_loss": at.loss(&exact),
                "val_loss": validation_loss(&val, &exact),
                "warm_iterations": w.iterations,
                "cold_iterations": c.iterations,
                "val_gradient": lambda_gradient(&at, &val, GradientMode::Exact)?,
                "val_gradient_approx": lambda_gradient(&at, &val, mode)?,
            }),
        )?;
    }
    out.metric(
        "summary",
        json!({ "warm_iterations": warm.total_iterations(), "cold_iterations": cold.total_iterations() }),
    )?;

    // Gradient descent on log λ.
    let mut lambda = descent_start;
    for step in 0..descent_steps {
        let at = problem.with_lambda(lambda)?;
        let grad = lambda_gradient(&at, &val, GradientMode::Exact)?;
        let loss = validation_loss(&val, &at.closed_form()?);
        out.metric("descent", json!({ "step": step, "lambda": lambda, "val_loss": loss, "val_gradient": grad }))?;
        lambda *= (-descent_rate * lambda * grad).exp();
    }
    out.finish()?;
    Ok(Outcome::default())
}

/// LQF weight-decay grid for the k-shot comparison.
pub const KSHOT_LAMBDAS: &str = "0.1,1,10";

fn kshot(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let task = transfer_task(cfg)?;
    let alpha = problem_settings(cfg)?.alpha;
    let lambdas: Vec<f64> = cfg.list("kshot.lambdas", KSHOT_LAMBDAS)?;
    let grid = nlft_grid(cfg)?;
    let sizes = kshot_sizes(cfg)?;
    let ks: Vec<usize> = cfg.list("kshot.k", "1,2,5")?;
    let seeds = cfg.get("kshot.seeds", 3u64)?;
    let mut out = begin(cfg, Command::Kshot, out)?;
    let mut rows = Vec::new();
    let mut by_k: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); ks.len()];
    for s in 0..seeds {
        let instance = task.build(seed + s)?;
        for (j, &k) in ks.iter().enumerate() {
            let trial = kshot_trial(&instance, k, sizes, alpha, &lambdas, &grid)?;
            out.metric(
                "trial",
                json!({
                    "seed": trial.seed,
                    "k": k,
                    "lqf_error": trial.lqf_error,
                    "lqf_lambda": trial.lqf_lambda,
                    "nlft_error": trial.nlft_error,
                    "nlft_eta": trial.nlft_eta,
                    "nlft_weight_decay": trial.nlft_weight_decay,
                }),
            )?;
            rows.push(vec![
                trial.seed.to_string(),
                k.to_string(),
                real(trial.lqf_error),
                real(trial.lqf_lambda),
                real(trial.nlft_error),
                real(trial.nlft_eta),
                real(trial.nlft_weight_decay),
            ]);
            by_k[j].0.push(trial.lqf_error);
            by_k[j].1.push(trial.nlft_error);
        }
    }
    out.write("kshot.csv", csv_table(&["seed", "k", "lqf_error", "lqf_lambda", "nlft_error", "nlft_eta", "nlft_weight_decay"], rows)?)?;
    for (j, &k) in ks.iter().enumerate() {
        let (lqf, lqf_ci) = mean_ci(&by_k[j].0);
        let (nlft, nlft_ci) = mean_ci(&by_k[j].1);
        let diffs: Vec<f64> = by_k[j].0.iter().zip(&by_k[j].1).map(|(a, b)| a - b).collect();
        let (diff, diff_ci) = mean_ci(&diffs);
        out.metric(
            "summary",
            json!({
                "k": k,
                "seeds": seeds,
                "lqf_error": lqf,
                "lqf_ci95": lqf_ci,
                "nlft_error": nlft,
                "nlft_ci95": nlft_ci,
                "difference": diff,
                "difference_ci95": diff_ci,
            }),
        )?;
    }
    out.finish()?;
    Ok(Outcome::default())
}

fn online(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let task = transfer_task(cfg)?;
    let settings = problem_settings(cfg)?;
    let kcfg = kfac_config(cfg)?;
    let mut opt = optimizer_config(cfg, seed)?;
    opt.stop = StopRule::TrainError {
        threshold: cfg.real("online.stop_error", 0.005)?,
        patience: cfg.get("online.patience", 5usize)?,
    };
    let increments = cfg.get("online.increments", 5usize)?;
    let per_increment = cfg.get("online.per_increment", 4usize)?;
    let test_per_class = cfg.get("data.test_per_class", 50usize)?;
    let seeds = cfg.get("online.seeds", 1u64)?;
    let mut out = begin(cfg, Command::Online, out)?;
    let mut rows = Vec::new();
    for s in 0..seeds {
        let instance = task.build(seed + s)?;
        let steps = online_trial(&instance, increments, per_increment, test_per_class, settings.alpha, settings.lambda, &opt, kcfg)?;
        for st in steps {
            out.metric(
                "increment",
                json!({
                    "seed": seed + s,
                    "step": st.step,
                    "samples": st.samples,
                    "incremental_error": st.incremental_error,
                    "retrained_error": st.retrained_error,
                    "paragon_error": st.paragon_error,
                    "epochs": st.epochs,
                    "retrained_epochs": st.retrained_epochs,
                }),
            )?;
            rows.push(vec![
                (seed + s).to_string(),
                st.step.to_string(),
                st.samples.to_string(),
                real(st.incremental_error),
                real(st.retrained_error),
                real(st.paragon_error),
                st.epochs.to_string(),
                st.retrained_epochs.to_string(),
            ]);
        }
    }
    out.write("online.csv", csv_table(&["seed", "step", "samples", "incremental_error", "retrained_error", "paragon_error", "epochs", "retrained_epochs"], rows)?)?;
    out.finish()?;
    Ok(Outcome::default())
}

fn verify(cfg: &Config, seed: u64, out: &Path) -> Result<Outcome> {
    let mut out = begin(cfg, Command::Verify, out)?;
    let checks = run_suite(seed)?;
    let mut failures = 0;
    for c in &checks {
        if !c.passed {
            failures += 1;
        }
        out.metric("check", serde_json::to_value(c).map_err(|e| LqfError::Format(e.to_string()))?)?;
    }
    let rows = checks.iter().map(|c| vec![c.name.to_string(), real(c.value), real(c.tolerance), c.passed.to_string()]);
    out.write("checks.csv", csv_table(&["name", "value", "tolerance", "passed"], rows)?)?;
    out.metric("summary", json!({ "checks": checks.len(), "failures": failures }))?;
    out.finish()?;
    Ok(Outcome { failures })
}
