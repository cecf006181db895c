//! Acceptance criteria 1-9. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use lqf::data::LabeledDataset;
use lqf::influence::{activation_delta, brute_force_loo, loo_weights, Influence, InverseProvider};
use lqf::kfac::{estimate, KfacConfig};
use lqf::lambda::{cold_path, lambda_gradient, validation_loss_at, warm_start_path, GradientMode};
use lqf::net::{Layer, NetworkSpec, ParamVector, TangentModel};
use lqf::quadratic::{assemble, spectrum, LinearizedProblem, DEFAULT_ALPHA};
use lqf::trainer::{
    max_stable_lr, predicted_distance, train, OptimizerConfig, PreconditionerKind, StopRule,
};
use lqf::verify::{central_difference, random_model, random_problem, richardson_ratio};
use lqf::{LqfError, Result};
use lqf_cli::config::Config;
use lqf_cli::experiments::{kshot_trial, mean_ci, online_trial, summarization_trial, KshotSizes, NlftGrid, TransferTask};
use lqf_cli::setup::workbench;
use lqf_cli::commands::KSHOT_LAMBDAS;
use lqf_cli::Command;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Random leaky MLP problems with `N ≤ 200`, `D ≤ 500`, `C ≤ 5`.
fn random_mlp_problem(seed: u64, lambda: f64) -> Result<(TangentModel, LabeledDataset, LinearizedProblem)> {
    let input = 4 + (seed as usize % 7);
    let hidden = 8 + (seed as usize * 7) % 17;
    let classes = 2 + (seed as usize % 4);
    let per_class = 200 / classes - (seed as usize % 9);
    let (model, data) = random_model(input, &[hidden], classes, per_class, seed)?;
    let problem = assemble(&model, &data, DEFAULT_ALPHA, lambda)?;
    assert!(problem.samples() <= 200 && problem.dim() <= 500 && classes <= 5);
    Ok((model, data, problem))
}

fn closed_form_equivalence() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    for seed in 0..20 {
        let (model, data, problem) = random_mlp_problem(seed, 1e-3)?;
        let start = Instant::now();
        let state = estimate(&model, &data, KfacConfig::default())?;
        let cfg = OptimizerConfig {
            eta: 0.1,
            momentum: 0.9,
            max_epochs: 100_000,
            stop_tolerance: 1e-7,
            ..OptimizerConfig::default()
        };
        let traj = train(&problem, &cfg, Some(&state))?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let optimum = problem.loss(&problem.closed_form()?);
        worst = worst.max((traj.final_loss() - optimum) / optimum);
    }
    verdict(worst < 1e-6 && slowest < 10.0, format!("20 problems, worst relative gap {worst:.2e}, slowest {slowest:.2}s"))
}

fn dynamics_identity() -> Result<Verdict> {
    let (model, data, problem) = random_mlp_problem(3, 1e-2)?;
    let h = problem.exact_hessian()?;
    let wstar = problem.closed_form()?;
    let state = estimate(&model, &data, KfacConfig::default())?;
    let gamma = state.damping();
    let kinv = state.with_damping(gamma + problem.lambda())?.inverse_matrix()?;
    let hinv = lqf::linalg::spd_inverse(&h)?;
    let d = problem.dim();
    let top = spectrum(&h)?.eigenvalues[0];
    let cases: [(&str, PreconditionerKind, DMatrix<f64>, f64); 3] = [
        ("identity", PreconditionerKind::None, DMatrix::identity(d, d), 1.0 / top),
        // At η = 0.5, w_20 − w* shrinks to 1e-6·‖w*‖ and cancellation dominates.
        ("exact-inverse", PreconditionerKind::ExactInverse, hinv, 0.1),
        ("kfac", PreconditionerKind::Kfac { damping: Some(gamma) }, kinv, 0.1),
    ];
    let mut worst: f64 = 0.0;
    for (_, kind, a, eta) in &cases {
        for t in [1, 5, 20] {
            let cfg = OptimizerConfig { eta: *eta, preconditioner: *kind, max_epochs: t, stop_tolerance: 0.0, ..OptimizerConfig::default() };
            let kfac = matches!(kind, PreconditionerKind::Kfac { .. }).then_some(&state);
            let traj = train(&problem, &cfg, kfac)?;
            let predicted = predicted_distance(&h, a, *eta, t, &(-&wstar))?;
            worst = worst.max(rel(&(&traj.final_dw - &wstar), &predicted));
        }
    }
    let newton = OptimizerConfig { eta: 1.0, preconditioner: PreconditionerKind::ExactInverse, max_epochs: 1, stop_tolerance: 0.0, ..OptimizerConfig::default() };
    let one = rel(&train(&problem, &newton, None)?.final_dw, &wstar);
    verdict(
        worst < 1e-8 && one < 1e-8,
        format!("worst relative deviation {worst:.2e} over A in {{I, H^-1, K-FAC}} x t in {{1,5,20}}, Newton step {one:.2e}"),
    )
}

fn influence_exactness() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    for (c, n, d, lambda, seed) in [(1, 100, 50, 1e-2, 1), (3, 60, 40, 1e-3, 2), (3, 100, 50, 0.1, 3), (1, 80, 30, 0.0, 4)] {
        let p = random_problem(n, c, d, lambda, seed);
        let w = p.closed_form()?;
        let g_test = random_problem(10, c, d, lambda, seed + 100).jacobian().clone();
        for i in 0..n {
            let brute = brute_force_loo(&p, i)?;
            worst = worst.max(rel(&loo_weights(&p, &w, i, InverseProvider::Exact)?, &brute));
            let delta = activation_delta(&p, &w, i, &g_test, InverseProvider::Exact)?;
            worst = worst.max(rel(&delta, &(&g_test * (&w - &brute))));
        }
    }
    let p = random_problem(60, 1, 25, 1e-2, 9);
    let w = p.closed_form()?;
    let inf = Influence::new(&p, &w, InverseProvider::Exact)?;
    let g_test = random_problem(5, 1, 25, 1e-2, 10).jacobian().clone();
    let mut scalar: f64 = 0.0;
    for i in 0..p.samples() {
        let full = inf.activation_delta(i, &g_test)?;
        for t in 0..g_test.nrows() {
            let row = g_test.row(t).transpose();
            let s = inf.scalar_activation_delta(i, &row.as_view())?;
            scalar = scalar.max((s - full[t]).abs() / full[t].abs().max(1e-300));
        }
    }
    verdict(worst < 1e-6 && scalar < 1e-10, format!("worst brute-force deviation {worst:.2e}, scalar vs Woodbury {scalar:.2e}"))
}

fn tangent_fidelity() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    let (mut ok, mut counted, mut skipped) = (0usize, 0usize, 0usize);
    for seed in 0..6 {
        let (model, data) = random_model(5, &[8, 6], 3, 10, seed)?;
        for i in 0..data.len() {
            let x = data.input(i);
            let dw = DVector::from_fn(model.dim(), |k, _| ((k * 13 + i) as f64).sin() * 0.3);
            let dense = model.forward(x)? + model.jacobian(x)? * &dw;
            worst = worst.max(rel(&model.linear_forward(&dw, x)?, &dense));
            let v = DVector::from_fn(model.dim(), |k, _| (((k + 1) * (i + 2)) as f64 + seed as f64).cos()).normalize();
            match richardson_ratio(&model, x, &v, 1e-2)? {
                Some(r) => {
                    counted += 1;
                    if r >= 3.9 {
                        ok += 1;
                    }
                }
                None => skipped += 1,
            }
        }
    }
    let frac = ok as f64 / counted.max(1) as f64;
    verdict(
        worst < 1e-10 && frac >= 0.95 && counted >= 100,
        format!("linear_forward deviation {worst:.2e}; Richardson {ok}/{counted} ({:.1}%) with {skipped} kink pairs excluded", 100.0 * frac),
    )
}

fn lambda_gradient_check() -> Result<Verdict> {
    let (model, data, train_p) = random_mlp_problem(5, 1e-3)?;
    let (_, val_data) = random_model(model.spec().input_dim, &[1], model.classes(), 15, 77)?;
    let val = assemble(&model, &val_data, DEFAULT_ALPHA, 1e-3)?;
    let _ = data;
    let mut worst: f64 = 0.0;
    for lambda in [1e-1, 1e-3, 1e-5] {
        let p = train_p.with_lambda(lambda)?;
        let g = lambda_gradient(&p, &val, GradientMode::Exact)?;
        let fd = central_difference(|l| validation_loss_at(&train_p, &val, l).unwrap_or(f64::NAN), lambda, 1e-4 * lambda);
        worst = worst.max((g - fd).abs() / fd.abs());
    }
    let cfg = OptimizerConfig { eta: 1.0, preconditioner: PreconditionerKind::ExactInverse, max_epochs: 20, ..OptimizerConfig::default() };
    let lambdas = [1e-1, 1e-2, 1e-3];
    let warm = warm_start_path(&train_p, Some(&val), &lambdas, &cfg, None)?;
    let cold = cold_path(&train_p, Some(&val), &lambdas, &cfg, None)?;
    let mut path: f64 = 0.0;
    for (w, c) in warm.points.iter().zip(&cold.points) {
        let exact = train_p.with_lambda(w.lambda)?;
        let opt = exact.loss(&exact.closed_form()?);
        path = path.max((w.train_loss - opt).abs() / opt).max((w.train_loss - c.train_loss).abs() / c.train_loss);
    }
    verdict(worst < 1e-4 && path < 1e-6, format!("finite-difference deviation {worst:.2e}, warm-path endpoint deviation {path:.2e}"))
}

fn kfac_island() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let spec = NetworkSpec::new(4, 1, vec![Layer::dense(4, 1)])?;
        let model = TangentModel::new(spec.clone(), ParamVector::init(&spec, seed))?;
        let (_, blobs) = random_model(4, &[1], 2, 15, seed)?;
        let inputs: Vec<f64> = (0..blobs.len()).flat_map(|i| blobs.input(i).to_vec()).collect();
        let data = LabeledDataset::new("single", seed, 4, 1, inputs, vec![0; blobs.len()])?;
        let state = estimate(&model, &data, KfacConfig::default())?;
        worst = worst.max(state.approximation_error(&assemble(&model, &data, DEFAULT_ALPHA, 0.0)?)?);
    }
    let (model, data, _) = random_mlp_problem(7, 1e-3)?;
    let state = estimate(&model, &data, KfacConfig::default())?;
    let (mut linear, mut symmetric, mut positive): (f64, f64, bool) = (0.0, 0.0, true);
    for k in 0..10 {
        let u = DVector::from_fn(model.dim(), |i, _| ((i * (k + 2)) as f64).sin());
        let v = DVector::from_fn(model.dim(), |i, _| ((i + k) as f64 * 0.7).cos());
        let (iu, iv) = (state.apply_inverse(&u)?, state.apply_inverse(&v)?);
        let (a, b) = (1.5 - k as f64 * 0.3, 0.25 + k as f64);
        linear = linear.max(rel(&state.apply_inverse(&(&u * a + &v * b))?, &(&iu * a + &iv * b)));
        symmetric = symmetric.max((u.dot(&iv) - iu.dot(&v)).abs() / (u.norm() * iv.norm()));
        positive &= u.dot(&iu) > 0.0 && v.dot(&iv) > 0.0;
    }
    verdict(
        worst < 1e-8 && linear < 1e-12 && symmetric < 1e-10 && positive,
        format!("single-layer Frobenius error {worst:.2e}; linearity {linear:.2e}, symmetry {symmetric:.2e}, positive {positive}"),
    )
}

fn diverges(problem: &LinearizedProblem, eta: f64) -> Result<bool> {
    let cfg = OptimizerConfig { eta, preconditioner: PreconditionerKind::None, max_epochs: 20_000, stop_tolerance: 0.0, ..OptimizerConfig::default() };
    match train(problem, &cfg, None) {
        Ok(_) => Ok(false),
        Err(LqfError::Divergence { .. }) => Ok(true),
        Err(e) => Err(e),
    }
}

fn stability_bracketing() -> Result<Verdict> {
    let mut good = 0;
    for seed in 0..10 {
        let p = random_problem(20 + seed as usize, 2, 6 + seed as usize % 5, 0.05, seed);
        let h = p.exact_hessian()?;
        let bound = max_stable_lr(&h, &DMatrix::identity(p.dim(), p.dim()))?;
        if !diverges(&p, 0.99 * bound)? && diverges(&p, 1.01 * bound)? {
            good += 1;
        }
    }
    verdict(good == 10, format!("{good}/10 quadratics stable at 0.99 and divergent at 1.01 of max_stable_lr"))
}

fn behavioral_analogs() -> Result<Verdict> {
    let seeds = 10u64;
    let mut slowest: f64 = 0.0;
    let cfg = Config::default();

    let (mut top, mut bottom) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let start = Instant::now();
        let wb = workbench(&cfg, seed)?;
        let trial = summarization_trial(&wb.problem()?, &wb.val_problem()?, &wb.test_problem()?, 20, seed)?;
        top.push(trial.drop_top_error);
        bottom.push(trial.drop_bottom_error);
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    let (top_mean, top_ci) = mean_ci(&top);
    let (bottom_mean, bottom_ci) = mean_ci(&bottom);
    let a = top_mean >= bottom_mean;

    let lambda = workbench(&cfg, 0)?.lambda;
    let task = TransferTask::default();
    let trainer = OptimizerConfig {
        eta: 0.1,
        momentum: 0.9,
        max_epochs: 20_000,
        stop: StopRule::TrainError { threshold: 0.005, patience: 5 },
        ..OptimizerConfig::default()
    };
    let mut gaps = vec![(Vec::new(), Vec::new(), Vec::new()); 5];
    for seed in 0..seeds {
        let start = Instant::now();
        let instance = task.build(seed)?;
        for step in online_trial(&instance, 5, 4, 50, DEFAULT_ALPHA, lambda, &trainer, KfacConfig::default())? {
            let g = &mut gaps[step.step - 1];
            g.0.push(step.incremental_error);
            g.1.push(step.retrained_error);
            g.2.push(step.paragon_error);
        }
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    let worst = |pick: fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        gaps.iter().map(|g| (mean_ci(&g.0).0 - mean_ci(pick(g)).0).abs()).fold(0.0f64, f64::max)
    };
    let retrain_gap = worst(|g| &g.1);
    let closed_form_gap = worst(|g| &g.2);
    let b = retrain_gap <= 0.005;

    let kshot_task = TransferTask { separation: 4.0, ..TransferTask::default() };
    let lambdas: Vec<f64> = KSHOT_LAMBDAS.split(',').map(|v| v.parse().unwrap()).collect();
    let ks = [1usize, 2, 5];
    let mut errors = vec![(Vec::new(), Vec::new()); ks.len()];
    for seed in 0..seeds {
        let start = Instant::now();
        let instance = kshot_task.build(seed)?;
        for (j, &k) in ks.iter().enumerate() {
            let trial = kshot_trial(&instance, k, KshotSizes::default(), DEFAULT_ALPHA, &lambdas, &NlftGrid::default())?;
            errors[j].0.push(trial.lqf_error);
            errors[j].1.push(trial.nlft_error);
        }
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    let mut kshot = String::new();
    for (j, &k) in ks.iter().enumerate() {
        let (l, lci) = mean_ci(&errors[j].0);
        let (n, nci) = mean_ci(&errors[j].1);
        kshot.push_str(&format!(" k={k}: lqf {l:.3}±{lci:.3} vs nlft {n:.3}±{nci:.3};"));
    }
    let c = mean_ci(&errors[0].0).0 <= mean_ci(&errors[0].1).0;

    let timely = slowest < 60.0;
    verdict(
        a && b && c && timely,
        format!(
            "(a) drop-top {top_mean:.3}±{top_ci:.3} vs drop-bottom {bottom_mean:.3}±{bottom_ci:.3} [{}]; (b) worst online gap {:.2} points to retraining, {:.2} to the closed form [{}]; (c){kshot} [{}]; slowest seed {slowest:.1}s",
            pass(a),
            100.0 * retrain_gap,
            100.0 * closed_form_gap,
            pass(b),
            pass(c)
        ),
    )
}

fn determinism() -> Result<Verdict> {
    let root = tempfile::tempdir().map_err(LqfError::Io)?;
    let data = "data.per_class=12 data.val_per_class=6 data.test_per_class=10 pretrain.epochs=5";
    let settings: &[(&str, &str)] = &[
        ("train", "trainer.max_epochs=300"),
        ("solve", ""),
        ("spectrum", ""),
        ("influence", "influence.brute_force=true"),
        ("fsi", ""),
        ("summarize", "summarize.k=0,3 summarize.seeds=2"),
        ("lambda-path", "trainer.max_epochs=300 lambda.values=1e-1,1e-2 lambda.descent_steps=3"),
        ("kshot", "pretrain.epochs=5 data.test_per_class=10 kshot.seeds=2 kshot.k=1,2 nlft.epochs=10"),
        ("online", "pretrain.epochs=5 data.test_per_class=10 trainer.max_epochs=300 online.increments=2 online.seeds=2"),
    ];
    let mut mismatched = Vec::new();
    for command in Command::ALL {
        let name = command.name();
        let first = root.path().join(format!("{name}-a"));
        let second = root.path().join(format!("{name}-b"));
        let mut args: Vec<String> = vec!["lqf".into(), name.into(), "--seed".into(), "5".into(), "--out".into(), first.display().to_string()];
        if let Some((_, keys)) = settings.iter().find(|(n, _)| *n == name) {
            let keys = if matches!(name, "kshot" | "online") { keys.to_string() } else { format!("{data} {keys}") };
            for kv in keys.split_whitespace() {
                args.extend(["--set".to_string(), kv.to_string()]);
            }
        }
        let code = lqf_cli::run(&args);
        let rerun = lqf_cli::run([
            "lqf".to_string(),
            name.into(),
            "--config".into(),
            first.join("config.snapshot").display().to_string(),
            "--out".into(),
            second.display().to_string(),
        ]);
        if code != 0 || rerun != 0 || !same_outputs(&first, &second)? {
            mismatched.push(format!("{name}(exit {code}/{rerun})"));
        }
    }
    verdict(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("all {} commands reproduce their outputs byte-for-byte from the snapshot", Command::ALL.len())
        } else {
            format!("not reproduced: {}", mismatched.join(", "))
        },
    )
}

fn same_outputs(a: &Path, b: &Path) -> Result<bool> {
    let mut names: Vec<_> = fs::read_dir(a)?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
    names.sort();
    if names.is_empty() {
        return Ok(false);
    }
    for name in names {
        if fs::read(a.join(&name))? != fs::read(b.join(&name))? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() {
    let criteria: [(&str, fn() -> Result<Verdict>); 9] = [
        ("closed-form equivalence", closed_form_equivalence),
        ("convergence-dynamics identity", dynamics_identity),
        ("influence exactness", influence_exactness),
        ("tangent-model fidelity", tangent_fidelity),
        ("lambda gradient", lambda_gradient_check),
        ("K-FAC exactness island", kfac_island),
        ("stability bound", stability_bracketing),
        ("desk-scale behavioral analogs", behavioral_analogs),
        ("determinism", determinism),
    ];
    let filter: Option<usize> = std::env::var("LQF_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        if filter.is_some_and(|f| f != n + 1) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("criterion {} {name}: {} ({detail}) [{:.1}s]", n + 1, pass(ok), start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
