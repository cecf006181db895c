//! Independent oracles: random problem generators, an extended-precision
//! normal-equations solver, finite differences, and the aggregate check suite
//! behind `lqf verify`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{gen_blobs, LabeledDataset};
use crate::error::Result;
use crate::influence::{brute_force_loo, Influence, InverseProvider};
use crate::kfac::{estimate, KfacConfig};
use crate::lambda::{lambda_gradient, validation_loss_at, GradientMode};
use crate::net::{bilinear_pool_forward, bilinear_pool_tangent, Layer, NetworkSpec, ParamVector, TangentModel, TangentOptions};
use crate::quadratic::{assemble, LinearizedProblem, DEFAULT_ALPHA};
use crate::trainer::{predicted_distance, train, OptimizerConfig, PreconditionerKind};

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Gaussian `J` and `r` with labels `i mod C`.
pub fn random_problem(n: usize, c: usize, d: usize, lambda: f64, seed: u64) -> LinearizedProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jacobian = normal_matrix(&mut rng, n * c, d);
    let residual = DVector::from_fn(n * c, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
    let labels = (0..n).map(|i| i % c).collect();
    LinearizedProblem::new(jacobian, residual, c, lambda, DEFAULT_ALPHA, Some(labels)).expect("valid random problem")
}

/// Random leaky MLP with its seeded initialization and blob data.
pub fn random_model(
    input: usize,
    hidden: &[usize],
    classes: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<(TangentModel, LabeledDataset)> {
    let spec = NetworkSpec::mlp(input, hidden, classes, 0.1)?;
    let model = TangentModel::new(spec.clone(), ParamVector::init(&spec, seed))?;
    let data = gen_blobs(classes.max(2), samples_per_class, input, 3.0, seed.wrapping_add(1))?;
    let data = if classes == 1 {
        LabeledDataset::new(&data.name, data.seed, data.dim, 1, flat_inputs(&data), vec![0; data.len()])?
    } else {
        data
    };
    Ok((model, data))
}

fn flat_inputs(data: &LabeledDataset) -> Vec<f64> {
    (0..data.len()).flat_map(|i| data.input(i).to_vec()).collect()
}

/// Double-double number: `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    fn product(a: f64, b: f64) -> Self {
        let p = a * b;
        Dd { hi: p, lo: a.mul_add(b, -p) }
    }

    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }

    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn mul(self, o: Dd) -> Dd {
        let p = Dd::product(self.hi, o.hi);
        quick_two_sum(p.hi, p.lo + (self.hi * o.lo + self.lo * o.hi))
    }

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd::from(q3))
    }

    fn abs(self) -> f64 {
        self.hi.abs()
    }
}

/// `((1/N)JᵀJ + λI)⁻¹ (1/N)Jᵀr` formed and solved in double-double arithmetic
/// by Gaussian elimination with partial pivoting.
pub fn extended_precision_solve(problem: &LinearizedProblem) -> DVector<f64> {
    let j = problem.jacobian();
    let r = problem.residual();
    let d = problem.dim();
    let n = Dd::from(problem.samples() as f64);
    let mut m = vec![vec![Dd::ZERO; d + 1]; d];
    for a in 0..d {
        for b in a..d {
            let mut acc = Dd::ZERO;
            for row in 0..j.nrows() {
                acc = acc.add(Dd::product(j[(row, a)], j[(row, b)]));
            }
            let mut v = acc.div(n);
            if a == b {
                v = v.add(Dd::from(problem.lambda()));
            }
            m[a][b] = v;
            m[b][a] = v;
        }
        let mut acc = Dd::ZERO;
        for row in 0..j.nrows() {
            acc = acc.add(Dd::product(j[(row, a)], r[row]));
        }
        m[a][d] = acc.div(n);
    }
    for col in 0..d {
        let pivot = (col..d).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).expect("non-empty");
        m.swap(col, pivot);
        for row in col + 1..d {
            let f = m[row][col].div(m[col][col]);
            for k in col..=d {
                let t = f.mul(m[col][k]);
                m[row][k] = m[row][k].sub(t);
            }
        }
    }
    let mut x = vec![Dd::ZERO; d];
    for row in (0..d).rev() {
        let mut acc = m[row][d];
        for k in row + 1..d {
            acc = acc.sub(m[row][k].mul(x[k]));
        }
        x[row] = acc.div(m[row][row]);
    }
    DVector::from_iterator(d, x.iter().map(|v| v.hi + v.lo))
}

/// Central difference `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Jacobian by central differences in every parameter.
pub fn finite_difference_jacobian(model: &TangentModel, x: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let d = model.dim();
    let mut jac = DMatrix::zeros(model.classes(), d);
    let mut dw = DVector::zeros(d);
    for k in 0..d {
        dw[k] = step;
        let up = model.forward_at(&dw, x)?;
        dw[k] = -step;
        let down = model.forward_at(&dw, x)?;
        dw[k] = 0.0;
        jac.set_column(k, &((up - down) / (2.0 * step)));
    }
    Ok(jac)
}

/// Signs of every activation input along `w0 + t·dw`.
fn activation_signs(model: &TangentModel, dw: &DVector<f64>, x: &[f64]) -> Result<Vec<bool>> {
    let w = &model.w0().values + dw;
    let trace = model.evaluator().bind(w.as_slice()).trace(x)?;
    let mut signs = Vec::new();
    for (id, layer) in model.spec().layers.iter().enumerate() {
        if let Layer::Activation { .. } = layer {
            signs.extend(trace.inputs[id].iter().map(|&z| z >= 0.0));
        }
    }
    Ok(signs)
}

/// Ratio `err(ε)/err(ε/2)` of the linearization error against the network,
/// or `None` when an activation changes sign between `w0` and `w0 + εv`.
pub fn richardson_ratio(model: &TangentModel, x: &[f64], v: &DVector<f64>, eps: f64) -> Result<Option<f64>> {
    let base = activation_signs(model, &DVector::zeros(model.dim()), x)?;
    if activation_signs(model, &(v * eps), x)? != base || activation_signs(model, &(v * (eps / 2.0)), x)? != base {
        return Ok(None);
    }
    let err = |e: f64| -> Result<f64> {
        let dw = v * e;
        Ok((model.forward_at(&dw, x)? - model.linear_forward(&dw, x)?).norm())
    };
    Ok(Some(err(eps)? / err(eps / 2.0)?))
}

/// One oracle comparison.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: &'static str, value: f64, tolerance: f64) -> Self {
        Check { name, value, tolerance, passed: value.is_finite() && value <= tolerance }
    }

    fn above(name: &'static str, value: f64, tolerance: f64) -> Self {
        Check { name, value, tolerance, passed: value >= tolerance }
    }
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Runs every oracle comparison once with seeds derived from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let p = random_problem(50, 1, 20, 0.01, seed);
    let w = p.closed_form()?;
    checks.push(Check::below("closed-form-vs-extended-precision", rel(&w, &extended_precision_solve(&p)), 1e-8));
    let g = p.gradient(&w).norm() / (1.0 + p.residual().norm());
    checks.push(Check::below("closed-form-optimality", g, 1e-8));

    let probe = DVector::from_fn(p.dim(), |k, _| ((k + 1) as f64).sin());
    let fd = DVector::from_fn(p.dim(), |k, _| {
        central_difference(
            |t| {
                let mut v = probe.clone();
                v[k] = t;
                p.loss(&v)
            },
            probe[k],
            1e-5,
        )
    });
    checks.push(Check::below("gradient-vs-finite-difference", rel(&p.gradient(&probe), &fd), 1e-6));

    let (model, data) = random_model(4, &[6, 5], 3, 4, seed)?;
    let x = data.input(0);
    let jac = model.jacobian(x)?;
    let fd = finite_difference_jacobian(&model, x, 1e-5)?;
    checks.push(Check::below("jacobian-vs-finite-difference", (&jac - fd).abs().max(), 1e-6));

    let dw = DVector::from_fn(model.dim(), |k, _| ((k * 7 + 3) as f64).cos() * 0.1);
    let dense = model.forward(x)? + &jac * &dw;
    checks.push(Check::below("linear-forward-vs-dense-jacobian", rel(&model.linear_forward(&dw, x)?, &dense), 1e-10));

    let mut ratios = Vec::new();
    for i in 0..data.len() {
        let v = DVector::from_fn(model.dim(), |k, _| (((k + 1) * (i + 3)) as f64).sin()).normalize();
        if let Some(r) = richardson_ratio(&model, data.input(i), &v, 1e-2)? {
            ratios.push(r);
        }
    }
    let ok = ratios.iter().filter(|&&r| r >= 3.9).count() as f64 / ratios.len().max(1) as f64;
    checks.push(Check::above("second-order-linearization-error", ok, 0.95));

    let spec = NetworkSpec::new(3, 1, vec![Layer::dense(3, 1)])?;
    let single = TangentModel::new(spec.clone(), ParamVector::init(&spec, seed))?;
    let blobs = gen_blobs(2, 10, 3, 2.0, seed)?;
    let state = estimate(&single, &blobs_single_output(&blobs)?, KfacConfig::default())?;
    let sp = assemble(&single, &blobs_single_output(&blobs)?, DEFAULT_ALPHA, 0.0)?;
    checks.push(Check::below("kfac-single-layer-exact", state.approximation_error(&sp)?, 1e-8));

    let p = random_problem(30, 2, 8, 0.1, seed + 1);
    let wstar = p.closed_form()?;
    let h = p.exact_hessian()?;
    let eta = 0.5 / crate::quadratic::spectrum(&h)?.eigenvalues[0];
    let mut worst: f64 = 0.0;
    for t in [1, 5, 20] {
        let cfg = OptimizerConfig {
            eta,
            preconditioner: PreconditionerKind::None,
            max_epochs: t,
            stop_tolerance: 0.0,
            ..OptimizerConfig::default()
        };
        let traj = train(&p, &cfg, None)?;
        let predicted = predicted_distance(&h, &DMatrix::identity(8, 8), eta, t, &(-&wstar))?;
        worst = worst.max(rel(&(&traj.final_dw - &wstar), &predicted));
    }
    checks.push(Check::below("trainer-vs-closed-form-dynamics", worst, 1e-8));

    let p = random_problem(40, 3, 15, 0.05, seed + 2);
    let wstar = p.closed_form()?;
    let inf = Influence::new(&p, &wstar, InverseProvider::Exact)?;
    let mut worst: f64 = 0.0;
    for i in 0..p.samples() {
        worst = worst.max(rel(&inf.loo_weights(i)?, &brute_force_loo(&p, i)?));
    }
    checks.push(Check::below("loo-weights-vs-resolve", worst, 1e-6));

    let p = random_problem(40, 2, 12, 1e-2, seed + 3);
    let v = random_problem(15, 2, 12, 1e-2, seed + 4);
    let g = lambda_gradient(&p, &v, GradientMode::Exact)?;
    let fd = central_difference(|l| validation_loss_at(&p, &v, l).unwrap_or(f64::NAN), 1e-2, 1e-6);
    checks.push(Check::below("lambda-gradient-vs-finite-difference", (g - fd).abs() / fd.abs(), 1e-4));

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
    let z = normal_matrix(&mut rng, 6, 3);
    let dz = normal_matrix(&mut rng, 6, 3);
    let exact = bilinear_pool_tangent(&z, &dz, TangentOptions::default())?;
    let h = 1e-6;
    let fd = (bilinear_pool_forward(&(&z + &dz * h))? - bilinear_pool_forward(&(&z - &dz * h))?) / (2.0 * h);
    checks.push(Check::below("sqrt-tangent-vs-finite-difference", (&exact - &fd).norm() / fd.norm(), 1e-4));

    Ok(checks)
}

fn blobs_single_output(data: &LabeledDataset) -> Result<LabeledDataset> {
    LabeledDataset::new(&data.name, data.seed, data.dim, 1, flat_inputs(data), vec![0; data.len()])
}
