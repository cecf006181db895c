//! Network evaluation: plain forward pass, reverse-mode Jacobians and the
//! paired (value, tangent) pass that evaluates the linearized network.

use nalgebra::{DMatrix, DVector};

use super::params::ParamVector;
use super::pool::{PooledCovariance, TangentOptions};
use super::spec::{Layer, NetworkSpec};
use crate::error::{check_finite, check_len, LqfError, Result};

/// Leaky-ReLU; the derivative at exactly zero is taken to be `slope`.
pub fn leaky_relu(z: &[f64], slope: f64) -> Result<Vec<f64>> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(LqfError::contract(format!("leaky slope {slope} outside (0, 1)")));
    }
    check_finite("leaky_relu input", z)?;
    Ok(z.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect())
}

#[inline]
fn leaky_grad(pre: f64, slope: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    None,
    Dense { weight: usize, bias: Option<usize> },
    Norm { scale: usize, shift: usize },
}

fn slots_for(spec: &NetworkSpec) -> Vec<Slot> {
    let mut offset = 0;
    spec.layers
        .iter()
        .map(|layer| match layer {
            Layer::Dense { input, output, bias } => {
                let weight = offset;
                offset += input * output;
                let bias = bias.then(|| {
                    let b = offset;
                    offset += output;
                    b
                });
                Slot::Dense { weight, bias }
            }
            Layer::FrozenNorm { mean, affine: true, .. } => {
                let scale = offset;
                offset += 2 * mean.len();
                Slot::Norm {
                    scale,
                    shift: scale + mean.len(),
                }
            }
            _ => Slot::None,
        })
        .collect()
}

/// Intermediate values kept from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is the input of layer `l`; the last entry is the network output.
    pub inputs: Vec<Vec<f64>>,
    pools: Vec<Option<(DMatrix<f64>, PooledCovariance)>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace has the network input")
    }
}

/// A network bound to a parameter slice.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    spec: &'a NetworkSpec,
    slots: &'a [Slot],
    params: &'a [f64],
}

fn feature_map(x: &[f64], channels: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.len() / channels, channels, x)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl<'a> Network<'a> {
    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        check_len("network input", self.spec.input_dim, x.len())?;
        check_finite("network input", x)?;
        let p = self.params;
        let mut inputs = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut pools = Vec::with_capacity(self.spec.layers.len());
        let mut cur = x.to_vec();
        for (id, (layer, slot)) in self.spec.layers.iter().zip(self.slots).enumerate() {
            let mut pool = None;
            let next = match (layer, slot) {
                (Layer::Dense { input, output, .. }, Slot::Dense { weight, bias }) => {
                    let mut y = vec![0.0; *output];
                    for (o, yo) in y.iter_mut().enumerate() {
                        let row = &p[weight + o * input..weight + (o + 1) * input];
                        *yo = row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>()
                            + bias.map_or(0.0, |b| p[b + o]);
                    }
                    y
                }
                (Layer::Activation { leaky_slope }, _) => {
                    cur.iter().map(|&v| if v >= 0.0 { v } else { leaky_slope * v }).collect()
                }
                (Layer::FrozenNorm { mean, var, .. }, slot) => cur
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let normed = (v - mean[k]) / var[k].sqrt();
                        match slot {
                            Slot::Norm { scale, shift } => p[scale + k] * normed + p[shift + k],
                            _ => normed,
                        }
                    })
                    .collect(),
                (Layer::BilinearPool { channels }, _) => {
                    let z = feature_map(&cur, *channels);
                    let pooled = PooledCovariance::new(&z)?;
                    let out = row_major(&pooled.root);
                    pool = Some((z, pooled));
                    out
                }
                (Layer::MeanPool { channels }, _) => {
                    let positions = cur.len() / channels;
                    (0..*channels)
                        .map(|c| (0..positions).map(|h| cur[h * channels + c]).sum::<f64>() / positions as f64)
                        .collect()
                }
                _ => unreachable!("slot table built from the same spec"),
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(LqfError::NumericOverflow(format!("output of layer {id}")));
            }
            inputs.push(std::mem::replace(&mut cur, next));
            pools.push(pool);
        }
        inputs.push(cur);
        Ok(Trace { inputs, pools })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.inputs.pop().expect("non-empty trace"))
    }

    /// Reverse pass: accumulates `cotangentᵀ ∂f/∂w` into `grad`. `on_dense`
    /// receives each dense layer's index and the cotangent at its output.
    pub fn backward(
        &self,
        trace: &Trace,
        cotangent: &[f64],
        grad: &mut [f64],
        mut on_dense: impl FnMut(usize, &[f64]),
    ) -> Result<()> {
        let p = self.params;
        let mut bar = cotangent.to_vec();
        for id in (0..self.spec.layers.len()).rev() {
            let x = &trace.inputs[id];
            bar = match (&self.spec.layers[id], self.slots[id]) {
                (Layer::Dense { input, output, .. }, Slot::Dense { weight, bias }) => {
                    on_dense(id, &bar);
                    let mut xbar = vec![0.0; *input];
                    for o in 0..*output {
                        let b = bar[o];
                        if b == 0.0 {
                            continue;
                        }
                        let row = weight + o * input;
                        for i in 0..*input {
                            xbar[i] += p[row + i] * b;
                            grad[row + i] += b * x[i];
                        }
                        if let Some(bo) = bias {
                            grad[bo + o] += b;
                        }
                    }
                    xbar
                }
                (Layer::Activation { leaky_slope }, _) => bar
                    .iter()
                    .zip(x)
                    .map(|(b, &v)| b * leaky_grad(v, *leaky_slope))
                    .collect(),
                (Layer::FrozenNorm { mean, var, .. }, slot) => bar
                    .iter()
                    .enumerate()
                    .map(|(k, &b)| {
                        let sd = var[k].sqrt();
                        match slot {
                            Slot::Norm { scale, shift } => {
                                grad[scale + k] += b * (x[k] - mean[k]) / sd;
                                grad[shift + k] += b;
                                b * p[scale + k] / sd
                            }
                            _ => b / sd,
                        }
                    })
                    .collect(),
                (Layer::BilinearPool { channels }, _) => {
                    let (z, pooled) = trace.pools[id].as_ref().expect("pool cached in trace");
                    let root_bar = DMatrix::from_row_slice(*channels, *channels, &bar);
                    row_major(&pooled.adjoint(z, &root_bar)?)
                }
                (Layer::MeanPool { channels }, _) => {
                    let positions = x.len() / channels;
                    (0..x.len())
                        .map(|k| bar[k % channels] / positions as f64)
                        .collect()
                }
                _ => unreachable!("slot table built from the same spec"),
            };
        }
        Ok(())
    }

    /// Paired propagation of `(f_w(x), ∂f_w(x)·dw)`.
    pub fn value_and_tangent(&self, x: &[f64], dw: &[f64], opts: TangentOptions) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("network input", self.spec.input_dim, x.len())?;
        check_len("parameter direction", self.params.len(), dw.len())?;
        let p = self.params;
        let mut val = x.to_vec();
        let mut tan = vec![0.0; x.len()];
        for (id, (layer, slot)) in self.spec.layers.iter().zip(self.slots).enumerate() {
            let (v, t) = match (layer, slot) {
                (Layer::Dense { input, output, .. }, Slot::Dense { weight, bias }) => {
                    let mut y = vec![0.0; *output];
                    let mut ty = vec![0.0; *output];
                    for o in 0..*output {
                        let row = weight + o * input;
                        let mut acc = 0.0;
                        let mut tacc = 0.0;
                        for i in 0..*input {
                            acc += p[row + i] * val[i];
                            tacc += p[row + i] * tan[i] + dw[row + i] * val[i];
                        }
                        if let Some(b) = bias {
                            acc += p[b + o];
                            tacc += dw[b + o];
                        }
                        y[o] = acc;
                        ty[o] = tacc;
                    }
                    (y, ty)
                }
                (Layer::Activation { leaky_slope }, _) => {
                    let s = *leaky_slope;
                    let t = tan.iter().zip(&val).map(|(t, &v)| t * leaky_grad(v, s)).collect();
                    let v = val.iter().map(|&v| if v >= 0.0 { v } else { s * v }).collect();
                    (v, t)
                }
                (Layer::FrozenNorm { mean, var, .. }, slot) => {
                    let n = val.len();
                    let mut v = vec![0.0; n];
                    let mut t = vec![0.0; n];
                    for k in 0..n {
                        let sd = var[k].sqrt();
                        let normed = (val[k] - mean[k]) / sd;
                        match slot {
                            Slot::Norm { scale, shift } => {
                                v[k] = p[scale + k] * normed + p[shift + k];
                                t[k] = p[scale + k] * tan[k] / sd + dw[scale + k] * normed + dw[shift + k];
                            }
                            _ => {
                                v[k] = normed;
                                t[k] = tan[k] / sd;
                            }
                        }
                    }
                    (v, t)
                }
                (Layer::BilinearPool { channels }, _) => {
                    let z = feature_map(&val, *channels);
                    let dz = feature_map(&tan, *channels);
                    let pooled = PooledCovariance::new(&z)?;
                    let droot = pooled.tangent(&z, &dz, opts)?;
                    (row_major(&pooled.root), row_major(&droot))
                }
                (Layer::MeanPool { channels }, _) => {
                    let positions = val.len() / channels;
                    let pool = |src: &[f64]| -> Vec<f64> {
                        (0..*channels)
                            .map(|c| (0..positions).map(|h| src[h * channels + c]).sum::<f64>() / positions as f64)
                            .collect()
                    };
                    (pool(&val), pool(&tan))
                }
                _ => unreachable!("slot table built from the same spec"),
            };
            if v.iter().chain(&t).any(|x| !x.is_finite()) {
                return Err(LqfError::NumericOverflow(format!("tangent pass at layer {id}")));
            }
            val = v;
            tan = t;
        }
        Ok((val, tan))
    }
}

/// Evaluates `f_w(x)` for arbitrary parameters.
pub fn forward(spec: &NetworkSpec, w: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    if !w.matches(spec) {
        return Err(LqfError::contract("parameter layout does not match network"));
    }
    let slots = slots_for(spec);
    Network {
        spec,
        slots: &slots,
        params: w.values.as_slice(),
    }
    .forward(x)
}

/// Owns a spec and slot table so parameters can be swapped cheaply (training).
#[derive(Debug, Clone)]
pub struct Evaluator {
    spec: NetworkSpec,
    slots: Vec<Slot>,
}

impl Evaluator {
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Evaluator {
            spec: spec.clone(),
            slots: slots_for(spec),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn bind<'a>(&'a self, params: &'a [f64]) -> Network<'a> {
        Network {
            spec: &self.spec,
            slots: &self.slots,
            params,
        }
    }
}

/// First-order Taylor expansion of a network around frozen weights `w0`.
#[derive(Debug, Clone)]
pub struct TangentModel {
    eval: Evaluator,
    w0: ParamVector,
    pool_opts: TangentOptions,
}

impl TangentModel {
    pub fn new(spec: NetworkSpec, w0: ParamVector) -> Result<Self> {
        spec.validate()?;
        if !w0.matches(&spec) {
            return Err(LqfError::contract("w0 layout does not match network"));
        }
        check_finite("w0", w0.values.as_slice())?;
        Ok(TangentModel {
            eval: Evaluator::new(&spec)?,
            w0,
            pool_opts: TangentOptions::default(),
        })
    }

    /// Selects how the bilinear-pool tangent is formed in [`Self::linear_forward`].
    pub fn with_pool_tangent(mut self, opts: TangentOptions) -> Self {
        self.pool_opts = opts;
        self
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.eval.spec()
    }

    pub fn w0(&self) -> &ParamVector {
        &self.w0
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.eval
    }

    /// Parameter count `D`.
    pub fn dim(&self) -> usize {
        self.w0.dim()
    }

    pub fn classes(&self) -> usize {
        self.spec().output_dim
    }

    pub fn network(&self) -> Network<'_> {
        self.eval.bind(self.w0.values.as_slice())
    }

    /// `f_{w0}(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.network().forward(x)?))
    }

    /// `C × D` Jacobian at `w0`, one reverse pass per output.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let net = self.network();
        let trace = net.trace(x)?;
        self.jacobian_from_trace(&trace)
    }

    pub(crate) fn jacobian_from_trace(&self, trace: &Trace) -> Result<DMatrix<f64>> {
        let net = self.network();
        let c = self.classes();
        let d = self.dim();
        let mut jac = DMatrix::zeros(c, d);
        let mut row = vec![0.0; d];
        let mut basis = vec![0.0; c];
        for k in 0..c {
            row.iter_mut().for_each(|v| *v = 0.0);
            basis[k] = 1.0;
            net.backward(trace, &basis, &mut row, |_, _| {})?;
            basis[k] = 0.0;
            for (j, v) in row.iter().enumerate() {
                jac[(k, j)] = *v;
            }
        }
        Ok(jac)
    }

    /// `f0(x) + g(x)·dw` without forming `g(x)`.
    pub fn linear_forward(&self, dw: &DVector<f64>, x: &[f64]) -> Result<DVector<f64>> {
        check_len("linear_forward direction", self.dim(), dw.len())?;
        let (v, t) = self.network().value_and_tangent(x, dw.as_slice(), self.pool_opts)?;
        Ok(DVector::from_iterator(v.len(), v.iter().zip(&t).map(|(a, b)| a + b)))
    }

    /// Nonlinear evaluation at `w0 + dw`.
    pub fn forward_at(&self, dw: &DVector<f64>, x: &[f64]) -> Result<DVector<f64>> {
        check_len("parameter delta", self.dim(), dw.len())?;
        let w = &self.w0.values + dw;
        Ok(DVector::from_vec(self.eval.bind(w.as_slice()).forward(x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::layout_for;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_dense(weight: f64, bias: bool) -> (NetworkSpec, ParamVector) {
        let spec = NetworkSpec::new(1, 1, vec![Layer::Dense { input: 1, output: 1, bias }]).unwrap();
        let mut values = vec![weight];
        if bias {
            values.push(0.0);
        }
        let w = ParamVector::new(DVector::from_vec(values), layout_for(&spec)).unwrap();
        (spec, w)
    }

    fn random_net(seed: u64) -> TangentModel {
        let spec = NetworkSpec::mlp(4, &[6, 5], 3, 0.1).unwrap();
        TangentModel::new(spec.clone(), ParamVector::init(&spec, seed)).unwrap()
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn leaky_examples() {
        assert_eq!(leaky_relu(&[5.0], 0.01).unwrap(), vec![5.0]);
        assert!((leaky_relu(&[-2.0], 0.1).unwrap()[0] + 0.2).abs() < 1e-15);
        assert_eq!(leaky_relu(&[0.0], 0.3).unwrap(), vec![0.0]);
        assert!(leaky_relu(&[f64::NAN], 0.3).is_err());
        assert!(leaky_relu(&[1.0], 0.0).is_err());
    }

    #[test]
    fn dense_then_leaky_forward() {
        let (spec, w) = single_dense(2.0, true);
        assert_eq!(forward(&spec, &w, &[3.0]).unwrap(), vec![6.0]);
        let spec = NetworkSpec::new(1, 1, vec![Layer::dense(1, 1), Layer::leaky(0.1)]).unwrap();
        let w = ParamVector::new(DVector::from_vec(vec![1.0, 0.0]), layout_for(&spec)).unwrap();
        let out = forward(&spec, &w, &[-2.0]).unwrap();
        assert!((out[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let model = random_net(3);
        let x = [0.1, -0.4, 0.9, 0.3];
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(matches!(
            model.forward(&[1.0]).unwrap_err(),
            LqfError::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let (spec, w) = single_dense(f64::MAX, false);
        let model = TangentModel::new(spec, w).unwrap();
        assert!(matches!(model.forward(&[10.0]).unwrap_err(), LqfError::NumericOverflow(_)));
    }

    #[test]
    fn jacobian_of_single_weight() {
        let (spec, w) = single_dense(0.7, false);
        let model = TangentModel::new(spec, w).unwrap();
        let g = model.jacobian(&[3.0]).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 3.0);
    }

    #[test]
    fn negative_branch_scales_jacobian_by_slope() {
        let spec = NetworkSpec::new(1, 1, vec![Layer::dense(1, 1), Layer::leaky(0.1)]).unwrap();
        let w = ParamVector::new(DVector::from_vec(vec![1.0, 0.0]), layout_for(&spec)).unwrap();
        let model = TangentModel::new(spec, w).unwrap();
        let pos = model.jacobian(&[2.0]).unwrap();
        let neg = model.jacobian(&[-2.0]).unwrap();
        // d/dw = x * φ'(wx); d/db = φ'(wx)
        assert_eq!(pos.as_slice(), &[2.0, 1.0]);
        assert!((neg[(0, 0)] - 0.1 * -2.0).abs() < 1e-15);
        assert!((neg[(0, 1)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let spec = NetworkSpec::mlp(4, &[7, 6, 5], 3, 0.2).unwrap();
        let model = TangentModel::new(spec.clone(), ParamVector::init(&spec, 9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_vec(4, &mut rng);
        let jac = model.jacobian(&x).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for j in 0..model.dim() {
            let mut e = DVector::zeros(model.dim());
            e[j] = h;
            let plus = model.forward_at(&e, &x).unwrap();
            let minus = model.forward_at(&(-e), &x).unwrap();
            for k in 0..3 {
                let fd = (plus[k] - minus[k]) / (2.0 * h);
                worst = worst.max((fd - jac[(k, j)]).abs());
            }
        }
        assert!(worst < 1e-6, "max deviation {worst}");
    }

    #[test]
    fn linear_forward_at_zero_is_f0() {
        let model = random_net(4);
        let x = [0.3, 0.2, -0.5, 1.0];
        let lin = model.linear_forward(&DVector::zeros(model.dim()), &x).unwrap();
        assert_eq!(lin.as_slice(), model.forward(&x).unwrap().as_slice());
    }

    #[test]
    fn linear_forward_matches_dense_jacobian() {
        let model = random_net(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let x = random_vec(4, &mut rng);
            let dw = DVector::from_vec(random_vec(model.dim(), &mut rng));
            let lin = model.linear_forward(&dw, &x).unwrap();
            let dense = model.forward(&x).unwrap() + model.jacobian(&x).unwrap() * &dw;
            assert!((&lin - &dense).norm() <= 1e-10 * dense.norm());
        }
    }

    #[test]
    fn linear_forward_through_norm_and_bilinear_head() {
        let spec = NetworkSpec::new(
            8,
            2,
            vec![
                Layer::FrozenNorm {
                    mean: vec![0.1; 8],
                    var: vec![0.5; 8],
                    affine: true,
                },
                Layer::dense(8, 8),
                Layer::leaky(0.05),
                Layer::BilinearPool { channels: 2 },
                Layer::dense(4, 2),
            ],
        )
        .unwrap();
        let model = TangentModel::new(spec.clone(), ParamVector::init(&spec, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_vec(8, &mut rng);
        let dw = DVector::from_vec(random_vec(model.dim(), &mut rng));
        let lin = model.linear_forward(&dw, &x).unwrap();
        let dense = model.forward(&x).unwrap() + model.jacobian(&x).unwrap() * &dw;
        assert!((&lin - &dense).norm() <= 1e-10 * dense.norm());

        // reverse-mode rows agree with finite differences through the pool
        let jac = model.jacobian(&x).unwrap();
        let h = 1e-6;
        let dir = DVector::from_vec(random_vec(model.dim(), &mut rng));
        let fd = (model.forward_at(&(&dir * h), &x).unwrap() - model.forward_at(&(&dir * -h), &x).unwrap())
            / (2.0 * h);
        let an = &jac * &dir;
        assert!((&fd - &an).norm() < 1e-6 * an.norm().max(1.0));
    }

    #[test]
    fn jvp_is_linear_in_direction() {
        let model = random_net(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_vec(4, &mut rng);
        let d1 = DVector::from_vec(random_vec(model.dim(), &mut rng));
        let d2 = DVector::from_vec(random_vec(model.dim(), &mut rng));
        let (a, b) = (0.7, -1.3);
        let lhs = model.linear_forward(&(&d1 * a + &d2 * b), &x).unwrap();
        let f0 = model.forward(&x).unwrap();
        let rhs = model.linear_forward(&d1, &x).unwrap() * a + model.linear_forward(&d2, &x).unwrap() * b
            + &f0 * (1.0 - a - b);
        assert!((&lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
    }
}
