//! Kronecker-factored curvature for the linearized network.
//!
//! For a dense layer with homogeneous input `ā = [a; 1]` and output cotangent
//! `δ`, the Gauss–Newton block `E[Σ_c (δ_c δ_cᵀ) ⊗ (ā āᵀ)]` is approximated by
//! `G ⊗ A` with `A = E[ā āᵀ]` and `G = E[Σ_c δ_c δ_cᵀ]`. Cotangents are taken
//! for each output basis vector, which is the exact Fisher of a Gaussian
//! output model. In row-major parameter order (`W[o, i]`, bias appended as
//! column `in`) the block is exactly `G ⊗ A`.
//!
//! The curvature of the linearized problem never changes, so the factors are
//! estimated once and the state is frozen afterwards.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{check_len, LqfError, Result};
use crate::linalg::{guard, mirror_upper, sym_eigen_desc};
use crate::net::{ByteReader, Layer, TangentModel};
use crate::quadratic::LinearizedProblem;

const MAGIC: &[u8; 4] = b"LQFK";
const VERSION: u32 = 1;
const CHUNK: usize = 16;

/// How damping `γ` enters the inverse of `G ⊗ A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DampingMode {
    /// `(G + π√γ I)⁻¹ ⊗ (A + √γ/π I)⁻¹` with `π² = (tr A / dim A) / (tr G / dim G)`.
    #[default]
    Factored,
    /// `(G ⊗ A + γI)⁻¹`, applied exactly in the factors' eigenbases.
    Eigen,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KfacConfig {
    /// `None` picks `1e-3 ×` the mean eigenvalue of the approximation.
    pub damping: Option<f64>,
    pub mode: DampingMode,
}

#[derive(Debug, Clone)]
struct Eig {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl Eig {
    fn new(m: &DMatrix<f64>) -> Self {
        let (mut values, vectors) = sym_eigen_desc(m);
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        Eig { values, vectors }
    }
}

/// Factors of one dense layer.
#[derive(Debug, Clone)]
pub struct LayerFactors {
    pub layer_id: usize,
    pub weight_offset: usize,
    pub bias_offset: Option<usize>,
    pub input: usize,
    pub output: usize,
    /// `(in [+1]) × (in [+1])` input second moment.
    pub a: DMatrix<f64>,
    /// `out × out` output-cotangent second moment.
    pub g: DMatrix<f64>,
    a_eig: Eig,
    g_eig: Eig,
}

impl LayerFactors {
    fn width(&self) -> usize {
        self.input + usize::from(self.bias_offset.is_some())
    }

    fn gather(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let k = self.width();
        DMatrix::from_fn(self.output, k, |o, i| {
            if i < self.input {
                v[self.weight_offset + o * self.input + i]
            } else {
                v[self.bias_offset.expect("bias column") + o]
            }
        })
    }

    fn scatter(&self, m: &DMatrix<f64>, out: &mut DVector<f64>) {
        for o in 0..self.output {
            for i in 0..self.input {
                out[self.weight_offset + o * self.input + i] = m[(o, i)];
            }
            if let Some(b) = self.bias_offset {
                out[b + o] = m[(o, self.input)];
            }
        }
    }

    /// Parameter index of `V[o, i]`.
    fn index(&self, o: usize, i: usize) -> usize {
        if i < self.input {
            self.weight_offset + o * self.input + i
        } else {
            self.bias_offset.expect("bias column") + o
        }
    }

    /// `π` balancing the damping between the two factors.
    pub fn damping_balance(&self) -> f64 {
        let a_mean = self.a.trace() / self.a.nrows() as f64;
        let g_mean = self.g.trace() / self.g.nrows() as f64;
        if a_mean > 0.0 && g_mean > 0.0 {
            (a_mean / g_mean).sqrt()
        } else {
            1.0
        }
    }
}

/// Parameters outside dense layers, preconditioned by a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGroup {
    pub range: Range<usize>,
    /// Mean diagonal Fisher entry over the group.
    pub mean_diag: f64,
}

#[derive(Debug, Clone)]
pub struct KfacState {
    dim: usize,
    layers: Vec<LayerFactors>,
    scalars: Vec<ScalarGroup>,
    damping: f64,
    mode: DampingMode,
    requested_damping: Option<f64>,
    frozen: bool,
}

/// Estimates and freezes the factors in one call.
pub fn estimate(model: &TangentModel, data: &LabeledDataset, config: KfacConfig) -> Result<KfacState> {
    let mut state = KfacState::new(model.dim(), config);
    state.estimate(model, data)?;
    Ok(state)
}

struct Accum {
    a: Vec<DMatrix<f64>>,
    g: Vec<DMatrix<f64>>,
    diag: Vec<f64>,
}

impl KfacState {
    pub fn new(dim: usize, config: KfacConfig) -> Self {
        KfacState {
            dim,
            layers: Vec::new(),
            scalars: Vec::new(),
            damping: config.damping.unwrap_or(0.0),
            mode: config.mode,
            requested_damping: config.damping,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn mode(&self) -> DampingMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[LayerFactors] {
        &self.layers
    }

    pub fn scalar_groups(&self) -> &[ScalarGroup] {
        &self.scalars
    }

    /// Same factors, different damping.
    pub fn with_damping(&self, damping: f64) -> Result<Self> {
        if !(damping >= 0.0) || !damping.is_finite() {
            return Err(LqfError::contract(format!("damping must be >= 0, got {damping}")));
        }
        let mut s = self.clone();
        s.damping = damping;
        Ok(s)
    }

    pub fn with_mode(&self, mode: DampingMode) -> Self {
        let mut s = self.clone();
        s.mode = mode;
        s
    }

    /// Accumulates the factors over `data` and freezes the state.
    pub fn estimate(&mut self, model: &TangentModel, data: &LabeledDataset) -> Result<()> {
        if self.frozen {
            return Err(LqfError::AlreadyFrozen);
        }
        check_len("curvature parameter count", self.dim, model.dim())?;
        if data.is_empty() {
            return Err(LqfError::EmptyDataset);
        }
        let spec = model.spec();
        let mut layers = Vec::new();
        let mut scalars = Vec::new();
        let mut dense_pos = vec![None; spec.layers.len()];
        let mut records = model.w0().layout.iter().peekable();
        for (id, layer) in spec.layers.iter().enumerate() {
            match layer {
                Layer::Dense { input, output, bias } => {
                    let w = records.next().expect("layout has dense weight");
                    let b = if *bias { records.next().map(|r| r.offset) } else { None };
                    let k = input + usize::from(*bias);
                    dense_pos[id] = Some(layers.len());
                    layers.push(LayerFactors {
                        layer_id: id,
                        weight_offset: w.offset,
                        bias_offset: b,
                        input: *input,
                        output: *output,
                        a: DMatrix::zeros(k, k),
                        g: DMatrix::zeros(*output, *output),
                        a_eig: Eig { values: DVector::zeros(0), vectors: DMatrix::zeros(0, 0) },
                        g_eig: Eig { values: DVector::zeros(0), vectors: DMatrix::zeros(0, 0) },
                    });
                }
                Layer::FrozenNorm { affine: true, .. } => {
                    for _ in 0..2 {
                        let r = records.next().expect("layout has norm affine");
                        scalars.push(ScalarGroup { range: r.range(), mean_diag: 0.0 });
                    }
                }
                _ => {}
            }
        }
        if layers.is_empty() {
            return Err(LqfError::contract("curvature estimation needs at least one dense layer"));
        }

        let empty = || Accum {
            a: layers.iter().map(|l| DMatrix::zeros(l.a.nrows(), l.a.ncols())).collect(),
            g: layers.iter().map(|l| DMatrix::zeros(l.output, l.output)).collect(),
            diag: vec![0.0; scalars.len()],
        };
        let chunks: Vec<Accum> = (0..data.len())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut acc = empty();
                let net = model.network();
                let mut grad = vec![0.0; model.dim()];
                let mut basis = vec![0.0; model.classes()];
                for &i in idx {
                    let trace = net.trace(data.input(i))?;
                    for (l, f) in layers.iter().enumerate() {
                        let x = &trace.inputs[f.layer_id];
                        let abar = DVector::from_iterator(
                            f.a.nrows(),
                            x.iter().copied().chain(f.bias_offset.map(|_| 1.0)),
                        );
                        acc.a[l].ger(1.0, &abar, &abar, 1.0);
                    }
                    for c in 0..model.classes() {
                        basis[c] = 1.0;
                        grad.iter_mut().for_each(|v| *v = 0.0);
                        net.backward(&trace, &basis, &mut grad, |id, delta| {
                            let l = dense_pos[id].expect("dense layer");
                            let d = DVector::from_column_slice(delta);
                            acc.g[l].ger(1.0, &d, &d, 1.0);
                        })?;
                        basis[c] = 0.0;
                        for (s, group) in scalars.iter().enumerate() {
                            acc.diag[s] += grad[group.range.clone()].iter().map(|v| v * v).sum::<f64>();
                        }
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;

        let n = data.len() as f64;
        let mut total = empty();
        for chunk in chunks {
            for l in 0..layers.len() {
                total.a[l] += &chunk.a[l];
                total.g[l] += &chunk.g[l];
            }
            for s in 0..scalars.len() {
                total.diag[s] += chunk.diag[s];
            }
        }
        for (l, f) in layers.iter_mut().enumerate() {
            f.a = &total.a[l] / n;
            f.g = &total.g[l] / n;
            mirror_upper(&mut f.a);
            mirror_upper(&mut f.g);
            f.a_eig = Eig::new(&f.a);
            f.g_eig = Eig::new(&f.g);
        }
        for (s, group) in scalars.iter_mut().enumerate() {
            group.mean_diag = total.diag[s] / (n * group.range.len() as f64);
        }
        self.layers = layers;
        self.scalars = scalars;
        self.frozen = true;
        if self.requested_damping.is_none() {
            self.damping = 1e-3 * self.mean_eigenvalue();
        }
        Ok(())
    }

    /// `tr(F_kfac) / D`.
    pub fn mean_eigenvalue(&self) -> f64 {
        let dense: f64 = self.layers.iter().map(|f| f.a.trace() * f.g.trace()).sum();
        let scalar: f64 = self.scalars.iter().map(|s| s.mean_diag * s.range.len() as f64).sum();
        (dense + scalar) / self.dim as f64
    }

    /// Damped inverse applied to `v`.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.frozen {
            return Err(LqfError::NotFrozen);
        }
        check_len("preconditioned vector", self.dim, v.len())?;
        let gamma = self.damping;
        let mut out = DVector::zeros(self.dim);
        for f in &self.layers {
            let vm = f.gather(v);
            let solved = match self.mode {
                DampingMode::Factored => {
                    let pi = f.damping_balance();
                    let root = gamma.sqrt();
                    let g_inv = |x: f64| 1.0 / (x + pi * root);
                    let a_inv = |x: f64| 1.0 / (x + root / pi);
                    let left = crate::linalg::spectral_map(&f.g_eig.values, &f.g_eig.vectors, g_inv);
                    let right = crate::linalg::spectral_map(&f.a_eig.values, &f.a_eig.vectors, a_inv);
                    left * vm * right
                }
                DampingMode::Eigen => {
                    let mut rotated = f.g_eig.vectors.transpose() * vm * &f.a_eig.vectors;
                    for o in 0..rotated.nrows() {
                        for i in 0..rotated.ncols() {
                            rotated[(o, i)] /= f.g_eig.values[o] * f.a_eig.values[i] + gamma;
                        }
                    }
                    &f.g_eig.vectors * rotated * f.a_eig.vectors.transpose()
                }
            };
            f.scatter(&solved, &mut out);
        }
        for s in &self.scalars {
            let scale = 1.0 / (s.mean_diag + gamma);
            for k in s.range.clone() {
                out[k] = v[k] * scale;
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(LqfError::NumericOverflow("kfac inverse (singular factors without damping?)".into()));
        }
        Ok(out)
    }

    /// Undamped block-diagonal approximation `F_kfac` in parameter order.
    pub fn dense_matrix(&self) -> Result<DMatrix<f64>> {
        if !self.frozen {
            return Err(LqfError::NotFrozen);
        }
        guard(self.dim)?;
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for f in &self.layers {
            let k = f.width();
            for o in 0..f.output {
                for i in 0..k {
                    let row = f.index(o, i);
                    for o2 in 0..f.output {
                        let g = f.g[(o, o2)];
                        for i2 in 0..k {
                            m[(row, f.index(o2, i2))] = g * f.a[(i, i2)];
                        }
                    }
                }
            }
        }
        for s in &self.scalars {
            for k in s.range.clone() {
                m[(k, k)] = s.mean_diag;
            }
        }
        Ok(m)
    }

    /// The damped inverse operator as a dense matrix (column `j` is the image of `e_j`).
    pub fn inverse_matrix(&self) -> Result<DMatrix<f64>> {
        guard(self.dim)?;
        let mut m = DMatrix::zeros(self.dim, self.dim);
        let mut e = DVector::zeros(self.dim);
        for j in 0..self.dim {
            e[j] = 1.0;
            m.set_column(j, &self.apply_inverse(&e)?);
            e[j] = 0.0;
        }
        Ok(m)
    }

    /// `‖F_kfac − F‖_F / ‖F‖_F`.
    pub fn approximation_error(&self, problem: &LinearizedProblem) -> Result<f64> {
        check_len("problem parameter count", self.dim, problem.dim())?;
        let exact = problem.fisher()?;
        let approx = self.dense_matrix()?;
        Ok((approx - &exact).norm() / exact.norm())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.frozen {
            return Err(LqfError::NotFrozen);
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.damping.to_le_bytes());
        out.push(match self.mode {
            DampingMode::Factored => 0,
            DampingMode::Eigen => 1,
        });
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        let put_matrix = |out: &mut Vec<u8>, m: &DMatrix<f64>| {
            for row in m.row_iter() {
                for v in row.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        for f in &self.layers {
            out.extend_from_slice(&(f.layer_id as u32).to_le_bytes());
            out.extend_from_slice(&(f.weight_offset as u64).to_le_bytes());
            out.push(u8::from(f.bias_offset.is_some()));
            out.extend_from_slice(&(f.bias_offset.unwrap_or(0) as u64).to_le_bytes());
            out.extend_from_slice(&(f.input as u64).to_le_bytes());
            out.extend_from_slice(&(f.output as u64).to_le_bytes());
            put_matrix(&mut out, &f.a);
            put_matrix(&mut out, &f.g);
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for s in &self.scalars {
            out.extend_from_slice(&(s.range.start as u64).to_le_bytes());
            out.extend_from_slice(&(s.range.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.mean_diag.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(LqfError::Format(format!("unsupported curvature file version {version}")));
        }
        let dim = r.u64()? as usize;
        let damping = r.f64()?;
        let mode = match r.u8()? {
            0 => DampingMode::Factored,
            1 => DampingMode::Eigen,
            m => return Err(LqfError::Format(format!("unknown damping mode {m}"))),
        };
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let layer_id = r.u32()? as usize;
            let weight_offset = r.u64()? as usize;
            let has_bias = r.u8()? == 1;
            let bias = r.u64()? as usize;
            let input = r.u64()? as usize;
            let output = r.u64()? as usize;
            let k = input + usize::from(has_bias);
            let a = DMatrix::from_row_slice(k, k, &r.f64s(k * k)?);
            let g = DMatrix::from_row_slice(output, output, &r.f64s(output * output)?);
            let span_end = if has_bias { bias + output } else { weight_offset + input * output };
            if weight_offset + input * output > dim || span_end > dim {
                return Err(LqfError::Format("layer factors exceed parameter count".into()));
            }
            layers.push(LayerFactors {
                layer_id,
                weight_offset,
                bias_offset: has_bias.then_some(bias),
                input,
                output,
                a_eig: Eig::new(&a),
                g_eig: Eig::new(&g),
                a,
                g,
            });
        }
        let groups = r.u32()? as usize;
        let mut scalars = Vec::with_capacity(groups);
        for _ in 0..groups {
            let start = r.u64()? as usize;
            let len = r.u64()? as usize;
            if start + len > dim {
                return Err(LqfError::Format("scalar group exceeds parameter count".into()));
            }
            scalars.push(ScalarGroup { range: start..start + len, mean_diag: r.f64()? });
        }
        r.finish()?;
        Ok(KfacState {
            dim,
            layers,
            scalars,
            damping,
            mode,
            requested_damping: Some(damping),
            frozen: true,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::net::{layout_for, NetworkSpec, ParamVector};
    use crate::quadratic::assemble;

    fn single_layer(classes: usize, bias: bool, seed: u64) -> (TangentModel, LabeledDataset) {
        let spec = NetworkSpec::new(3, classes, vec![Layer::Dense { input: 3, output: classes, bias }]).unwrap();
        let model = TangentModel::new(spec.clone(), ParamVector::init(&spec, seed)).unwrap();
        let data = gen_blobs(classes.max(2), 8, 3, 2.0, seed).unwrap();
        let data = LabeledDataset::new(
            "d",
            seed,
            3,
            classes,
            (0..data.len()).flat_map(|i| data.input(i).to_vec()).collect(),
            data.labels().iter().map(|l| l % classes).collect(),
        )
        .unwrap();
        (model, data)
    }

    #[test]
    fn whitened_inputs_give_identity_factor() {
        // ±e_k scaled so the empirical mean is 0 and second moment is I.
        let spec = NetworkSpec::new(2, 1, vec![Layer::Dense { input: 2, output: 1, bias: false }]).unwrap();
        let model = TangentModel::new(spec.clone(), ParamVector::new(DVector::from_vec(vec![0.3, -0.2]), layout_for(&spec)).unwrap()).unwrap();
        let s = 2f64.sqrt();
        let data = LabeledDataset::new("w", 0, 2, 1, vec![s, 0.0, -s, 0.0, 0.0, s, 0.0, -s], vec![0; 4]).unwrap();
        let state = estimate(&model, &data, KfacConfig::default()).unwrap();
        let a = &state.layers()[0].a;
        assert!((a - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-10);
    }

    #[test]
    fn single_layer_is_exact() {
        for classes in [1, 3] {
            let (model, data) = single_layer(classes, true, 4);
            let state = estimate(&model, &data, KfacConfig::default()).unwrap();
            let problem = assemble(&model, &data, 15.0, 0.0).unwrap();
            let err = state.approximation_error(&problem).unwrap();
            assert!(err < 1e-8, "C={classes}: {err}");
        }
    }

    #[test]
    fn second_estimate_is_refused() {
        let (model, data) = single_layer(1, true, 5);
        let mut state = KfacState::new(model.dim(), KfacConfig::default());
        assert!(matches!(state.apply_inverse(&DVector::zeros(model.dim())).unwrap_err(), LqfError::NotFrozen));
        state.estimate(&model, &data).unwrap();
        assert!(matches!(state.estimate(&model, &data).unwrap_err(), LqfError::AlreadyFrozen));
    }

    fn identity_state(gamma: f64, mode: DampingMode) -> KfacState {
        let eye = DMatrix::<f64>::identity(2, 2);
        let f = LayerFactors {
            layer_id: 0,
            weight_offset: 0,
            bias_offset: None,
            input: 2,
            output: 2,
            a_eig: Eig::new(&eye),
            g_eig: Eig::new(&eye),
            a: eye.clone(),
            g: eye,
        };
        KfacState {
            dim: 4,
            layers: vec![f],
            scalars: vec![],
            damping: gamma,
            mode,
            requested_damping: Some(gamma),
            frozen: true,
        }
    }

    #[test]
    fn identity_factors() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let gamma: f64 = 0.04;
        let out = identity_state(gamma, DampingMode::Factored).apply_inverse(&v).unwrap();
        let expected = &v / (1.0 + gamma.sqrt()).powi(2);
        assert!((out - expected).norm() < 1e-14);
        let out = identity_state(0.0, DampingMode::Factored).apply_inverse(&v).unwrap();
        assert!((out - &v).norm() < 1e-15);
        let out = identity_state(gamma, DampingMode::Eigen).apply_inverse(&v).unwrap();
        assert!((out - &v / (1.0 + gamma)).norm() < 1e-14);
        let zero = identity_state(gamma, DampingMode::Factored).apply_inverse(&DVector::zeros(4)).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_output_inverse_matches_dense_solve() {
        let (model, data) = single_layer(1, true, 6);
        let problem = assemble(&model, &data, 15.0, 0.0).unwrap();
        let f = problem.fisher().unwrap();
        let v = DVector::from_fn(model.dim(), |k, _| (k as f64 + 0.5).sin());
        for gamma in [1e-2, 1e-4] {
            let state = estimate(&model, &data, KfacConfig { damping: Some(gamma), mode: DampingMode::Eigen }).unwrap();
            let mut damped = f.clone();
            for k in 0..model.dim() {
                damped[(k, k)] += gamma;
            }
            let direct = damped.cholesky().unwrap().solve(&v);
            let out = state.apply_inverse(&v).unwrap();
            let rel = (&out - &direct).norm() / direct.norm();
            assert!(rel < 1e-6, "gamma {gamma}: {rel}");
        }
    }

    #[test]
    fn factored_damping_split_deviates_from_dense_solve() {
        // Only the damping split differs from the exact damped inverse here.
        let (model, data) = single_layer(1, true, 6);
        let problem = assemble(&model, &data, 15.0, 0.0).unwrap();
        let mut damped = problem.fisher().unwrap();
        let gamma = 1e-4;
        for k in 0..model.dim() {
            damped[(k, k)] += gamma;
        }
        let v = DVector::from_fn(model.dim(), |k, _| (k as f64 + 0.5).sin());
        let direct = damped.cholesky().unwrap().solve(&v);
        let state = estimate(&model, &data, KfacConfig { damping: Some(gamma), mode: DampingMode::Factored }).unwrap();
        let rel = (state.apply_inverse(&v).unwrap() - &direct).norm() / direct.norm();
        assert!(rel.is_finite() && rel < 0.5, "{rel}");
    }

    #[test]
    fn dense_matrix_is_kronecker_and_symmetric() {
        let (model, data) = single_layer(2, true, 7);
        let state = estimate(&model, &data, KfacConfig::default()).unwrap();
        let m = state.dense_matrix().unwrap();
        assert_eq!(m, m.transpose());
        let f = &state.layers()[0];
        // W[1, 2] against bias[0]: G[1,0] * A[2, 3]
        let row = f.index(1, 2);
        let col = f.index(0, 3);
        assert_eq!(m[(row, col)], f.g[(1, 0)] * f.a[(2, 3)]);
    }

    #[test]
    fn inverse_is_spd_and_linear() {
        let spec = NetworkSpec::new(
            4,
            3,
            vec![
                Layer::FrozenNorm { mean: vec![0.0; 4], var: vec![1.5; 4], affine: true },
                Layer::dense(4, 5),
                Layer::leaky(0.1),
                Layer::dense(5, 3),
            ],
        )
        .unwrap();
        let model = TangentModel::new(spec.clone(), ParamVector::init(&spec, 3)).unwrap();
        let data = gen_blobs(3, 6, 4, 3.0, 2).unwrap();
        for mode in [DampingMode::Factored, DampingMode::Eigen] {
            let state = estimate(&model, &data, KfacConfig { damping: None, mode }).unwrap();
            assert!(state.damping() > 0.0);
            let d = model.dim();
            let u = DVector::from_fn(d, |k, _| (k as f64 * 0.7).sin());
            let v = DVector::from_fn(d, |k, _| (k as f64 * 1.3).cos());
            let pu = state.apply_inverse(&u).unwrap();
            let pv = state.apply_inverse(&v).unwrap();
            let lin = state.apply_inverse(&(&u * 2.0 - &v * 0.5)).unwrap();
            assert!((&lin - (&pu * 2.0 - &pv * 0.5)).norm() <= 1e-12 * lin.norm());
            assert!(u.dot(&pu) > 0.0);
            let (a, b) = (u.dot(&pv), pu.dot(&v));
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn deep_net_error_is_reported_in_range() {
        let spec = NetworkSpec::mlp(3, &[6], 2, 0.1).unwrap();
        let model = TangentModel::new(spec.clone(), ParamVector::init(&spec, 8)).unwrap();
        let data = gen_blobs(2, 10, 3, 3.0, 8).unwrap();
        let state = estimate(&model, &data, KfacConfig::default()).unwrap();
        let problem = assemble(&model, &data, 15.0, 0.0).unwrap();
        let err = state.approximation_error(&problem).unwrap();
        assert!((0.0..2.0).contains(&err), "{err}");
    }

    #[test]
    fn bytes_round_trip() {
        let spec = NetworkSpec::mlp(3, &[4], 2, 0.1).unwrap();
        let model = TangentModel::new(spec.clone(), ParamVector::init(&spec, 1)).unwrap();
        let data = gen_blobs(2, 5, 3, 3.0, 1).unwrap();
        let state = estimate(&model, &data, KfacConfig::default()).unwrap();
        let bytes = state.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LQFK");
        let back = KfacState::from_bytes(&bytes).unwrap();
        let v = DVector::from_fn(model.dim(), |k, _| k as f64);
        assert_eq!(back.apply_inverse(&v).unwrap(), state.apply_inverse(&v).unwrap());
        assert!(KfacState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
