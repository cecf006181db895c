//! Datasets: synthetic generators, CSV ingestion and k-shot subsampling.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LqfError, Result};
use crate::net::{NetworkSpec, ParamVector};
use crate::trainer::{train_nonlinear, NonlinearConfig};

/// Labeled inputs stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        seed: u64,
        dim: usize,
        classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(LqfError::EmptyDataset);
        }
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(LqfError::contract(format!(
                "{} input values do not form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(LqfError::LabelOutOfRange { label, classes });
        }
        crate::error::check_finite("dataset inputs", &inputs)?;
        Ok(LabeledDataset {
            name: name.into(),
            seed,
            dim,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.inputs.chunks(self.dim).zip(self.labels.iter().copied())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(LqfError::IndexOutOfRange { index: i, size: self.len() });
            }
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(self.name.clone(), self.seed, self.dim, self.classes, inputs, labels)
    }

    pub fn without(&self, drop: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|i| !drop.contains(i)).collect();
        self.subset(&keep)
    }

    /// First `n` rows.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            name: self.name.clone(),
            n: self.len(),
            dim: self.dim,
            classes: self.classes,
            seed: self.seed,
        }
    }

    /// Header `f0,…,f{d−1},label`; floats use shortest round-trip decimals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("f{k}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_io)?;
        for (x, y) in self.iter() {
            let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            row.push(y.to_string());
            w.write_record(&row).map_err(csv_io)?;
        }
        let bytes = w.into_inner().map_err(|e| LqfError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses the CSV format; `classes` is one more than the largest label.
    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| LqfError::Malformed { line: 1, message: e.to_string() })?
            .clone();
        let dim = header.len().checked_sub(1).filter(|&d| d > 0).ok_or(LqfError::Malformed {
            line: 1,
            message: "header needs at least one feature and a label column".into(),
        })?;
        for (k, field) in header.iter().enumerate() {
            let want = if k == dim { "label".to_string() } else { format!("f{k}") };
            if field.trim() != want {
                return Err(LqfError::Malformed {
                    line: 1,
                    message: format!("column {k} is '{field}', expected '{want}'"),
                });
            }
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (row_idx, record) in rdr.records().enumerate() {
            let line = row_idx + 2;
            let record = record.map_err(|e| LqfError::Malformed { line, message: e.to_string() })?;
            if record.len() != dim + 1 {
                return Err(LqfError::Malformed {
                    line,
                    message: format!("expected {} fields, found {}", dim + 1, record.len()),
                });
            }
            for (k, field) in record.iter().take(dim).enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| LqfError::Malformed {
                    line,
                    message: format!("feature f{k} '{field}' is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(LqfError::Malformed { line, message: format!("feature f{k} is not finite") });
                }
                inputs.push(v);
            }
            let label: usize = record[dim].trim().parse().map_err(|_| LqfError::Malformed {
                line,
                message: format!("label '{}' is not a non-negative integer", &record[dim]),
            })?;
            labels.push(label);
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        LabeledDataset::new(name, 0, dim, classes, inputs, labels)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Writes `<stem>.json` next to the CSV.
    pub fn save_manifest(&self, csv_path: &Path) -> Result<()> {
        let path = csv_path.with_extension("json");
        fs::write(path, serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes"))?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> LqfError {
    LqfError::Io(std::io::Error::other(e.to_string()))
}

pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path)?;
    let name = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    LabeledDataset::from_csv(&name, &text)
}

/// Gaussian class clusters with unit within-class variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobTask {
    pub means: Vec<Vec<f64>>,
}

impl BlobTask {
    /// Class means at mutual distance `separation` when `dim ≥ classes`
    /// (scaled basis vectors); otherwise evenly spaced on a circle (or a line
    /// for `dim = 1`) with neighbouring means `separation` apart.
    pub fn new(classes: usize, dim: usize, separation: f64) -> Self {
        let means = (0..classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                if dim >= classes {
                    m[c] = separation / std::f64::consts::SQRT_2;
                } else if dim == 1 {
                    m[0] = separation * c as f64;
                } else {
                    let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                    let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                    m[0] = radius * angle.cos();
                    m[1] = radius * angle.sin();
                }
                m
            })
            .collect();
        BlobTask { means }
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Related task: every mean moved by a seeded Gaussian offset of scale `shift`.
    pub fn shifted(&self, shift: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = self
            .means
            .iter()
            .map(|m| {
                m.iter()
                    .map(|v| v + shift * Distribution::<f64>::sample(&StandardNormal, &mut rng) / (m.len() as f64).sqrt())
                    .collect()
            })
            .collect();
        BlobTask { means }
    }

    /// Samples are interleaved by class: row `i` has label `i % classes`.
    pub fn sample(&self, per_class: usize, seed: u64, name: &str) -> Result<LabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (self.classes(), self.dim());
        let mut inputs = Vec::with_capacity(per_class * c * d);
        let mut labels = Vec::with_capacity(per_class * c);
        for _ in 0..per_class {
            for (label, mean) in self.means.iter().enumerate() {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    inputs.push(m + z);
                }
                labels.push(label);
            }
        }
        LabeledDataset::new(name, seed, d, c, inputs, labels)
    }
}

pub fn gen_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(LqfError::contract("classes, per_class and dim must be positive"));
    }
    if !(separation >= 0.0) {
        return Err(LqfError::contract("separation must be non-negative"));
    }
    BlobTask::new(classes, dim, separation).sample(per_class, seed, "blobs")
}

/// Exactly `k` rows per class, drawn without replacement; rows keep their
/// original relative order.
pub fn kshot_subsample(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k * dataset.classes);
    for class in 0..dataset.classes {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.label(i) == class).collect();
        if members.len() < k {
            return Err(LqfError::contract(format!(
                "class {class} has {} samples, fewer than k = {k}",
                members.len()
            )));
        }
        chosen.extend(sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    let mut out = dataset.subset(&chosen)?;
    out.name = format!("{}-{k}shot", dataset.name);
    out.seed = seed;
    Ok(out)
}

/// Trains a nonlinear network on a related task and returns its weights as a
/// linearization point for `spec`.
///
/// When the pretraining task has a different class count, the body is trained
/// with a head of matching width and the head of `spec` is freshly initialized.
pub fn gen_pretrained_base(
    spec: &NetworkSpec,
    pretrain_task: &LabeledDataset,
    epochs: usize,
    seed: u64,
) -> Result<ParamVector> {
    if pretrain_task.dim != spec.input_dim {
        return Err(LqfError::contract(format!(
            "pretraining inputs have dimension {}, network expects {}",
            pretrain_task.dim, spec.input_dim
        )));
    }
    let init = ParamVector::init(spec, seed);
    if epochs == 0 {
        return Ok(init);
    }
    let source_spec = spec.with_output_dim(pretrain_task.classes)?;
    let source_init = ParamVector::init(&source_spec, seed);
    let config = NonlinearConfig {
        epochs,
        seed,
        ..NonlinearConfig::pretraining()
    };
    let trained = train_nonlinear(&source_spec, &source_init, pretrain_task, &config)?.params;
    if source_spec == *spec {
        return Ok(trained);
    }
    let head = spec.head_layer().expect("validated spec has a head");
    let mut out = init;
    for (dst, src) in out.layout.iter().zip(&trained.layout) {
        if dst.layer_id != head {
            let range = dst.range();
            out.values.rows_mut(range.start, range.len()).copy_from(&trained.values.rows(src.offset, src.len()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_seeded_and_balanced() {
        let a = gen_blobs(3, 10, 4, 5.0, 42).unwrap();
        let b = gen_blobs(3, 10, 4, 5.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
        assert_ne!(a, gen_blobs(3, 10, 4, 5.0, 43).unwrap());
    }

    #[test]
    fn blob_means_have_requested_separation() {
        for (classes, dim) in [(3, 4), (5, 2), (2, 1)] {
            let task = BlobTask::new(classes, dim, 6.0);
            let d: f64 = task.means[0].iter().zip(&task.means[1]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((d.sqrt() - 6.0).abs() < 1e-12, "{classes} {dim}");
        }
        let zero = BlobTask::new(4, 3, 0.0);
        assert!(zero.means.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn csv_round_trip_is_exact_and_stable() {
        let ds = gen_blobs(2, 5, 3, 2.0, 1).unwrap();
        let text = ds.to_csv().unwrap();
        assert!(text.starts_with("f0,f1,f2,label\n"));
        let back = LabeledDataset::from_csv("blobs", &text).unwrap();
        for i in 0..ds.len() {
            assert_eq!(back.input(i), ds.input(i));
            assert_eq!(back.label(i), ds.label(i));
        }
        assert_eq!(back.to_csv().unwrap(), text);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let text = "f0,f1,label\n1.0,2.0,0\n1.0,oops,1\n";
        match LabeledDataset::from_csv("x", text).unwrap_err() {
            LqfError::Malformed { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let short = "f0,f1,label\n1.0,0\n";
        assert!(matches!(
            LabeledDataset::from_csv("x", short).unwrap_err(),
            LqfError::Malformed { line: 2, .. }
        ));
        assert!(LabeledDataset::from_csv("x", "a,b\n1,0\n").is_err());
    }

    #[test]
    fn kshot_examples() {
        let ds = gen_blobs(3, 6, 2, 3.0, 5).unwrap();
        let one = kshot_subsample(&ds, 1, 9).unwrap();
        assert_eq!(one.len(), 3);
        assert_eq!(one.class_counts(), vec![1, 1, 1]);
        let full = kshot_subsample(&ds, 6, 9).unwrap();
        assert_eq!(full.labels(), ds.labels());
        for i in 0..ds.len() {
            assert_eq!(full.input(i), ds.input(i));
        }
        assert!(kshot_subsample(&ds, 7, 9).is_err());
        assert_eq!(kshot_subsample(&ds, 2, 4).unwrap(), kshot_subsample(&ds, 2, 4).unwrap());
    }

    #[test]
    fn rejects_bad_labels_and_empty() {
        assert!(matches!(
            LabeledDataset::new("x", 0, 1, 2, vec![0.0], vec![2]).unwrap_err(),
            LqfError::LabelOutOfRange { label: 2, classes: 2 }
        ));
        assert!(matches!(
            LabeledDataset::new("x", 0, 1, 2, vec![], vec![]).unwrap_err(),
            LqfError::EmptyDataset
        ));
    }

    #[test]
    fn pretrained_base_with_zero_epochs_is_init() {
        let spec = NetworkSpec::mlp(2, &[4], 3, 0.1).unwrap();
        let task = gen_blobs(4, 5, 2, 4.0, 0).unwrap();
        let w = gen_pretrained_base(&spec, &task, 0, 3).unwrap();
        assert_eq!(w, ParamVector::init(&spec, 3));
        let trained = gen_pretrained_base(&spec, &task, 3, 3).unwrap();
        assert_eq!(trained, gen_pretrained_base(&spec, &task, 3, 3).unwrap());
        assert!(trained.matches(&spec));
        assert_ne!(trained, w);
    }
}
