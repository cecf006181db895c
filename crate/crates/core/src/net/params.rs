//! Flat parameter vectors and their on-disk layout.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{Layer, NetworkSpec};
use crate::error::{check_finite, LqfError, Result};

const MAGIC: &[u8; 4] = b"LQFW";
const VERSION: u32 = 1;

/// One tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutRecord {
    pub layer_id: usize,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutRecord {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Layout dictated by a network: dense weight `[out, in]` (row-major) then
/// bias `[out]`; affine norm scale `[dim]` then shift `[dim]`.
pub fn layout_for(spec: &NetworkSpec) -> Vec<LayoutRecord> {
    let mut records = Vec::new();
    let mut offset = 0;
    let mut current = spec.input_dim;
    let mut push = |layer_id: usize, shape: Vec<usize>, offset: &mut usize| {
        let rec = LayoutRecord {
            layer_id,
            offset: *offset,
            shape,
        };
        *offset += rec.len();
        records.push(rec);
    };
    for (id, layer) in spec.layers.iter().enumerate() {
        match layer {
            Layer::Dense { input, output, bias } => {
                push(id, vec![*output, *input], &mut offset);
                if *bias {
                    push(id, vec![*output], &mut offset);
                }
                current = *output;
            }
            Layer::FrozenNorm { affine, .. } => {
                if *affine {
                    push(id, vec![current], &mut offset);
                    push(id, vec![current], &mut offset);
                }
            }
            Layer::BilinearPool { channels } => current = channels * channels,
            Layer::MeanPool { channels } => current = *channels,
            Layer::Activation { .. } => {}
        }
    }
    records
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: DVector<f64>,
    pub layout: Vec<LayoutRecord>,
}

impl ParamVector {
    pub fn new(values: DVector<f64>, layout: Vec<LayoutRecord>) -> Result<Self> {
        let pv = ParamVector { values, layout };
        pv.check_layout()?;
        check_finite("parameter vector", pv.values.as_slice())?;
        Ok(pv)
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layout = layout_for(spec);
        let d = layout.iter().map(LayoutRecord::len).sum();
        ParamVector {
            values: DVector::zeros(d),
            layout,
        }
    }

    /// He-normal weights, zero biases, unit scale and zero shift for norms.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pv = Self::zeros(spec);
        let mut seen_norm_scale = None;
        for rec in &pv.layout {
            match &spec.layers[rec.layer_id] {
                Layer::Dense { input, .. } if rec.shape.len() == 2 => {
                    let std = (2.0 / *input as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("valid std");
                    for k in rec.range() {
                        pv.values[k] = normal.sample(&mut rng);
                    }
                }
                Layer::FrozenNorm { .. }
                    // First record of an affine norm is the scale.
                    if seen_norm_scale != Some(rec.layer_id) => {
                        seen_norm_scale = Some(rec.layer_id);
                        for k in rec.range() {
                            pv.values[k] = 1.0;
                        }
                    }
                _ => {}
            }
        }
        pv
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        self.layout == layout_for(spec)
    }

    fn check_layout(&self) -> Result<()> {
        let mut expected_offset = 0;
        for rec in &self.layout {
            if rec.offset != expected_offset {
                return Err(LqfError::contract(format!(
                    "layout record for layer {} starts at {} but previous extent ends at {}",
                    rec.layer_id, rec.offset, expected_offset
                )));
            }
            expected_offset += rec.len();
        }
        if expected_offset != self.values.len() {
            return Err(LqfError::contract(format!(
                "layout covers {expected_offset} values but vector has {}",
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dim());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.layout.len() as u32).to_le_bytes());
        for rec in &self.layout {
            out.extend_from_slice(&(rec.layer_id as u32).to_le_bytes());
            out.extend_from_slice(&(rec.offset as u64).to_le_bytes());
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &d in &rec.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(LqfError::Format(format!("unsupported parameter file version {version}")));
        }
        let d = r.u64()? as usize;
        let values = r.f64s(d)?;
        let count = r.u32()? as usize;
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let layer_id = r.u32()? as usize;
            let offset = r.u64()? as usize;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            layout.push(LayoutRecord {
                layer_id,
                offset,
                shape,
            });
        }
        r.finish()?;
        ParamVector::new(DVector::from_vec(values), layout)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Little-endian cursor used by the binary formats in this crate.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(LqfError::Format(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(LqfError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| self.pos + b > self.bytes.len()) {
            return Err(LqfError::Format(format!("declared {n} values exceed file size")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(LqfError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
