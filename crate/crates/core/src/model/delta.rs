use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{snap, CanonicalSpace, GaussianFrame, GaussianPrimitive, ShDegree, EPS_SPARSE};
use crate::error::{Error, Result};

/// Sparse per-primitive parameter differences.
///
/// Blocks use the same layout as a primitive's parameter vector and live in
/// pre-activation space. Values are kept on the 2^-32 lattice so that sums are
/// exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTensor {
    base_count: usize,
    sh_degree: ShDegree,
    entries: BTreeMap<u32, Vec<f64>>,
}

fn is_negligible(block: &[f64]) -> bool {
    block.iter().all(|v| v.abs() <= EPS_SPARSE)
}

impl DeltaTensor {
    pub fn empty(base_count: usize, sh_degree: ShDegree) -> Self {
        DeltaTensor {
            base_count,
            sh_degree,
            entries: BTreeMap::new(),
        }
    }

    /// Builds a delta from a dense `base_count * param_len` buffer, omitting
    /// negligible blocks.
    pub fn from_dense(base_count: usize, sh_degree: ShDegree, dense: &[f64]) -> Result<Self> {
        let len = sh_degree.param_len();
        if dense.len() != base_count * len {
            return Err(Error::structural(format!(
                "dense delta has {} values, expected {}",
                dense.len(),
                base_count * len
            )));
        }
        let mut d = DeltaTensor::empty(base_count, sh_degree);
        for (i, chunk) in dense.chunks_exact(len).enumerate() {
            d.insert(i as u32, chunk.to_vec())?;
        }
        Ok(d)
    }

    /// Inserts (or replaces) a block. Values are snapped; a block that is
    /// negligible after snapping removes the entry instead.
    pub fn insert(&mut self, index: u32, block: Vec<f64>) -> Result<()> {
        if index as usize >= self.base_count {
            return Err(Error::structural(format!(
                "delta index {index} out of range for {} primitives",
                self.base_count
            )));
        }
        if block.len() != self.param_len() {
            return Err(Error::structural(format!(
                "delta block has {} values, expected {}",
                block.len(),
                self.param_len()
            )));
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite delta component at primitive {index}"
            )));
        }
        let block: Vec<f64> = block.into_iter().map(snap).collect();
        if is_negligible(&block) {
            self.entries.remove(&index);
        } else {
            self.entries.insert(index, block);
        }
        Ok(())
    }

    pub fn base_count(&self) -> usize {
        self.base_count
    }

    pub fn sh_degree(&self) -> ShDegree {
        self.sh_degree
    }

    pub fn param_len(&self) -> usize {
        self.sh_degree.param_len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u32) -> Option<&[f64]> {
        self.entries.get(&index).map(Vec::as_slice)
    }

    /// Entries in increasing primitive index.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = (u32, &[f64])> + '_ {
        self.entries.iter().map(|(&i, b)| (i, b.as_slice()))
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn negated(&self) -> DeltaTensor {
        DeltaTensor {
            entries: self
                .entries
                .iter()
                .map(|(&i, b)| (i, b.iter().map(|v| -v).collect()))
                .collect(),
            ..self.clone()
        }
    }

    /// Sum of absolute values of every component.
    pub fn l1_norm(&self) -> f64 {
        self.entries.values().flatten().map(|v| v.abs()).sum()
    }

    /// Copy without the entries at `indices`.
    pub fn without(&self, indices: &[u32]) -> DeltaTensor {
        let mut out = self.clone();
        for i in indices {
            out.entries.remove(i);
        }
        out
    }

    /// Copy keeping only the entries at `indices`.
    pub fn only(&self, indices: &[u32]) -> DeltaTensor {
        let mut out = DeltaTensor::empty(self.base_count, self.sh_degree);
        for i in indices {
            if let Some(b) = self.entries.get(i) {
                out.entries.insert(*i, b.clone());
            }
        }
        out
    }

    fn check_shape(&self, other: &DeltaTensor) -> Result<()> {
        if self.base_count != other.base_count || self.sh_degree != other.sh_degree {
            return Err(Error::structural(format!(
                "delta shapes differ: {}x{} vs {}x{}",
                self.base_count,
                self.param_len(),
                other.base_count,
                other.param_len()
            )));
        }
        Ok(())
    }

    /// Componentwise sum over the union of indices.
    pub fn add(&self, other: &DeltaTensor) -> Result<DeltaTensor> {
        self.check_shape(other)?;
        let mut out = self.clone();
        for (&i, b) in &other.entries {
            match out.entries.get_mut(&i) {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(b) {
                        *a = snap(*a + v);
                    }
                    if is_negligible(acc) {
                        out.entries.remove(&i);
                    }
                }
                None => {
                    out.entries.insert(i, b.clone());
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &DeltaTensor) -> Result<DeltaTensor> {
        self.add(&other.negated())
    }

    /// Dense `base_count * param_len` view.
    pub fn to_dense(&self) -> Vec<f64> {
        let len = self.param_len();
        let mut out = vec![0.0; self.base_count * len];
        for (&i, b) in &self.entries {
            let s = i as usize * len;
            out[s..s + len].copy_from_slice(b);
        }
        out
    }
}

/// Sums a list of deltas sharing one shape. The empty list yields the
/// identity for that shape.
pub fn compose_deltas(
    base_count: usize,
    sh_degree: ShDegree,
    deltas: &[DeltaTensor],
) -> Result<DeltaTensor> {
    deltas
        .iter()
        .try_fold(DeltaTensor::empty(base_count, sh_degree), |acc, d| acc.add(d))
}

/// Shifts every touched primitive of `base` by its delta block.
pub fn apply_to_frame(base: &GaussianFrame, delta: &DeltaTensor) -> Result<GaussianFrame> {
    if delta.base_count != base.len() {
        return Err(Error::structural(format!(
            "delta for {} primitives applied to frame of {}",
            delta.base_count,
            base.len()
        )));
    }
    if delta.sh_degree != base.sh_degree() {
        return Err(Error::structural("delta and frame SH degrees differ"));
    }
    let degree = base.sh_degree();
    let len = degree.param_len();
    let mut out = base.clone();
    let mut buf = vec![0.0; len];
    for (&i, block) in &delta.entries {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite delta component at primitive {i}"
            )));
        }
        let p = &mut out.primitives_mut()[i as usize];
        p.write_params(degree, &mut buf);
        for (v, d) in buf.iter_mut().zip(block) {
            *v = snap(*v + d);
        }
        let next = GaussianPrimitive::from_params(degree, &buf);
        next.validate(degree)
            .map_err(|e| Error::validation(format!("primitive {i} after delta: {e}")))?;
        *p = next;
    }
    Ok(out)
}

/// Reconstructs a frame of the space's group.
pub fn apply_delta(space: &CanonicalSpace, delta: &DeltaTensor) -> Result<GaussianFrame> {
    apply_to_frame(space.frame(), delta)
}

/// Delta taking `a` to `b`, in parameter space.
pub fn diff_frames(a: &GaussianFrame, b: &GaussianFrame) -> Result<DeltaTensor> {
    if a.len() != b.len() {
        return Err(Error::structural(format!(
            "frames differ in primitive count: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.sh_degree() != b.sh_degree() {
        return Err(Error::structural("frames differ in SH degree"));
    }
    let degree = a.sh_degree();
    let len = degree.param_len();
    let mut pa = vec![0.0; len];
    let mut pb = vec![0.0; len];
    let mut out = DeltaTensor::empty(a.len(), degree);
    for (i, (x, y)) in a.primitives().iter().zip(b.primitives()).enumerate() {
        x.write_params(degree, &mut pa);
        y.write_params(degree, &mut pb);
        let block: Vec<f64> = pa.iter().zip(&pb).map(|(u, v)| snap(*v) - snap(*u)).collect();
        out.insert(i as u32, block)?;
    }
    Ok(out)
}
