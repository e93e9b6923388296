//! The dense proposal set over `N` clips and the `N × N × c` moment feature
//! map built from it. Clip indices are 1-based and intervals inclusive
//! everywhere.

use crate::datastore::ClipFeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{Mask, Real, Tensor};

/// Contiguous clip span `[start, end]`, 1-based and inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Proposal {
    start: usize,
    end: usize,
}

impl Proposal {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start < 1 || start > end {
            return Err(Error::InvalidInterval(start, end));
        }
        Ok(Proposal { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The `k`-th proposal (0-based) in row-major order over `N` clips.
    pub fn nth(n: usize, mut k: usize) -> Self {
        for start in 1..=n {
            let row = n - start + 1;
            if k < row {
                return Proposal {
                    start,
                    end: start + k,
                };
            }
            k -= row;
        }
        panic!("proposal index out of range for N={n}");
    }
}

/// All `(i, j)` with `1 ≤ i ≤ j ≤ N`, row-major.
pub fn enumerate_proposals(n: usize) -> Result<Vec<Proposal>> {
    if n == 0 {
        return Err(Error::InvalidN(n));
    }
    Ok((1..=n)
        .flat_map(|start| (start..=n).map(move |end| Proposal { start, end }))
        .collect())
}

/// Upper triangle including the diagonal.
pub fn validity_mask(n: usize) -> Result<Mask> {
    if n == 0 {
        return Err(Error::InvalidN(n));
    }
    Mask::new(n, (0..n * n).map(|c| c / n <= c % n).collect())
}

/// Moment feature map: `data[i, j, :]` holds the aggregated feature of
/// clips `i..=j` (stored 0-based), zero wherever `i > j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentMap<T> {
    pub data: Tensor<T>,
    pub mask: Mask,
}

impl<T: Real> MomentMap<T> {
    pub fn n(&self) -> usize {
        self.mask.n()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Feature of proposal `(start, end)`, 1-based.
    pub fn cell(&self, start: usize, end: usize) -> &[T] {
        let (n, c) = (self.n(), self.channels());
        let off = ((start - 1) * n + (end - 1)) * c;
        &self.data.data()[off..off + c]
    }
}

/// Builds the map cell by cell with an arbitrary aggregator over the clip
/// rows of each proposal.
pub fn build_moment_map<T, F>(features: &ClipFeatureSequence, mut aggregate: F) -> Result<MomentMap<T>>
where
    T: Real,
    F: FnMut(&[&[f32]]) -> Result<Vec<T>>,
{
    let n = features.n_clips();
    let mut channels = None;
    let mut cells = Vec::new();
    for p in enumerate_proposals(n)? {
        let rows: Vec<&[f32]> = (p.start..=p.end).map(|t| features.clip(t)).collect();
        let v = aggregate(&rows)?;
        match channels {
            None => channels = Some(v.len()),
            Some(c) if c != v.len() => {
                return Err(Error::ShapeMismatch(format!(
                    "aggregator returned {} channels for {:?}, expected {c}",
                    v.len(),
                    p
                )))
            }
            _ => {}
        }
        cells.push((p, v));
    }
    let c = channels.unwrap_or(0);
    if c == 0 {
        return Err(Error::ShapeMismatch("aggregator returned an empty vector".into()));
    }
    let mut data = Tensor::zeros(&[n, n, c]);
    for (p, v) in cells {
        let off = ((p.start - 1) * n + (p.end - 1)) * c;
        data.data_mut()[off..off + c].copy_from_slice(&v);
    }
    Ok(MomentMap {
        data,
        mask: validity_mask(n)?,
    })
}
