use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};

/// A row-major collection of points in `R^D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("point dimension must be at least 1"));
        }
        if data.len() % dim != 0 {
            return Err(invalid("flat coordinate buffer is not a multiple of the dimension"));
        }
        Ok(PointSet { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        PointSet { dim, data: Vec::new() }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut set = PointSet::new(dim, Vec::with_capacity(rows.len() * dim))?;
        for r in rows {
            set.push(r.as_ref())?;
        }
        Ok(set)
    }

    /// One-dimensional points.
    pub fn from_scalars(xs: &[f64]) -> Self {
        PointSet { dim: 1, data: xs.to_vec() }
    }

    /// `count` equally spaced scalars on `[lo, hi]`, endpoints included.
    pub fn linspace(lo: f64, hi: f64, count: usize) -> Self {
        PointSet::from_scalars(&linspace(lo, hi, count))
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        check_dim(self.dim, row.len())?;
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Points selected by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> PointSet {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        PointSet { dim: self.dim, data }
    }

    /// Pairs of rows that coincide exactly.
    pub fn duplicate_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                if self.row(i) == self.row(j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => alloc::vec![0.5 * (lo + hi)],
        _ => {
            let step = (hi - lo) / (count - 1) as f64;
            (0..count)
                .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

/// Tensor grid of the given per-axis coordinate lists, first axis varying slowest.
pub fn tensor_grid(axes: &[Vec<f64>]) -> Result<PointSet> {
    let dim = axes.len();
    let mut set = PointSet::empty(dim.max(1));
    if dim == 0 {
        return Err(invalid("tensor grid needs at least one axis"));
    }
    let total: usize = axes.iter().map(Vec::len).product();
    let mut idx = alloc::vec![0usize; dim];
    let mut row = alloc::vec![0.0; dim];
    for _ in 0..total {
        for d in 0..dim {
            row[d] = axes[d][idx[d]];
        }
        set.push(&row)?;
        for d in (0..dim).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(set)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_hits_endpoints() {
        let v = linspace(1.0, 3.0, 5);
        assert_eq!(v, alloc::vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(linspace(0.0, 1.0, 1), alloc::vec![0.5]);
    }

    #[test]
    fn tensor_grid_orders_first_axis_slowest() {
        let g = tensor_grid(&[alloc::vec![0.0, 1.0], alloc::vec![5.0, 6.0, 7.0]]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.row(0), &[0.0, 5.0]);
        assert_eq!(g.row(1), &[0.0, 6.0]);
        assert_eq!(g.row(3), &[1.0, 5.0]);
    }

    #[test]
    fn rejects_ragged_buffers() {
        assert!(PointSet::new(2, alloc::vec![1.0, 2.0, 3.0]).is_err());
        assert!(PointSet::new(0, alloc::vec![]).is_err());
    }

    #[test]
    fn finds_duplicates() {
        let p = PointSet::from_scalars(&[0.0, 1.0, 0.0]);
        assert_eq!(p.duplicate_pairs(), alloc::vec![(0, 2)]);
    }
}
