//! Square binary masks and their run-length text encoding.
//!
//! RLE format: run lengths over the row-major flattened grid, separated by
//! commas, alternating zero-runs and one-runs and always starting with the
//! count of zeros (possibly `0`). `"0,4"` is four ones on a 2x2 grid.

use crate::{Error, Result};

/// A `g x g` binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    side: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn empty(side: usize) -> Self {
        Mask { side, cells: vec![false; side * side] }
    }

    pub fn from_bits(side: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), side * side, "bit count must be side^2");
        Mask { side, cells: bits.to_vec() }
    }

    /// Build from row-major cell indices.
    pub fn from_cells(side: usize, cells: &[usize]) -> Self {
        let mut m = Mask::empty(side);
        for &c in cells {
            m.cells[c] = true;
        }
        m
    }

    /// Threshold a probability grid at 0.5.
    pub fn from_probs(side: usize, probs: &[f64]) -> Self {
        assert_eq!(probs.len(), side * side);
        Mask { side, cells: probs.iter().map(|&p| p >= 0.5).collect() }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|&b| !b)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.cells[row * self.side + col] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Row-major indices of the set cells.
    pub fn one_indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a |= b;
        }
    }

    /// Union of a list of same-size masks; `None` when the list is empty.
    pub fn union_of(masks: &[Mask]) -> Option<Mask> {
        let mut it = masks.iter();
        let first = it.next()?;
        let mut out = first.clone();
        for m in it {
            out.union_with(m);
        }
        Some(out)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.cells.iter().zip(&other.cells).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.cells.iter().zip(&other.cells).filter(|(a, b)| **a || **b).count()
    }

    /// Run-length encode (see module docs).
    pub fn to_rle(&self) -> String {
        let mut runs: Vec<usize> = Vec::new();
        let mut current = false;
        let mut count = 0usize;
        for &bit in &self.cells {
            if bit == current {
                count += 1;
            } else {
                runs.push(count);
                current = bit;
                count = 1;
            }
        }
        runs.push(count);
        runs.iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Decode the canonical RLE form; counts must alternate starting with
    /// zeros, contain no interior zero run, and sum to the grid size.
    pub fn from_rle(side: usize, rle: &str) -> Result<Mask> {
        let mut counts = Vec::new();
        for part in rle.split(',') {
            let n: usize = part
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("bad RLE count {part:?}")))?;
            counts.push(n);
        }
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 && i != 0 {
                return Err(Error::Dataset("interior zero run in RLE".into()));
            }
        }
        let total: usize = counts.iter().sum();
        if total != side * side {
            return Err(Error::Dataset(format!(
                "RLE covers {} cells, expected {}",
                total,
                side * side
            )));
        }
        let mut cells = Vec::with_capacity(total);
        let mut value = false;
        for &c in &counts {
            cells.extend(std::iter::repeat(value).take(c));
            value = !value;
        }
        Ok(Mask { side, cells })
    }
}

/// Intersection over union with the empty-set conventions: 1 when both masks
/// are empty, 0 when exactly one is.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "IoU over masks of different sizes: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}
