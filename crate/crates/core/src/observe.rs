//! Marginals and slices (partial evaluations) shared by every solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statespace::{GridIter, Partition, TruncatedStateSpace};

/// A slice request: `Some(v)` pins a species to population `v`, `None` marks
/// a query species that stays free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub fixed: Vec<Option<i64>>,
}

impl SliceSpec {
    pub fn new(fixed: Vec<Option<i64>>) -> Self {
        SliceSpec { name: None, fixed }
    }

    pub fn label(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("slice{index}"))
    }

    pub fn query_species(&self) -> Vec<usize> {
        self.fixed
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.is_none().then_some(i))
            .collect()
    }

    pub fn validate(&self, space: &TruncatedStateSpace) -> Result<()> {
        if self.fixed.len() != space.n_species() {
            return Err(Error::Dimension(format!(
                "slice fixes {} coordinates, model has {} species",
                self.fixed.len(),
                space.n_species()
            )));
        }
        for (i, f) in self.fixed.iter().enumerate() {
            if let Some(v) = *f {
                if v < space.lower()[i] || v > space.upper()[i] {
                    return Err(Error::OutOfRange(format!(
                        "slice coordinate x{}={v} outside [{}, {}]",
                        i + 1,
                        space.lower()[i],
                        space.upper()[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether a full state matches the pinned coordinates.
    pub fn matches(&self, x: &[i64]) -> bool {
        self.fixed.iter().zip(x).all(|(f, &v)| f.is_none_or(|p| p == v))
    }
}

/// Values over the box of the query species; the first query species varies
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSlice {
    pub species: Vec<usize>,
    pub lower: Vec<i64>,
    pub upper: Vec<i64>,
    pub values: Vec<f64>,
}

impl GridSlice {
    pub fn zeros(space: &TruncatedStateSpace, spec: &SliceSpec) -> Self {
        let species = spec.query_species();
        let lower: Vec<i64> = species.iter().map(|&i| space.lower()[i]).collect();
        let upper: Vec<i64> = species.iter().map(|&i| space.upper()[i]).collect();
        let len = lower
            .iter()
            .zip(&upper)
            .map(|(lo, hi)| (hi - lo + 1) as usize)
            .product();
        GridSlice {
            species,
            lower,
            upper,
            values: vec![0.0; len],
        }
    }

    /// Linear index of the query coordinates `q` (in query-species order).
    pub fn index_of(&self, q: &[i64]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for ((&v, &lo), &hi) in q.iter().zip(&self.lower).zip(&self.upper) {
            idx += (v - lo) as usize * stride;
            stride *= (hi - lo + 1) as usize;
        }
        idx
    }

    pub fn points(&self) -> GridIter {
        GridIter::new(&self.lower, &self.upper)
    }

    pub fn max_abs_diff(&self, other: &GridSlice) -> Result<f64> {
        if self.values.len() != other.values.len() || self.species != other.species {
            return Err(Error::Dimension("slices cover different grids".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// States of partition `k` compatible with a slice: linear index plus the
/// values of the partition's query species (in global ascending order).
pub(crate) fn partition_slice_states(
    space: &TruncatedStateSpace,
    k: Partition,
    spec: &SliceSpec,
) -> Vec<(usize, Vec<(usize, i64)>)> {
    let grid = space.part(k);
    let free: Vec<usize> = grid
        .species()
        .iter()
        .copied()
        .filter(|&s| spec.fixed[s].is_none())
        .collect();
    let lower: Vec<i64> = free.iter().map(|&s| space.lower()[s]).collect();
    let upper: Vec<i64> = free.iter().map(|&s| space.upper()[s]).collect();
    let mut out = Vec::new();
    let mut x = vec![0i64; grid.species().len()];
    for q in GridIter::new(&lower, &upper) {
        for (pos, &s) in grid.species().iter().enumerate() {
            x[pos] = match spec.fixed[s] {
                Some(v) => v,
                None => q[free.iter().position(|&f| f == s).unwrap()],
            };
        }
        let idx = grid.linearize(&x).expect("slice coordinates validated");
        out.push((idx, free.iter().copied().zip(q).collect()));
    }
    out
}
