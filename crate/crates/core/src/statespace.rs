//! Truncated state space, the two-partition split and mixed-radix
//! linearization of each partition's sub-grid.
//!
//! Within a partition the first-listed species varies fastest: the stride of
//! the j-th listed species is the product of the sizes of the species listed
//! before it. Indices are 0-based. A full state is addressed by
//! `i1 + n1 * i2`, i.e. the partition-1 index varies fastest, which is the
//! column-major layout of the `n1 x n2` matricization.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Marker for "the shifted state falls outside the truncated grid".
pub const OUTSIDE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    First,
    Second,
}

impl Partition {
    pub const BOTH: [Partition; 2] = [Partition::First, Partition::Second];

    pub fn index(self) -> usize {
        match self {
            Partition::First => 0,
            Partition::Second => 1,
        }
    }

    pub fn other(self) -> Partition {
        match self {
            Partition::First => Partition::Second,
            Partition::Second => Partition::First,
        }
    }
}

/// Direction of a shift: `Forward` reads the row at `x + nu`, `Backward`
/// the row at `x - nu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> i64 {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }
}

/// Mixed-radix index map for the sub-grid of one partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionGrid {
    species: Vec<usize>,
    lower: Vec<i64>,
    upper: Vec<i64>,
    sizes: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl PartitionGrid {
    fn new(species: Vec<usize>, lower: Vec<i64>, upper: Vec<i64>) -> Result<Self> {
        let sizes: Vec<usize> = lower
            .iter()
            .zip(&upper)
            .map(|(&lo, &hi)| (hi - lo + 1) as usize)
            .collect();
        let mut strides = Vec::with_capacity(sizes.len());
        let mut len: usize = 1;
        for &d in &sizes {
            strides.push(len);
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::InvalidSpace("partition grid size overflows".into()))?;
        }
        Ok(PartitionGrid {
            species,
            lower,
            upper,
            sizes,
            strides,
            len,
        })
    }

    /// Global species indices of this partition, in linearization order.
    pub fn species(&self) -> &[usize] {
        &self.species
    }

    pub fn lower(&self) -> &[i64] {
        &self.lower
    }

    pub fn upper(&self) -> &[i64] {
        &self.upper
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Number of grid points `n_k`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Position of a global species index inside this partition.
    pub fn local_position(&self, species: usize) -> Option<usize> {
        self.species.iter().position(|&s| s == species)
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.species.len()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| lo <= v && v <= hi)
    }

    /// Linear index of the partition state `x` (populations in partition order).
    pub fn linearize(&self, x: &[i64]) -> Result<usize> {
        if x.len() != self.species.len() {
            return Err(Error::Dimension(format!(
                "partition has {} species, got {} coordinates",
                self.species.len(),
                x.len()
            )));
        }
        if !self.contains(x) {
            return Err(Error::OutOfRange(format!(
                "state {x:?} outside [{:?}, {:?}]",
                self.lower, self.upper
            )));
        }
        Ok(x.iter()
            .zip(&self.lower)
            .zip(&self.strides)
            .map(|((&v, &lo), &s)| (v - lo) as usize * s)
            .sum())
    }

    pub fn delinearize(&self, index: usize) -> Result<Vec<i64>> {
        if index >= self.len {
            return Err(Error::OutOfRange(format!("index {index} outside 0..{}", self.len)));
        }
        let mut x = vec![0; self.species.len()];
        self.delinearize_into(index, &mut x);
        Ok(x)
    }

    /// Unchecked variant of [`delinearize`](Self::delinearize) writing into `out`.
    pub fn delinearize_into(&self, mut index: usize, out: &mut [i64]) {
        for ((o, &d), &lo) in out.iter_mut().zip(&self.sizes).zip(&self.lower) {
            *o = lo + (index % d) as i64;
            index /= d;
        }
    }

    /// Iterates over all partition states in linear-index order.
    pub fn states(&self) -> GridIter {
        GridIter::new(&self.lower, &self.upper)
    }

    /// For each linear index `i` (state `x`), the linear index of
    /// `x + sign(direction) * nu_part`, or [`OUTSIDE`] if any coordinate leaves
    /// its bounds.
    pub fn shift_sources(&self, nu_part: &[i64], direction: Direction) -> Vec<usize> {
        assert_eq!(nu_part.len(), self.species.len());
        let s = direction.sign();
        let delta: Vec<i64> = nu_part.iter().map(|&v| s * v).collect();
        let offset: i64 = delta.iter().zip(&self.strides).map(|(&d, &st)| d * st as i64).sum();
        let mut out = Vec::with_capacity(self.len);
        for (i, x) in self.states().enumerate() {
            let inside = x
                .iter()
                .zip(&delta)
                .zip(self.lower.iter().zip(&self.upper))
                .all(|((&v, &d), (&lo, &hi))| lo <= v + d && v + d <= hi);
            out.push(if inside { (i as i64 + offset) as usize } else { OUTSIDE });
        }
        out
    }
}

/// Box-shaped grid iterator; the first coordinate varies fastest.
#[derive(Debug, Clone)]
pub struct GridIter {
    lower: Vec<i64>,
    upper: Vec<i64>,
    next: Option<Vec<i64>>,
}

impl GridIter {
    pub fn new(lower: &[i64], upper: &[i64]) -> Self {
        let empty = lower.iter().zip(upper).any(|(lo, hi)| lo > hi);
        GridIter {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            next: if empty { None } else { Some(lower.to_vec()) },
        }
    }
}

impl Iterator for GridIter {
    type Item = Vec<i64>;

    fn next(&mut self) -> Option<Vec<i64>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut carry = true;
        for ((v, &lo), &hi) in succ.iter_mut().zip(&self.lower).zip(&self.upper) {
            if *v < hi {
                *v += 1;
                carry = false;
                break;
            }
            *v = lo;
        }
        if !carry {
            self.next = Some(succ);
        }
        Some(current)
    }
}

/// The box `lower <= x <= upper` split into two partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncatedStateSpace {
    lower: Vec<i64>,
    upper: Vec<i64>,
    parts: [PartitionGrid; 2],
}

impl TruncatedStateSpace {
    /// Builds the space from inclusive bounds and the species of partition 1;
    /// partition 2 holds the remaining species in ascending order.
    pub fn new(lower: &[i64], upper: &[i64], partition1: &[usize]) -> Result<Self> {
        let n = lower.len();
        if upper.len() != n || n == 0 {
            return Err(Error::InvalidSpace(format!(
                "bounds of length {} and {} do not describe a nonempty species set",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..n {
            if lower[i] < 0 || lower[i] > upper[i] {
                return Err(Error::InvalidSpace(format!(
                    "species {}: invalid bounds [{}, {}]",
                    i + 1,
                    lower[i],
                    upper[i]
                )));
            }
        }
        if partition1.is_empty() || partition1.len() >= n {
            return Err(Error::InvalidSpace(
                "partition 1 must be a nonempty proper subset of the species".into(),
            ));
        }
        let mut seen = vec![false; n];
        for &s in partition1 {
            if s >= n || seen[s] {
                return Err(Error::InvalidSpace(format!(
                    "partition 1 lists species index {s} twice or out of range"
                )));
            }
            seen[s] = true;
        }
        let partition2: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
        let grid = |species: &[usize]| {
            PartitionGrid::new(
                species.to_vec(),
                species.iter().map(|&i| lower[i]).collect(),
                species.iter().map(|&i| upper[i]).collect(),
            )
        };
        let parts = [grid(partition1)?, grid(&partition2)?];
        Ok(TruncatedStateSpace {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            parts,
        })
    }

    /// Builds the space from per-species grid sizes starting at zero.
    pub fn from_sizes(sizes: &[usize], partition1: &[usize]) -> Result<Self> {
        if sizes.contains(&0) {
            return Err(Error::InvalidSpace("grid sizes must be positive".into()));
        }
        let lower = vec![0; sizes.len()];
        let upper: Vec<i64> = sizes.iter().map(|&d| d as i64 - 1).collect();
        Self::new(&lower, &upper, partition1)
    }

    pub fn n_species(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[i64] {
        &self.lower
    }

    pub fn upper(&self) -> &[i64] {
        &self.upper
    }

    pub fn part(&self, k: Partition) -> &PartitionGrid {
        &self.parts[k.index()]
    }

    pub fn n1(&self) -> usize {
        self.parts[0].len
    }

    pub fn n2(&self) -> usize {
        self.parts[1].len
    }

    /// Total number of states `n1 * n2`, if it fits in a `usize`.
    pub fn n_states(&self) -> Option<usize> {
        self.n1().checked_mul(self.n2())
    }

    /// `n1 * n2` as a wide integer (never overflows).
    pub fn n_states_wide(&self) -> u128 {
        self.n1() as u128 * self.n2() as u128
    }

    /// Which partition holds `species`, and its position there.
    pub fn locate(&self, species: usize) -> Option<(Partition, usize)> {
        Partition::BOTH
            .into_iter()
            .find_map(|k| self.part(k).local_position(species).map(|p| (k, p)))
    }

    /// Components of a full-length vector belonging to partition `k`.
    pub fn restrict<T: Copy>(&self, k: Partition, full: &[T]) -> Vec<T> {
        self.part(k).species.iter().map(|&i| full[i]).collect()
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.lower.len()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| lo <= v && v <= hi)
    }

    /// Combined index `i1 + n1 * i2` of a full state.
    pub fn index_of(&self, x: &[i64]) -> Result<usize> {
        if x.len() != self.n_species() {
            return Err(Error::Dimension(format!(
                "expected {} coordinates, got {}",
                self.n_species(),
                x.len()
            )));
        }
        let i1 = self.parts[0].linearize(&self.restrict(Partition::First, x))?;
        let i2 = self.parts[1].linearize(&self.restrict(Partition::Second, x))?;
        Ok(i1 + self.n1() * i2)
    }

    /// Full state of a combined index.
    pub fn state_of(&self, index: usize) -> Result<Vec<i64>> {
        let n1 = self.n1();
        let x1 = self.parts[0].delinearize(index % n1)?;
        let x2 = self.parts[1].delinearize(index / n1)?;
        let mut x = vec![0; self.n_species()];
        for (k, xs) in [(0, x1), (1, x2)] {
            for (&s, v) in self.parts[k].species.iter().zip(xs) {
                x[s] = v;
            }
        }
        Ok(x)
    }

    /// Iterates over all full states in combined-index order.
    pub fn states(&self) -> impl Iterator<Item = Vec<i64>> + '_ {
        let p1 = &self.parts[0];
        let p2 = &self.parts[1];
        p2.states().flat_map(move |x2| {
            p1.states().map(move |x1| {
                let mut x = vec![0; p1.species.len() + p2.species.len()];
                for (&s, &v) in p1.species.iter().zip(&x1) {
                    x[s] = v;
                }
                for (&s, &v) in p2.species.iter().zip(&x2) {
                    x[s] = v;
                }
                x
            })
        })
    }
}

/// Shift operator on a partition-`k` grid function stored as an `n_k x r`
/// matrix: row `x` of the result is row `x + sign * nu_(k)` of `v`, or zero
/// when that state leaves the partition's bounds.
pub fn shift_apply(
    space: &TruncatedStateSpace,
    k: Partition,
    nu: &[i64],
    direction: Direction,
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let grid = space.part(k);
    if v.nrows() != grid.len() {
        return Err(Error::Dimension(format!(
            "matrix has {} rows, partition has {} states",
            v.nrows(),
            grid.len()
        )));
    }
    if nu.len() != space.n_species() {
        return Err(Error::Dimension(format!(
            "stoichiometric vector has length {}, expected {}",
            nu.len(),
            space.n_species()
        )));
    }
    let sources = grid.shift_sources(&space.restrict(k, nu), direction);
    Ok(apply_sources(&sources, v))
}

/// Gathers rows of `v` through a precomputed source map.
pub fn apply_sources(sources: &[usize], v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(v.nrows(), v.ncols());
    for j in 0..v.ncols() {
        let src = v.column(j);
        let mut dst = out.column_mut(j);
        for (i, &s) in sources.iter().enumerate() {
            if s != OUTSIDE {
                dst[i] = src[s];
            }
        }
    }
    out
}
