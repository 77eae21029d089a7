//! The factored state `P = X1 S X2^T` and the linear algebra around it.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::observe::{partition_slice_states, GridSlice, SliceSpec};
use crate::reference::DenseDistribution;
use crate::statespace::{Partition, TruncatedStateSpace};

/// Default cap on `n1 * n2` for operations that materialize the full grid.
pub const DEFAULT_DENSE_BUDGET: usize = 100_000_000;

/// Low-rank representation with orthonormal factor columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankState {
    /// `n1 x r`
    pub x1: DMatrix<f64>,
    /// `r x r`
    pub s: DMatrix<f64>,
    /// `n2 x r`
    pub x2: DMatrix<f64>,
}

/// Thin QR factorization `m = q r` with `diag(r) >= 0`.
///
/// Columns are orthogonalized with repeated classical Gram–Schmidt until a
/// pass no longer removes a significant part ("twice is enough"). A column
/// that vanishes to roundoff gets a zero row in `r`; its `q` column is filled
/// afterwards with a canonical-basis vector orthogonalized against the range
/// of `m`, so the zero row stays consistent.
pub fn orthonormalize(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, r) = m.shape();
    assert!(n >= r, "orthonormalize needs at least as many rows as columns");
    let mut q = DMatrix::zeros(n, r);
    let mut rr = DMatrix::zeros(r, r);
    let mut accepted: Vec<usize> = Vec::with_capacity(r);
    let mut deficient = Vec::new();
    for j in 0..r {
        let mut v = m.column(j).into_owned();
        let scale = v.norm();
        let mut norm = scale;
        for _ in 0..4 {
            if accepted.is_empty() {
                break;
            }
            let mut coeffs = DVector::zeros(accepted.len());
            for (a, &c) in accepted.iter().enumerate() {
                coeffs[a] = q.column(c).dot(&v);
            }
            for (a, &c) in accepted.iter().enumerate() {
                v.axpy(-coeffs[a], &q.column(c), 1.0);
                rr[(c, j)] += coeffs[a];
            }
            let previous = norm;
            norm = v.norm();
            if norm > 0.7 * previous {
                break;
            }
        }
        if norm <= (n as f64) * f64::EPSILON * scale || norm == 0.0 {
            deficient.push(j);
        } else {
            rr[(j, j)] = norm;
            q.set_column(j, &(v / norm));
            accepted.push(j);
        }
    }
    if !deficient.is_empty() {
        let mut basis = DMatrix::zeros(n, accepted.len());
        for (a, &c) in accepted.iter().enumerate() {
            basis.set_column(a, &q.column(c));
        }
        let full = complete_orthonormal(&basis, r);
        for (extra, &j) in deficient.iter().enumerate() {
            q.set_column(j, &full.column(accepted.len() + extra));
        }
    }
    (q, rr)
}

/// `max |X^T X - I|`.
pub fn orthonormality_defect(x: &DMatrix<f64>) -> f64 {
    let g = x.tr_mul(x);
    let mut worst: f64 = 0.0;
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Extends the orthonormal columns of `basis` to `r` columns with
/// Gram–Schmidt-orthogonalized canonical basis vectors `e_0, e_1, ...`.
pub fn complete_orthonormal(basis: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let n = basis.nrows();
    assert!(r <= n, "cannot complete {r} columns in dimension {n}");
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let mut candidate = 0;
    while cols.len() < r {
        let mut v = DVector::zeros(n);
        v[candidate] = 1.0;
        candidate += 1;
        // two passes of classical Gram–Schmidt
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v.axpy(-proj, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 0.5 {
            cols.push(v / norm);
        }
    }
    DMatrix::from_columns(&cols)
}

fn singular_triplets(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let u = DMatrix::from_columns(&order.iter().map(|&k| u.column(k)).collect::<Vec<_>>());
    let v = DMatrix::from_columns(&order.iter().map(|&k| vt.row(k).transpose()).collect::<Vec<_>>());
    (u, sigma, v)
}

/// Singular values of the `n1 x n2` matricization, descending.
pub fn singular_values(p: &DenseDistribution) -> Vec<f64> {
    let mut s: Vec<f64> = p.matricize().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Euclidean distance from `p_ref` to its best rank-`r` approximation.
pub fn best_approximation_error(p_ref: &DenseDistribution, r: usize) -> f64 {
    singular_values(p_ref).iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}

impl LowRankState {
    pub fn new(x1: DMatrix<f64>, s: DMatrix<f64>, x2: DMatrix<f64>) -> Result<Self> {
        let r = s.nrows();
        if s.ncols() != r || x1.ncols() != r || x2.ncols() != r {
            return Err(Error::Dimension(format!(
                "factor shapes {}x{}, {}x{}, {}x{} are inconsistent",
                x1.nrows(),
                x1.ncols(),
                s.nrows(),
                s.ncols(),
                x2.nrows(),
                x2.ncols()
            )));
        }
        Ok(LowRankState { x1, s, x2 })
    }

    pub fn rank(&self) -> usize {
        self.s.nrows()
    }

    /// Rank-`r` truncated SVD of the matricized distribution.
    pub fn from_dense(p0: &DenseDistribution, space: &TruncatedStateSpace, r: usize, budget: usize) -> Result<Self> {
        check_rank(space, r)?;
        let n = space.n_states_wide();
        if n > budget as u128 {
            return Err(Error::Budget(format!(
                "dense initialization needs {n} entries, budget is {budget}"
            )));
        }
        if p0.values.len() as u128 != n {
            return Err(Error::Dimension(format!(
                "distribution has {} entries, state space has {n}",
                p0.values.len()
            )));
        }
        let (u, sigma, v) = singular_triplets(p0.matricize());
        let x1 = u.columns(0, r).into_owned();
        let x2 = v.columns(0, r).into_owned();
        let s = DMatrix::from_diagonal(&DVector::from_iterator(r, sigma.into_iter().take(r)));
        Ok(LowRankState { x1, s, x2 })
    }

    /// Rank-one state `f1 f2^T` padded to rank `r` with orthonormal
    /// completion columns and zero coupling entries.
    pub fn from_product(f1: &[f64], f2: &[f64], r: usize) -> Result<Self> {
        if r == 0 || r > f1.len() || r > f2.len() {
            return Err(Error::Config(format!(
                "rank {r} must lie in 1..={}",
                f1.len().min(f2.len())
            )));
        }
        let n1 = DVector::from_column_slice(f1).norm();
        let n2 = DVector::from_column_slice(f2).norm();
        if n1 == 0.0 || n2 == 0.0 {
            return Err(Error::Config(
                "product initial value has an identically zero factor".into(),
            ));
        }
        let c1 = DMatrix::from_column_slice(f1.len(), 1, f1) / n1;
        let c2 = DMatrix::from_column_slice(f2.len(), 1, f2) / n2;
        let mut s = DMatrix::zeros(r, r);
        s[(0, 0)] = n1 * n2;
        Ok(LowRankState {
            x1: complete_orthonormal(&c1, r),
            s,
            x2: complete_orthonormal(&c2, r),
        })
    }

    /// Shifts `S` by the smallest Frobenius-norm update that makes the total
    /// mass equal `target`. The update lies in the span of the factors and is
    /// orthogonal to any truncation residual, so the approximation error only
    /// grows at second order.
    pub fn restore_mass(&mut self, target: f64) -> Result<()> {
        let w1 = self.x1.row_sum().transpose();
        let w2 = self.x2.row_sum().transpose();
        let denom = w1.norm_squared() * w2.norm_squared();
        if denom == 0.0 {
            return Err(Error::Instability(
                "factors are orthogonal to the constant function; mass cannot be corrected".into(),
            ));
        }
        let delta = target - self.mass();
        self.s += &w1 * w2.transpose() * (delta / denom);
        Ok(())
    }

    /// Dense `n1 x n2` reconstruction.
    pub fn reconstruct(&self, space: &TruncatedStateSpace, budget: usize) -> Result<DenseDistribution> {
        let n = space.n_states_wide();
        if n > budget as u128 {
            return Err(Error::Budget(format!(
                "reconstruction needs {n} entries, budget is {budget}"
            )));
        }
        let p = &self.x1 * &self.s * self.x2.transpose();
        Ok(DenseDistribution::from_matrix(&p))
    }

    /// Total probability `(1^T X1) S (X2^T 1)`.
    pub fn mass(&self) -> f64 {
        let w1 = self.x1.row_sum();
        let w2 = self.x2.row_sum();
        (w1 * &self.s * w2.transpose())[(0, 0)]
    }

    /// Marginal distribution of one species over its bounds.
    pub fn marginal(&self, space: &TruncatedStateSpace, species: usize) -> Result<Vec<f64>> {
        let (k, pos) = space
            .locate(species)
            .ok_or_else(|| Error::OutOfRange(format!("no species with index {species}")))?;
        let weights = match k {
            Partition::First => &self.x1 * (&self.s * self.x2.row_sum().transpose()),
            Partition::Second => &self.x2 * (self.s.tr_mul(&self.x1.row_sum().transpose())),
        };
        let grid = space.part(k);
        let size = grid.sizes()[pos];
        let stride = grid.strides()[pos];
        let mut out = vec![0.0; size];
        for (idx, w) in weights.iter().enumerate() {
            out[(idx / stride) % size] += w;
        }
        Ok(out)
    }

    /// Evaluates the state on a slice without densifying.
    pub fn slice(&self, space: &TruncatedStateSpace, spec: &SliceSpec) -> Result<GridSlice> {
        spec.validate(space)?;
        let rows1 = partition_slice_states(space, Partition::First, spec);
        let rows2 = partition_slice_states(space, Partition::Second, spec);
        let r = self.rank();
        let a = DMatrix::from_fn(rows1.len(), r, |i, j| self.x1[(rows1[i].0, j)]);
        let b = DMatrix::from_fn(rows2.len(), r, |i, j| self.x2[(rows2[i].0, j)]);
        let m = a * &self.s * b.transpose();
        let mut out = GridSlice::zeros(space, spec);
        let mut q = vec![0i64; out.species.len()];
        for (i, (_, c1)) in rows1.iter().enumerate() {
            for (j, (_, c2)) in rows2.iter().enumerate() {
                for &(s, v) in c1.iter().chain(c2) {
                    let pos = out.species.iter().position(|&t| t == s).unwrap();
                    q[pos] = v;
                }
                let idx = out.index_of(&q);
                out.values[idx] = m[(i, j)];
            }
        }
        Ok(out)
    }

    pub fn max_orthonormality_defect(&self) -> f64 {
        orthonormality_defect(&self.x1).max(orthonormality_defect(&self.x2))
    }

    pub fn is_finite(&self) -> bool {
        self.x1
            .iter()
            .chain(self.s.iter())
            .chain(self.x2.iter())
            .all(|v| v.is_finite())
    }
}

fn check_rank(space: &TruncatedStateSpace, r: usize) -> Result<()> {
    let max = space.n1().min(space.n2());
    if r == 0 || r > max {
        return Err(Error::Config(format!("rank {r} must lie in 1..={max}")));
    }
    Ok(())
}

/// Degrees of freedom of a rank-`r` state, `(n1 + n2) r + r^2`.
pub fn lowrank_dof(space: &TruncatedStateSpace, r: usize) -> u128 {
    (space.n1() as u128 + space.n2() as u128) * r as u128 + (r * r) as u128
}

// Factor snapshot layout (all integers and floats little-endian):
//   magic "LRCMESNP" | version u32 | N u32 | m1 u32 | r u32 | t f64
//   lower i64 * N | upper i64 * N | partition1 u32 * m1 | partition2 u32 * (N - m1)
//   X1 f64 * n1 r | S f64 * r r | X2 f64 * n2 r     (column-major)
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"LRCMESNP";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Snapshot contents: the state space, the factors and the time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub space: TruncatedStateSpace,
    pub state: LowRankState,
    pub t: f64,
}

pub fn write_snapshot<W: Write + ?Sized>(
    w: &mut W,
    space: &TruncatedStateSpace,
    state: &LowRankState,
    t: f64,
) -> std::io::Result<()> {
    let p1 = space.part(Partition::First).species();
    let p2 = space.part(Partition::Second).species();
    w.write_all(SNAPSHOT_MAGIC)?;
    for v in [
        SNAPSHOT_VERSION,
        space.n_species() as u32,
        p1.len() as u32,
        state.rank() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&t.to_le_bytes())?;
    for &v in space.lower().iter().chain(space.upper()) {
        w.write_all(&v.to_le_bytes())?;
    }
    for &s in p1.iter().chain(p2) {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    for m in [&state.x1, &state.s, &state.x2] {
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Snapshot> {
    fn bad(msg: impl Into<String>) -> Error {
        Error::Config(format!("malformed snapshot: {}", msg.into()))
    }
    let mut buf8 = [0u8; 8];
    let mut buf4 = [0u8; 4];
    let read = |r: &mut R, buf: &mut [u8]| r.read_exact(buf).map_err(|e| bad(e.to_string()));
    read(r, &mut buf8)?;
    if &buf8 != SNAPSHOT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut header = [0u32; 4];
    for h in header.iter_mut() {
        read(r, &mut buf4)?;
        *h = u32::from_le_bytes(buf4);
    }
    let [version, n, m1, rank] = header.map(|v| v as usize);
    if version != SNAPSHOT_VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    read(r, &mut buf8)?;
    let t = f64::from_le_bytes(buf8);
    let mut bounds = vec![0i64; 2 * n];
    for b in bounds.iter_mut() {
        read(r, &mut buf8)?;
        *b = i64::from_le_bytes(buf8);
    }
    let mut parts = vec![0usize; n];
    for p in parts.iter_mut() {
        read(r, &mut buf4)?;
        *p = u32::from_le_bytes(buf4) as usize;
    }
    if m1 > n {
        return Err(bad("partition size exceeds species count"));
    }
    let space = TruncatedStateSpace::new(&bounds[..n], &bounds[n..], &parts[..m1])?;
    if space.part(Partition::Second).species() != &parts[m1..] {
        return Err(bad("partition 2 is not in ascending order"));
    }
    let mut matrix = |rows: usize| -> Result<DMatrix<f64>> {
        let mut data = vec![0.0; rows * rank];
        for v in data.iter_mut() {
            read(r, &mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        Ok(DMatrix::from_vec(rows, rank, data))
    };
    let x1 = matrix(space.n1())?;
    let s = matrix(rank)?;
    let x2 = matrix(space.n2())?;
    Ok(Snapshot {
        space,
        state: LowRankState { x1, s, x2 },
        t,
    })
}
