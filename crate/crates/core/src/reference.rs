//! Dense finite-state-projection reference solver and error metrics.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ReactionNetwork;
use crate::observe::{GridSlice, SliceSpec};
use crate::statespace::{Direction, Partition, TruncatedStateSpace, OUTSIDE};

/// Default cap on the number of states the dense solver will allocate.
pub const DEFAULT_DENSE_STATES: usize = 10_000_000;

const NO_SOURCE: u32 = u32::MAX;

/// Probability vector over the full truncated space, partition-1 index
/// fastest (`i1 + n1 * i2`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDistribution {
    pub n1: usize,
    pub n2: usize,
    pub values: Vec<f64>,
}

impl DenseDistribution {
    pub fn zeros(space: &TruncatedStateSpace) -> Self {
        DenseDistribution {
            n1: space.n1(),
            n2: space.n2(),
            values: vec![0.0; space.n1() * space.n2()],
        }
    }

    pub fn from_values(space: &TruncatedStateSpace, values: Vec<f64>) -> Result<Self> {
        if values.len() as u128 != space.n_states_wide() {
            return Err(Error::Dimension(format!(
                "{} values for {} states",
                values.len(),
                space.n_states_wide()
            )));
        }
        Ok(DenseDistribution {
            n1: space.n1(),
            n2: space.n2(),
            values,
        })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        DenseDistribution {
            n1: m.nrows(),
            n2: m.ncols(),
            values: m.as_slice().to_vec(),
        }
    }

    /// The `n1 x n2` matricization.
    pub fn matricize(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n1, self.n2, &self.values)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &DenseDistribution) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean norm of the difference over all grid states.
    pub fn error_2norm(&self, other: &DenseDistribution) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "grid mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn marginal(&self, space: &TruncatedStateSpace, species: usize) -> Result<Vec<f64>> {
        let (k, pos) = space
            .locate(species)
            .ok_or_else(|| Error::OutOfRange(format!("no species with index {species}")))?;
        let grid = space.part(k);
        let (size, stride) = (grid.sizes()[pos], grid.strides()[pos]);
        let mut out = vec![0.0; size];
        for (idx, &p) in self.values.iter().enumerate() {
            let local = match k {
                Partition::First => idx % self.n1,
                Partition::Second => idx / self.n1,
            };
            out[(local / stride) % size] += p;
        }
        Ok(out)
    }

    pub fn slice(&self, space: &TruncatedStateSpace, spec: &SliceSpec) -> Result<GridSlice> {
        spec.validate(space)?;
        let mut out = GridSlice::zeros(space, spec);
        let mut x = vec![0i64; space.n_species()];
        for q in out.points() {
            for (i, f) in spec.fixed.iter().enumerate() {
                if let Some(v) = f {
                    x[i] = *v;
                }
            }
            for (&s, &v) in out.species.iter().zip(&q) {
                x[s] = v;
            }
            let idx = out.index_of(&q);
            out.values[idx] = self.values[space.index_of(&x)?];
        }
        Ok(out)
    }

    /// Rows `x1..xN, P` for a CSV dump.
    pub fn rows<'a>(&'a self, space: &'a TruncatedStateSpace) -> impl Iterator<Item = (Vec<i64>, f64)> + 'a {
        space.states().zip(self.values.iter().copied())
    }
}

/// The truncated CME operator, precomputed as per-channel gathers.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    n1: usize,
    n: usize,
    /// `sum_mu a_mu(x)`
    outflow: Vec<f64>,
    /// per channel: source index `x - nu` (or `NO_SOURCE`) and `a_mu(x - nu)`
    inflow: Vec<(Vec<u32>, Vec<f64>)>,
}

impl DenseOperator {
    pub fn new(network: &ReactionNetwork, space: &TruncatedStateSpace, budget: usize) -> Result<Self> {
        let n = space.n_states_wide();
        if n > budget as u128 || n >= NO_SOURCE as u128 {
            return Err(Error::Budget(format!(
                "dense budget exceeded: {n} states, budget is {budget}"
            )));
        }
        let n = n as usize;
        let n1 = space.n1();
        let mut propensities = Vec::with_capacity(network.n_channels());
        for ch in &network.channels {
            let a: Vec<f64> = space.states().map(|x| ch.evaluate_at(&x)).collect();
            if let Some(bad) = a.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidModel(format!(
                    "propensity {} is {} at {:?}",
                    ch.propensity,
                    a[bad],
                    space.state_of(bad)?
                )));
            }
            propensities.push(a);
        }
        let mut outflow = vec![0.0; n];
        for a in &propensities {
            for (o, v) in outflow.iter_mut().zip(a) {
                *o += v;
            }
        }
        let mut inflow = Vec::with_capacity(network.n_channels());
        for (ch, a) in network.channels.iter().zip(&propensities) {
            let src = |k: Partition| {
                space
                    .part(k)
                    .shift_sources(&space.restrict(k, &ch.nu), Direction::Backward)
            };
            let (s1, s2) = (src(Partition::First), src(Partition::Second));
            let mut sources = vec![NO_SOURCE; n];
            let mut gains = vec![0.0; n];
            for i2 in 0..space.n2() {
                for i1 in 0..n1 {
                    if s1[i1] != OUTSIDE && s2[i2] != OUTSIDE {
                        let s = s1[i1] + n1 * s2[i2];
                        sources[i1 + n1 * i2] = s as u32;
                        gains[i1 + n1 * i2] = a[s];
                    }
                }
            }
            inflow.push((sources, gains));
        }
        Ok(DenseOperator { n1, n, outflow, inflow })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    /// `out = A p` with channels summed in ascending order for every state.
    pub fn apply(&self, p: &[f64], out: &mut [f64]) {
        const CHUNK: usize = 4096;
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, block)| {
            let base = c * CHUNK;
            for (off, o) in block.iter_mut().enumerate() {
                let x = base + off;
                let mut acc = 0.0;
                for (sources, gains) in &self.inflow {
                    let s = sources[x];
                    if s != NO_SOURCE {
                        acc += gains[x] * p[s as usize];
                    }
                }
                *o = acc - self.outflow[x] * p[x];
            }
        });
    }

    /// Dense matrix of the operator (tiny grids only, for oracles).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for x in 0..self.n {
            m[(x, x)] -= self.outflow[x];
            for (sources, gains) in &self.inflow {
                if sources[x] != NO_SOURCE {
                    m[(x, sources[x] as usize)] += gains[x];
                }
            }
        }
        m
    }
}

/// `dP/dt` of the truncated CME.
pub fn dense_rhs(
    p: &DenseDistribution,
    space: &TruncatedStateSpace,
    network: &ReactionNetwork,
) -> Result<DenseDistribution> {
    let op = DenseOperator::new(network, space, DEFAULT_DENSE_STATES)?;
    let mut out = DenseDistribution::zeros(space);
    op.apply(&p.values, &mut out.values);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseTolerances {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
}

impl Default for DenseTolerances {
    fn default() -> Self {
        DenseTolerances {
            atol: 1e-10,
            rtol: 1e-8,
            max_steps: 50_000_000,
        }
    }
}

/// Counters from an adaptive integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DenseStats {
    pub accepted: usize,
    pub rejected: usize,
}

// Dormand–Prince 5(4) tableau
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combine(y: &[f64], h: f64, terms: &[(f64, &[f64])], out: &mut [f64]) {
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        *o = y[i] + h * acc;
    });
}

/// Adaptive Dormand–Prince integration of the truncated CME from `t0`,
/// returning the distribution at each of `times` (sorted, `>= t0`).
pub fn dense_solve_with(
    op: &DenseOperator,
    p0: &DenseDistribution,
    t0: f64,
    times: &[f64],
    tol: DenseTolerances,
) -> Result<(Vec<DenseDistribution>, DenseStats)> {
    if p0.values.len() != op.len() {
        return Err(Error::Dimension(format!(
            "initial value has {} entries, operator has {}",
            p0.values.len(),
            op.len()
        )));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < t0) {
        return Err(Error::Config("output times must be sorted and >= t0".into()));
    }
    let n = op.len();
    let mut y = p0.values.clone();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut stats = DenseStats::default();
    let mut out = Vec::with_capacity(times.len());
    let mut t = t0;
    let snapshot = |v: &[f64]| DenseDistribution {
        n1: p0.n1,
        n2: p0.n2,
        values: v.to_vec(),
    };

    op.apply(&y, &mut k[0]);
    let scale = |v: f64| tol.atol + tol.rtol * v.abs();
    let rms = |v: &[f64], w: &[f64]| {
        (v.iter().zip(w).map(|(a, b)| (a / scale(*b)).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt()
    };
    // starting step size (Hairer, Norsett & Wanner, II.4)
    let d0 = rms(&y, &y);
    let d1 = rms(&k[0], &y);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let mut fsal_valid = true;

    for &t_out in times {
        while t < t_out {
            if stats.accepted + stats.rejected >= tol.max_steps {
                return Err(Error::Instability(format!(
                    "dense solver exceeded {} steps at t={t}",
                    tol.max_steps
                )));
            }
            let remaining = t_out - t;
            let last = h >= remaining;
            let step = if last { remaining } else { h };
            if step <= f64::EPSILON * t.abs().max(1.0) * 4.0 && !last {
                return Err(Error::Instability(format!("dense solver step size underflow at t={t}")));
            }
            if !fsal_valid {
                op.apply(&y, &mut k[0]);
            }
            let (k0, rest) = k.split_first_mut().unwrap();
            let [k1, k2, k3, k4, k5, k6] = rest else { unreachable!() };
            combine(&y, step, &[(A21, k0)], &mut stage);
            op.apply(&stage, k1);
            combine(&y, step, &[(A31, k0), (A32, k1)], &mut stage);
            op.apply(&stage, k2);
            combine(&y, step, &[(A41, k0), (A42, k1), (A43, k2)], &mut stage);
            op.apply(&stage, k3);
            combine(&y, step, &[(A51, k0), (A52, k1), (A53, k2), (A54, k3)], &mut stage);
            op.apply(&stage, k4);
            combine(
                &y,
                step,
                &[(A61, k0), (A62, k1), (A63, k2), (A64, k3), (A65, k4)],
                &mut stage,
            );
            op.apply(&stage, k5);
            combine(
                &y,
                step,
                &[(B1, k0), (B3, k2), (B4, k3), (B5, k4), (B6, k5)],
                &mut y_new,
            );
            op.apply(&y_new, k6);
            let err = {
                let (k0, k2, k3, k4, k5, k6) = (&k[0], &k[2], &k[3], &k[4], &k[5], &k[6]);
                // fixed-size chunks keep the reduction order independent of
                // the thread count
                const CHUNK: usize = 4096;
                let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
                    .into_par_iter()
                    .map(|c| {
                        (c * CHUNK..n.min((c + 1) * CHUNK))
                            .map(|i| {
                                let e = step
                                    * (E1 * k0[i] + E3 * k2[i] + E4 * k3[i] + E5 * k4[i] + E6 * k5[i] + E7 * k6[i]);
                                let sc = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
                                (e / sc).powi(2)
                            })
                            .sum::<f64>()
                    })
                    .collect();
                (partial.iter().sum::<f64>() / n.max(1) as f64).sqrt()
            };
            if !err.is_finite() {
                return Err(Error::Instability(format!(
                    "dense solver produced non-finite values at t={t}"
                )));
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err <= 1.0 {
                stats.accepted += 1;
                t = if last { t_out } else { t + step };
                std::mem::swap(&mut y, &mut y_new);
                k.swap(0, 6);
                fsal_valid = true;
                if !last {
                    h = step * factor;
                }
            } else {
                stats.rejected += 1;
                h = step * factor.min(1.0);
            }
        }
        out.push(snapshot(&y));
    }
    Ok((out, stats))
}

/// Solves the truncated CME with default tolerances and the default budget.
pub fn dense_solve(
    p0: &DenseDistribution,
    space: &TruncatedStateSpace,
    network: &ReactionNetwork,
    times: &[f64],
    tol: DenseTolerances,
) -> Result<Vec<DenseDistribution>> {
    let op = DenseOperator::new(network, space, DEFAULT_DENSE_STATES)?;
    Ok(dense_solve_with(&op, p0, 0.0, times, tol)?.0)
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
