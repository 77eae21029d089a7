//! Initial distributions: Gaussian, multinomial, point mass, per-species
//! product and file-backed values, all normalized over the truncated grid.

use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{read_snapshot, LowRankState, SNAPSHOT_MAGIC};
use crate::reference::DenseDistribution;
use crate::statespace::{Partition, TruncatedStateSpace};

/// Covariance of a Gaussian initial value: `c * I` or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariance {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Covariance {
    fn matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        match self {
            Covariance::Scalar(c) => Ok(DMatrix::identity(n, n) * *c),
            Covariance::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Dimension(format!("covariance must be {n}x{n}")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

/// One initial-condition specification, as written in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialCondition {
    /// `gamma * exp(-(x - mean)^T C^-1 (x - mean) / 2)`.
    Gaussian {
        mean: Vec<f64>,
        covariance: Covariance,
    },
    /// `n` trials over the species with probabilities `p`; the remainder
    /// `1 - sum p` is the "no species" outcome.
    Multinomial {
        n: u32,
        p: Vec<f64>,
    },
    Point {
        x: Vec<i64>,
    },
    /// Independent per-species marginals over each species' bounds.
    Product {
        marginals: Vec<Vec<f64>>,
    },
    /// CSV rows `x1,...,xN,p` or a factor snapshot.
    File {
        path: PathBuf,
    },
}

/// An initial value in the cheapest form that represents it exactly.
#[derive(Debug, Clone)]
pub enum InitialData {
    Dense(DenseDistribution),
    /// `P(x1, x2) = f1(x1) f2(x2)`.
    Product {
        f1: Vec<f64>,
        f2: Vec<f64>,
    },
    LowRank(LowRankState),
}

impl InitialData {
    /// Factors of rank `r`: truncated SVD for dense data (with the mass put
    /// back after truncation), orthonormal padding for products.
    pub fn to_lowrank(&self, space: &TruncatedStateSpace, r: usize, budget: usize) -> Result<LowRankState> {
        match self {
            InitialData::Dense(p) => {
                let mut state = LowRankState::from_dense(p, space, r, budget)?;
                state.restore_mass(p.mass())?;
                Ok(state)
            }
            InitialData::Product { f1, f2 } => LowRankState::from_product(f1, f2, r),
            InitialData::LowRank(s) if s.rank() == r => Ok(s.clone()),
            InitialData::LowRank(s) => InitialData::Dense(s.reconstruct(space, budget)?).to_lowrank(space, r, budget),
        }
    }

    pub fn to_dense(&self, space: &TruncatedStateSpace, budget: usize) -> Result<DenseDistribution> {
        match self {
            InitialData::Dense(p) => Ok(p.clone()),
            InitialData::Product { f1, f2 } => {
                let n = space.n_states_wide();
                if n > budget as u128 {
                    return Err(Error::Budget(format!(
                        "dense budget exceeded: {n} states, budget is {budget}"
                    )));
                }
                let mut values = Vec::with_capacity(n as usize);
                for b in f2 {
                    values.extend(f1.iter().map(|a| a * b));
                }
                DenseDistribution::from_values(space, values)
            }
            InitialData::LowRank(s) => s.reconstruct(space, budget),
        }
    }
}

impl InitialCondition {
    pub fn validate(&self, space: &TruncatedStateSpace) -> Result<()> {
        let n = space.n_species();
        match self {
            InitialCondition::Gaussian { mean, covariance } => {
                if mean.len() != n {
                    return Err(Error::Dimension(format!(
                        "gaussian mean has {} entries, model has {n} species",
                        mean.len()
                    )));
                }
                let c = covariance.matrix(n)?;
                if c.iter().any(|v| !v.is_finite()) || (&c - c.transpose()).amax() > 1e-12 * c.amax() {
                    return Err(Error::Config("covariance must be finite and symmetric".into()));
                }
                if c.cholesky().is_none() {
                    return Err(Error::Config("covariance is not positive definite".into()));
                }
            }
            InitialCondition::Multinomial { p, .. } => {
                if p.len() != n {
                    return Err(Error::Dimension(format!(
                        "multinomial has {} probabilities, model has {n} species",
                        p.len()
                    )));
                }
                let total: f64 = p.iter().sum();
                if p.iter().any(|v| !(0.0..=1.0).contains(v)) || total > 1.0 + 1e-12 {
                    return Err(Error::Config(
                        "multinomial probabilities must lie in [0, 1] and sum to at most 1".into(),
                    ));
                }
            }
            InitialCondition::Point { x } => {
                if !space.contains(x) {
                    return Err(Error::OutOfRange(format!(
                        "initial point {x:?} lies outside the truncated space"
                    )));
                }
            }
            InitialCondition::Product { marginals } => {
                if marginals.len() != n {
                    return Err(Error::Dimension(format!(
                        "{} marginals for {n} species",
                        marginals.len()
                    )));
                }
                for (i, m) in marginals.iter().enumerate() {
                    let size = (space.upper()[i] - space.lower()[i] + 1) as usize;
                    if m.len() != size {
                        return Err(Error::Dimension(format!(
                            "marginal of x{} has {} values, bounds admit {size}",
                            i + 1,
                            m.len()
                        )));
                    }
                    if m.iter().any(|v| !v.is_finite() || *v < 0.0) || m.iter().sum::<f64>() <= 0.0 {
                        return Err(Error::Config(format!(
                            "marginal of x{} must be nonnegative with positive mass",
                            i + 1
                        )));
                    }
                }
            }
            InitialCondition::File { path } => {
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "initial value file {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluates the initial value on the truncated grid, normalized to
    /// unit mass. Conditions that factor over the partitions never touch
    /// the full grid.
    pub fn materialize(&self, space: &TruncatedStateSpace, budget: usize) -> Result<InitialData> {
        self.validate(space)?;
        let data = match self {
            InitialCondition::Gaussian { mean, covariance } => {
                let c = covariance.matrix(space.n_species())?;
                if block_diagonal(&c, space) {
                    let f1 = gaussian_on_partition(space, Partition::First, mean, &c)?;
                    let f2 = gaussian_on_partition(space, Partition::Second, mean, &c)?;
                    InitialData::Product { f1, f2 }
                } else {
                    let cinv = c
                        .try_inverse()
                        .ok_or_else(|| Error::Config("covariance is singular".into()))?;
                    check_budget(space, budget)?;
                    let q = quadratic_forms(space.states(), mean, &cinv);
                    InitialData::Dense(DenseDistribution::from_values(space, exp_normalized(q)?)?)
                }
            }
            InitialCondition::Multinomial { n, p } => {
                check_budget(space, budget)?;
                let values = space.states().map(|x| multinomial_pmf(*n, p, &x)).collect();
                InitialData::Dense(DenseDistribution::from_values(space, normalized(values)?)?)
            }
            InitialCondition::Point { x } => {
                let unit = |k: Partition| -> Result<Vec<f64>> {
                    let grid = space.part(k);
                    let mut f = vec![0.0; grid.len()];
                    f[grid.linearize(&space.restrict(k, x))?] = 1.0;
                    Ok(f)
                };
                InitialData::Product {
                    f1: unit(Partition::First)?,
                    f2: unit(Partition::Second)?,
                }
            }
            InitialCondition::Product { marginals } => {
                let part = |k: Partition| -> Result<Vec<f64>> {
                    let grid = space.part(k);
                    let f = grid
                        .states()
                        .map(|x| {
                            grid.species()
                                .iter()
                                .zip(&x)
                                .map(|(&s, &v)| marginals[s][(v - space.lower()[s]) as usize])
                                .product()
                        })
                        .collect();
                    normalized(f)
                };
                InitialData::Product {
                    f1: part(Partition::First)?,
                    f2: part(Partition::Second)?,
                }
            }
            InitialCondition::File { path } => load_initial_file(path, space, budget)?,
        };
        Ok(data)
    }

    /// Draws initial states for stochastic simulation.
    pub fn sampler(&self, space: &TruncatedStateSpace, budget: usize) -> Result<InitialSampler> {
        self.validate(space)?;
        match self {
            InitialCondition::Point { x } => Ok(InitialSampler::Point(x.clone())),
            InitialCondition::Multinomial { n, p } => Ok(InitialSampler::Multinomial { n: *n, p: p.clone() }),
            _ => InitialSampler::from_data(&self.materialize(space, budget)?, space, budget),
        }
    }
}

fn check_budget(space: &TruncatedStateSpace, budget: usize) -> Result<()> {
    let n = space.n_states_wide();
    if n > budget as u128 {
        return Err(Error::Budget(format!(
            "dense budget exceeded: {n} states, budget is {budget}"
        )));
    }
    Ok(())
}

fn block_diagonal(c: &DMatrix<f64>, space: &TruncatedStateSpace) -> bool {
    let p1 = space.part(Partition::First).species();
    let p2 = space.part(Partition::Second).species();
    p1.iter().all(|&i| p2.iter().all(|&j| c[(i, j)] == 0.0))
}

fn gaussian_on_partition(
    space: &TruncatedStateSpace,
    k: Partition,
    mean: &[f64],
    c: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let grid = space.part(k);
    let sp = grid.species();
    let block = DMatrix::from_fn(sp.len(), sp.len(), |i, j| c[(sp[i], sp[j])]);
    let cinv = block
        .try_inverse()
        .ok_or_else(|| Error::Config("covariance is singular".into()))?;
    let mu = space.restrict(k, mean);
    let q = quadratic_forms(grid.states(), &mu, &cinv);
    exp_normalized(q)
}

fn quadratic_forms(states: impl Iterator<Item = Vec<i64>>, mean: &[f64], cinv: &DMatrix<f64>) -> Vec<f64> {
    let m = mean.len();
    let mut d = vec![0.0; m];
    states
        .map(|x| {
            for i in 0..m {
                d[i] = x[i] as f64 - mean[i];
            }
            let mut q = 0.0;
            for j in 0..m {
                for i in 0..m {
                    q += d[i] * cinv[(i, j)] * d[j];
                }
            }
            q
        })
        .collect()
}

/// `exp(-q / 2)` shifted by the smallest `q` so the peak never underflows,
/// then normalized.
fn exp_normalized(q: Vec<f64>) -> Result<Vec<f64>> {
    let qmin = q.iter().copied().fold(f64::INFINITY, f64::min);
    normalized(q.into_iter().map(|v| (-(v - qmin) / 2.0).exp()).collect())
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = v.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Config("initial value has no mass on the truncated space".into()));
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(v)
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Multinomial probability of the counts `x`, where the remaining
/// `n - |x|` trials fall into the complementary outcome.
pub fn multinomial_pmf(n: u32, p: &[f64], x: &[i64]) -> f64 {
    if x.iter().any(|&v| v < 0) {
        return 0.0;
    }
    let total: i64 = x.iter().sum();
    if total > n as i64 {
        return 0.0;
    }
    let rest = n as u64 - total as u64;
    let q = 1.0 - p.iter().sum::<f64>();
    let mut ln = ln_factorial(n as u64) - ln_factorial(rest);
    for (&xi, &pi) in x.iter().zip(p) {
        if xi > 0 {
            if pi == 0.0 {
                return 0.0;
            }
            ln += xi as f64 * pi.ln() - ln_factorial(xi as u64);
        }
    }
    if rest > 0 {
        if q <= 0.0 {
            return 0.0;
        }
        ln += rest as f64 * q.ln();
    }
    ln.exp()
}

fn load_initial_file(path: &Path, space: &TruncatedStateSpace, budget: usize) -> Result<InitialData> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    let got = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    if got == 8 && &magic == SNAPSHOT_MAGIC {
        let snap = read_snapshot(&mut BufReader::new(file))?;
        if snap.space != *space {
            return Err(Error::Dimension(format!(
                "snapshot {} was written for a different state space",
                path.display()
            )));
        }
        return Ok(InitialData::LowRank(snap.state));
    }
    check_budget(space, budget)?;
    let n = space.n_species();
    let mut values = vec![0.0; space.n_states_wide() as usize];
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = || -> Option<(Vec<i64>, f64)> {
            if fields.len() != n + 1 {
                return None;
            }
            let x = fields[..n]
                .iter()
                .map(|f| f.parse().ok())
                .collect::<Option<Vec<i64>>>()?;
            Some((x, fields[n].parse().ok()?))
        };
        match parse() {
            Some((x, p)) => values[space.index_of(&x)?] += p,
            None if lineno == 0 => continue,
            None => {
                return Err(Error::Config(format!(
                    "{}:{}: expected {} integers and a probability",
                    path.display(),
                    lineno + 1,
                    n
                )))
            }
        }
    }
    Ok(InitialData::Dense(DenseDistribution::from_values(
        space,
        normalized(values)?,
    )?))
}

/// Source of initial states for stochastic simulation.
#[derive(Debug, Clone)]
pub enum InitialSampler {
    Point(Vec<i64>),
    Multinomial {
        n: u32,
        p: Vec<f64>,
    },
    Table {
        space: TruncatedStateSpace,
        index: WeightedIndex<f64>,
    },
    Product {
        space: TruncatedStateSpace,
        parts: [WeightedIndex<f64>; 2],
    },
}

impl InitialSampler {
    pub fn from_data(data: &InitialData, space: &TruncatedStateSpace, budget: usize) -> Result<Self> {
        let weights = |w: &[f64]| {
            WeightedIndex::new(w).map_err(|e| Error::Config(format!("initial value cannot be sampled: {e}")))
        };
        match data {
            InitialData::Product { f1, f2 } => Ok(InitialSampler::Product {
                space: space.clone(),
                parts: [weights(f1)?, weights(f2)?],
            }),
            _ => Ok(InitialSampler::Table {
                space: space.clone(),
                index: weights(&data.to_dense(space, budget)?.values)?,
            }),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        match self {
            InitialSampler::Point(x) => x.clone(),
            InitialSampler::Multinomial { n, p } => {
                let mut x = vec![0i64; p.len()];
                for _ in 0..*n {
                    let mut u: f64 = rng.gen();
                    for (xi, &pi) in x.iter_mut().zip(p) {
                        if u < pi {
                            *xi += 1;
                            break;
                        }
                        u -= pi;
                    }
                }
                x
            }
            InitialSampler::Table { space, index } => space
                .state_of(index.sample(rng))
                .expect("weighted index within the grid"),
            InitialSampler::Product { space, parts } => {
                let mut x = vec![0i64; space.n_species()];
                for k in Partition::BOTH {
                    let grid = space.part(k);
                    let local = grid
                        .delinearize(parts[k.index()].sample(rng))
                        .expect("weighted index within the grid");
                    for (&s, v) in grid.species().iter().zip(local) {
                        x[s] = v;
                    }
                }
                x
            }
        }
    }
}
