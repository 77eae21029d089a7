//! Time-frozen coupling coefficients of the K, S and L steps.
//!
//! For channel `mu` the K-step tables are, per partition-1 state `x1`,
//!
//! ```text
//! C1(x1)_jl = sum_x2 X2_j(x2 + nu2) a(x1, x2) X2_l(x2)
//! D1(x1)_jl = sum_x2 X2_j(x2)       a(x1, x2) X2_l(x2)
//! ```
//!
//! with `x2 + nu2` restricted to the truncated box. The propensity only reads
//! its reagents, so `a(x1, x2) = a(x~1, x~2)` on the reduced reagent grids.
//! The reduced mode first groups the factor products by reduced index,
//!
//! ```text
//! G(x~2)_jl = sum_{x2 -> x~2} X2_j(x2 + nu2) X2_l(x2)
//! ```
//!
//! and then contracts `C1(x~1) = sum_x~2 a(x~1, x~2) G(x~2)`. The same
//! partition-1 groupings of `X1` feed both the S-step tensors and the L-step
//! tables, so they are computed once per new `X1`.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ReactionNetwork;
use crate::statespace::{Direction, GridIter, Partition, TruncatedStateSpace, OUTSIDE};

/// How coefficient tables are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientMode {
    /// Reagent-reduced grouped sums.
    #[default]
    Reduced,
    /// Direct double sums over both full partition grids (test oracle).
    Naive,
}

/// Per-channel lookup data, built once per solver.
#[derive(Debug, Clone)]
pub struct ChannelPlan {
    /// `nu` restricted to each partition.
    pub nu: [Vec<i64>; 2],
    /// Partition linear index to reduced reagent index.
    pub map: [Vec<u32>; 2],
    /// Reduced grid sizes `n~1`, `n~2`.
    pub reduced: [usize; 2],
    /// `a(x~1, x~2)` at `x~1 + n~1 * x~2`.
    pub propensity: Vec<f64>,
    /// `x -> x + nu_k`, or `OUTSIDE`.
    pub forward: [Vec<usize>; 2],
    /// `x -> x - nu_k`, or `OUTSIDE`.
    pub backward: [Vec<usize>; 2],
}

impl ChannelPlan {
    #[inline]
    pub fn propensity_at(&self, target: Partition, own: usize, other: usize) -> f64 {
        match target {
            Partition::First => self.propensity[own + self.reduced[0] * other],
            Partition::Second => self.propensity[other + self.reduced[0] * own],
        }
    }
}

fn build_plan(network: &ReactionNetwork, space: &TruncatedStateSpace) -> Result<Vec<ChannelPlan>> {
    let mut plans = Vec::with_capacity(network.n_channels());
    for (mu, ch) in network.channels.iter().enumerate() {
        let mut map = [Vec::new(), Vec::new()];
        let mut reduced = [1, 1];
        let mut reagent_bounds: [Vec<(usize, i64, i64)>; 2] = [Vec::new(), Vec::new()];
        for k in Partition::BOTH {
            let grid = space.part(k);
            let positions: Vec<usize> = ch.reagents.iter().filter_map(|&s| grid.local_position(s)).collect();
            let mut strides = Vec::with_capacity(positions.len());
            let mut size = 1usize;
            for &p in &positions {
                strides.push(size);
                size *= grid.sizes()[p];
                reagent_bounds[k.index()].push((grid.species()[p], grid.lower()[p], grid.upper()[p]));
            }
            reduced[k.index()] = size;
            let mut x = vec![0i64; grid.species().len()];
            map[k.index()] = (0..grid.len())
                .map(|idx| {
                    grid.delinearize_into(idx, &mut x);
                    positions
                        .iter()
                        .zip(&strides)
                        .map(|(&p, &st)| (x[p] - grid.lower()[p]) as usize * st)
                        .sum::<usize>() as u32
                })
                .collect();
        }
        let mut propensity = Vec::with_capacity(reduced[0] * reduced[1]);
        let mut x = vec![0.0; space.n_species()];
        let bounds = |k: usize| -> (Vec<i64>, Vec<i64>) {
            (
                reagent_bounds[k].iter().map(|b| b.1).collect(),
                reagent_bounds[k].iter().map(|b| b.2).collect(),
            )
        };
        let (lo2, hi2) = bounds(1);
        let (lo1, hi1) = bounds(0);
        for q2 in GridIter::new(&lo2, &hi2) {
            for q1 in GridIter::new(&lo1, &hi1) {
                for (b, v) in reagent_bounds[0].iter().zip(&q1) {
                    x[b.0] = *v as f64;
                }
                for (b, v) in reagent_bounds[1].iter().zip(&q2) {
                    x[b.0] = *v as f64;
                }
                let a = ch.evaluate(&x);
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "reaction {}: propensity {} is {a} on the truncated space",
                        mu + 1,
                        ch.propensity
                    )));
                }
                propensity.push(a);
            }
        }
        let nu = [
            space.restrict(Partition::First, &ch.nu),
            space.restrict(Partition::Second, &ch.nu),
        ];
        let sources = |dir: Direction| {
            [
                space.part(Partition::First).shift_sources(&nu[0], dir),
                space.part(Partition::Second).shift_sources(&nu[1], dir),
            ]
        };
        plans.push(ChannelPlan {
            forward: sources(Direction::Forward),
            backward: sources(Direction::Backward),
            nu,
            map,
            reduced,
            propensity,
        });
    }
    Ok(plans)
}

/// Per-channel r x r tables for the K step (`target` = first partition) or
/// the L step (`target` = second partition). Each table is stored
/// column-major, `r * r` values per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionCoefficients {
    pub target: Partition,
    pub rank: usize,
    /// Tables are indexed by the full partition grid instead of the reduced
    /// reagent grid.
    pub full_grid: bool,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

impl PartitionCoefficients {
    /// The `C` table of channel `mu` at table index `idx`.
    pub fn c_at(&self, mu: usize, idx: usize) -> DMatrix<f64> {
        let r2 = self.rank * self.rank;
        DMatrix::from_column_slice(self.rank, self.rank, &self.c[mu][idx * r2..(idx + 1) * r2])
    }

    pub fn d_at(&self, mu: usize, idx: usize) -> DMatrix<f64> {
        let r2 = self.rank * self.rank;
        DMatrix::from_column_slice(self.rank, self.rank, &self.d[mu][idx * r2..(idx + 1) * r2])
    }
}

/// The S-step tensors flattened to `r^2 x r^2` matrices, row `i + r j`,
/// column `k + r l`, so that `vec(dS/dt) = -(E - F) vec(S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct STensors {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl STensors {
    pub fn rank(&self) -> usize {
        (self.e.nrows() as f64).sqrt().round() as usize
    }

    pub fn get_e(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let r = self.rank();
        self.e[(i + r * j, k + r * l)]
    }

    pub fn get_f(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let r = self.rank();
        self.f[(i + r * j, k + r * l)]
    }
}

/// Grouped factor products of one partition: per channel,
/// `shifted(x~)_ij = sum X_i(x + nu) X_j(x)` and `plain(x~)_ij = sum X_i(x) X_j(x)`
/// over the states `x` with reduced index `x~`.
#[derive(Debug, Clone)]
pub struct Moments {
    pub partition: Partition,
    pub rank: usize,
    pub shifted: Vec<Vec<f64>>,
    pub plain: Vec<Vec<f64>>,
}

/// Lazily computed partition-1 moments of the current `X1`, shared between
/// the S-step and L-step builds.
#[derive(Debug, Default)]
pub struct MomentCache(Option<Moments>);

/// Builds coefficient tables for a fixed network and state space.
#[derive(Debug)]
pub struct CoefficientEngine {
    space: TruncatedStateSpace,
    network: ReactionNetwork,
    plans: Vec<ChannelPlan>,
    mode: CoefficientMode,
    ops: AtomicU64,
}

impl CoefficientEngine {
    pub fn new(network: &ReactionNetwork, space: &TruncatedStateSpace, mode: CoefficientMode) -> Result<Self> {
        if network.n_species() != space.n_species() {
            return Err(Error::Dimension(format!(
                "state space has {} species, model has {}",
                space.n_species(),
                network.n_species()
            )));
        }
        Ok(CoefficientEngine {
            space: space.clone(),
            network: network.clone(),
            plans: build_plan(network, space)?,
            mode,
            ops: AtomicU64::new(0),
        })
    }

    pub fn space(&self) -> &TruncatedStateSpace {
        &self.space
    }

    pub fn plans(&self) -> &[ChannelPlan] {
        &self.plans
    }

    pub fn mode(&self) -> CoefficientMode {
        self.mode
    }

    /// Multiply-add count accumulated by the reduced builders.
    pub fn ops(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    pub fn reset_ops(&self) {
        self.ops.store(0, Ordering::Relaxed);
    }

    fn count(&self, n: usize) {
        self.ops.fetch_add(n as u64, Ordering::Relaxed);
    }

    /// Table row used for partition state `x` of the rhs acting on `target`.
    #[inline]
    pub fn table_index(&self, coeffs: &PartitionCoefficients, mu: usize, x: usize) -> usize {
        if coeffs.full_grid {
            x
        } else {
            self.plans[mu].map[coeffs.target.index()][x] as usize
        }
    }

    pub fn moments(&self, k: Partition, x: &DMatrix<f64>) -> Moments {
        let r = x.ncols();
        let r2 = r * r;
        let n = x.nrows();
        let data = x.as_slice();
        let per_channel: Vec<(Vec<f64>, Vec<f64>)> = self
            .plans
            .par_iter()
            .map(|plan| {
                let size = plan.reduced[k.index()];
                let map = &plan.map[k.index()];
                let fwd = &plan.forward[k.index()];
                let mut shifted = vec![0.0; size * r2];
                let mut plain = vec![0.0; size * r2];
                for row in 0..n {
                    let g = map[row] as usize * r2;
                    let f = fwd[row];
                    for j in 0..r {
                        let xj = data[row + n * j];
                        for i in 0..r {
                            plain[g + i + r * j] += data[row + n * i] * xj;
                        }
                        if f != OUTSIDE {
                            for i in 0..r {
                                shifted[g + i + r * j] += data[f + n * i] * xj;
                            }
                        }
                    }
                }
                (shifted, plain)
            })
            .collect();
        self.count(2 * self.plans.len() * n * r2);
        let (shifted, plain) = per_channel.into_iter().unzip();
        Moments {
            partition: k,
            rank: r,
            shifted,
            plain,
        }
    }

    fn contract(&self, target: Partition, other: &Moments) -> PartitionCoefficients {
        assert_eq!(other.partition, target.other());
        let rank = other.rank;
        let r2 = rank * rank;
        let tables: Vec<(Vec<f64>, Vec<f64>)> = self
            .plans
            .par_iter()
            .enumerate()
            .map(|(mu, plan)| {
                let n_own = plan.reduced[target.index()];
                let n_other = plan.reduced[target.other().index()];
                let mut c = vec![0.0; n_own * r2];
                let mut d = vec![0.0; n_own * r2];
                for own in 0..n_own {
                    let cc = &mut c[own * r2..(own + 1) * r2];
                    let dd = &mut d[own * r2..(own + 1) * r2];
                    for o in 0..n_other {
                        let a = plan.propensity_at(target, own, o);
                        let gs = &other.shifted[mu][o * r2..(o + 1) * r2];
                        let gp = &other.plain[mu][o * r2..(o + 1) * r2];
                        for e in 0..r2 {
                            cc[e] += a * gs[e];
                            dd[e] += a * gp[e];
                        }
                    }
                }
                (c, d)
            })
            .collect();
        self.count(
            2 * self
                .plans
                .iter()
                .map(|p| p.reduced[0] * p.reduced[1] * r2)
                .sum::<usize>(),
        );
        let (c, d) = tables.into_iter().unzip();
        PartitionCoefficients {
            target,
            rank,
            full_grid: false,
            c,
            d,
        }
    }

    /// `C1`, `D1` from the current `X2`.
    pub fn k_coefficients(&self, x2: &DMatrix<f64>) -> PartitionCoefficients {
        match self.mode {
            CoefficientMode::Reduced => {
                let m2 = self.moments(Partition::Second, x2);
                self.contract(Partition::First, &m2)
            }
            CoefficientMode::Naive => naive_partition_coefficients(&self.network, &self.space, Partition::First, x2),
        }
    }

    /// `C2`, `D2` from the current `X1`.
    pub fn l_coefficients(&self, x1: &DMatrix<f64>, cache: &mut MomentCache) -> PartitionCoefficients {
        match self.mode {
            CoefficientMode::Reduced => {
                let m1 = cache.0.get_or_insert_with(|| self.moments(Partition::First, x1));
                self.contract(Partition::Second, m1)
            }
            CoefficientMode::Naive => naive_partition_coefficients(&self.network, &self.space, Partition::Second, x1),
        }
    }

    /// `E`, `F` from the current `X1` and the K-step tables built from the
    /// current `X2`.
    pub fn s_coefficients(
        &self,
        x1: &DMatrix<f64>,
        k_coeffs: &PartitionCoefficients,
        cache: &mut MomentCache,
    ) -> Result<STensors> {
        if k_coeffs.target != Partition::First || k_coeffs.rank != x1.ncols() {
            return Err(Error::Dimension(
                "S-step tensors need K-step tables of matching rank".into(),
            ));
        }
        match self.mode {
            CoefficientMode::Reduced => {
                if k_coeffs.full_grid {
                    return Err(Error::Dimension(
                        "reduced S-step build needs reduced K-step tables".into(),
                    ));
                }
                let m1 = cache.0.get_or_insert_with(|| self.moments(Partition::First, x1));
                Ok(self.tensors_from_moments(k_coeffs, m1))
            }
            CoefficientMode::Naive => naive_s_coefficients(&self.network, &self.space, x1, k_coeffs),
        }
    }

    fn tensors_from_moments(&self, k_coeffs: &PartitionCoefficients, m1: &Moments) -> STensors {
        let r = k_coeffs.rank;
        let r2 = r * r;
        let partial: Vec<(DMatrix<f64>, DMatrix<f64>)> = self
            .plans
            .par_iter()
            .enumerate()
            .map(|(mu, plan)| {
                let mut e = DMatrix::zeros(r2, r2);
                let mut f = DMatrix::zeros(r2, r2);
                for g in 0..plan.reduced[0] {
                    let c = &k_coeffs.c[mu][g * r2..(g + 1) * r2];
                    let d = &k_coeffs.d[mu][g * r2..(g + 1) * r2];
                    let hs = &m1.shifted[mu][g * r2..(g + 1) * r2];
                    let hp = &m1.plain[mu][g * r2..(g + 1) * r2];
                    // E(i + r j, k + r l) += C_jl H_ik
                    for l in 0..r {
                        for j in 0..r {
                            let cjl = c[j + r * l];
                            let djl = d[j + r * l];
                            for k in 0..r {
                                let col = k + r * l;
                                for i in 0..r {
                                    e[(i + r * j, col)] += cjl * hs[i + r * k];
                                    f[(i + r * j, col)] += djl * hp[i + r * k];
                                }
                            }
                        }
                    }
                }
                (e, f)
            })
            .collect();
        self.count(2 * self.plans.iter().map(|p| p.reduced[0]).sum::<usize>() * r2 * r2);
        let mut e = DMatrix::zeros(r2, r2);
        let mut f = DMatrix::zeros(r2, r2);
        for (pe, pf) in partial {
            e += pe;
            f += pf;
        }
        STensors { e, f }
    }
}

/// Linear index of `x + delta` in a partition grid, computed from
/// coordinates, or `None` when it leaves the box.
fn shifted_index(space: &TruncatedStateSpace, k: Partition, x: &[i64], delta: &[i64]) -> Option<usize> {
    let y: Vec<i64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
    space.part(k).linearize(&y).ok()
}

/// Direct evaluation of the K-step (`target` = first) or L-step (`target` =
/// second) tables over the full grids: for every state `x_t` of the target
/// partition,
/// `C(x_t)_jl = sum_{x_o} X_j(x_o + nu_o) a(x) X_l(x_o)` and the same
/// without the shift for `D`.
pub fn naive_partition_coefficients(
    network: &ReactionNetwork,
    space: &TruncatedStateSpace,
    target: Partition,
    x_other: &DMatrix<f64>,
) -> PartitionCoefficients {
    let r = x_other.ncols();
    let r2 = r * r;
    let other = target.other();
    let tgrid = space.part(target);
    let ogrid = space.part(other);
    let t_states: Vec<Vec<i64>> = tgrid.states().collect();
    let o_states: Vec<Vec<i64>> = ogrid.states().collect();
    let tables: Vec<(Vec<f64>, Vec<f64>)> = network
        .channels
        .par_iter()
        .map(|ch| {
            let nu_o = space.restrict(other, &ch.nu);
            let mut c = vec![0.0; t_states.len() * r2];
            let mut d = vec![0.0; t_states.len() * r2];
            let mut full = vec![0i64; space.n_species()];
            for (ti, xt) in t_states.iter().enumerate() {
                for (&s, &v) in tgrid.species().iter().zip(xt) {
                    full[s] = v;
                }
                for (oi, xo) in o_states.iter().enumerate() {
                    for (&s, &v) in ogrid.species().iter().zip(xo) {
                        full[s] = v;
                    }
                    let a = ch.evaluate_at(&full);
                    let dest = shifted_index(space, other, xo, &nu_o);
                    for l in 0..r {
                        for j in 0..r {
                            d[ti * r2 + j + r * l] += x_other[(oi, j)] * a * x_other[(oi, l)];
                            if let Some(p) = dest {
                                c[ti * r2 + j + r * l] += x_other[(p, j)] * a * x_other[(oi, l)];
                            }
                        }
                    }
                }
            }
            (c, d)
        })
        .collect();
    let (c, d) = tables.into_iter().unzip();
    PartitionCoefficients {
        target,
        rank: r,
        full_grid: true,
        c,
        d,
    }
}

/// Direct evaluation of the S-step tensors,
/// `E_ijkl = sum_mu sum_x1 X1_i(x1 + nu1) C1(x1)_jl X1_k(x1)` and `F` with
/// `D1` and no shift, from full-grid K-step tables.
pub fn naive_s_coefficients(
    network: &ReactionNetwork,
    space: &TruncatedStateSpace,
    x1: &DMatrix<f64>,
    k_coeffs: &PartitionCoefficients,
) -> Result<STensors> {
    if !k_coeffs.full_grid {
        return Err(Error::Dimension(
            "naive S-step build needs full-grid K-step tables".into(),
        ));
    }
    let r = x1.ncols();
    let r2 = r * r;
    let grid = space.part(Partition::First);
    let states: Vec<Vec<i64>> = grid.states().collect();
    let mut e = DMatrix::zeros(r2, r2);
    let mut f = DMatrix::zeros(r2, r2);
    for (mu, ch) in network.channels.iter().enumerate() {
        let nu1 = space.restrict(Partition::First, &ch.nu);
        for (xi, x) in states.iter().enumerate() {
            let dest = shifted_index(space, Partition::First, x, &nu1);
            let c = &k_coeffs.c[mu][xi * r2..(xi + 1) * r2];
            let d = &k_coeffs.d[mu][xi * r2..(xi + 1) * r2];
            for i in 0..r {
                for j in 0..r {
                    for k in 0..r {
                        for l in 0..r {
                            let row = i + r * j;
                            let col = k + r * l;
                            if let Some(p) = dest {
                                e[(row, col)] += x1[(p, i)] * c[j + r * l] * x1[(xi, k)];
                            }
                            f[(row, col)] += x1[(xi, i)] * d[j + r * l] * x1[(xi, k)];
                        }
                    }
                }
            }
        }
    }
    Ok(STensors { e, f })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::orthonormalize;
    use crate::model::{builtin, parse_model};

    fn random_orthonormal(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let m = DMatrix::from_fn(n, r, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        orthonormalize(&m).0
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn expand(engine: &CoefficientEngine, t: &PartitionCoefficients) -> PartitionCoefficients {
        let r2 = t.rank * t.rank;
        let n = engine.space().part(t.target).len();
        let grow = |tabs: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            tabs.iter()
                .enumerate()
                .map(|(mu, tab)| {
                    (0..n)
                        .flat_map(|x| {
                            let g = engine.table_index(t, mu, x);
                            tab[g * r2..(g + 1) * r2].to_vec()
                        })
                        .collect()
                })
                .collect()
        };
        PartitionCoefficients {
            target: t.target,
            rank: t.rank,
            full_grid: true,
            c: grow(&t.c),
            d: grow(&t.d),
        }
    }

    #[test]
    fn constant_propensity_gives_scaled_identity() {
        let net =
            parse_model(r#"{"species": ["A", "B"], "reactions": [{"nu": [1, 0], "propensity": "2.5"}]}"#).unwrap();
        let space = TruncatedStateSpace::new(&[0, 0], &[4, 6], &[0]).unwrap();
        let engine = CoefficientEngine::new(&net, &space, CoefficientMode::Reduced).unwrap();
        let x2 = random_orthonormal(7, 3, 1);
        let k = engine.k_coefficients(&x2);
        assert_eq!(k.c[0].len(), 9);
        let eye = DMatrix::<f64>::identity(3, 3) * 2.5;
        assert!((k.c_at(0, 0) - &eye).amax() < 1e-14);
        assert!((k.d_at(0, 0) - &eye).amax() < 1e-14);
        let x1 = random_orthonormal(5, 3, 2);
        let l = engine.l_coefficients(&x1, &mut MomentCache::default());
        // nu1 != 0, so C2 differs from D2 but D2 is still c I
        assert!((l.d_at(0, 0) - &eye).amax() < 1e-14);
    }

    #[test]
    fn zero_propensity_gives_zero_tables() {
        let net =
            parse_model(r#"{"species": ["A", "B"], "reactions": [{"nu": [1, -1], "propensity": "0*x1*x2"}]}"#).unwrap();
        let space = TruncatedStateSpace::new(&[0, 0], &[3, 3], &[0]).unwrap();
        let engine = CoefficientEngine::new(&net, &space, CoefficientMode::Reduced).unwrap();
        let x1 = random_orthonormal(4, 2, 3);
        let x2 = random_orthonormal(4, 2, 4);
        let k = engine.k_coefficients(&x2);
        assert!(k.c[0].iter().chain(&k.d[0]).all(|&v| v == 0.0));
        let st = engine.s_coefficients(&x1, &k, &mut MomentCache::default()).unwrap();
        assert_eq!(st.e.amax(), 0.0);
        assert_eq!(st.f.amax(), 0.0);
    }

    #[test]
    fn toggle_reduced_matches_naive() {
        let net = parse_model(builtin::TOGGLE).unwrap();
        let space = TruncatedStateSpace::new(&[0, 0], &[50, 50], &[0]).unwrap();
        let engine = CoefficientEngine::new(&net, &space, CoefficientMode::Reduced).unwrap();
        let x1 = random_orthonormal(51, 4, 5);
        let x2 = random_orthonormal(51, 4, 6);
        let k = engine.k_coefficients(&x2);
        // reaction 3 has no partition-1 reagent: a single table entry
        assert_eq!(k.c[2].len(), 16);
        let naive_k = naive_partition_coefficients(&net, &space, Partition::First, &x2);
        let full = expand(&engine, &k);
        for mu in 0..4 {
            assert!(max_diff(&full.c[mu], &naive_k.c[mu]) < 1e-13);
            assert!(max_diff(&full.d[mu], &naive_k.d[mu]) < 1e-13);
        }
        let mut cache = MomentCache::default();
        let st = engine.s_coefficients(&x1, &k, &mut cache).unwrap();
        let naive_st = naive_s_coefficients(&net, &space, &x1, &naive_k).unwrap();
        assert!((&st.e - &naive_st.e).amax() < 1e-13);
        assert!((&st.f - &naive_st.f).amax() < 1e-13);
        let l = engine.l_coefficients(&x1, &mut cache);
        let naive_l = naive_partition_coefficients(&net, &space, Partition::Second, &x1);
        let full = expand(&engine, &l);
        for mu in 0..4 {
            assert!(max_diff(&full.c[mu], &naive_l.c[mu]) < 1e-13);
            assert!(max_diff(&full.d[mu], &naive_l.d[mu]) < 1e-13);
        }
    }

    #[test]
    fn d_tables_are_symmetric() {
        let net = parse_model(builtin::TOGGLE).unwrap();
        let space = TruncatedStateSpace::new(&[0, 0], &[20, 20], &[0]).unwrap();
        let engine = CoefficientEngine::new(&net, &space, CoefficientMode::Reduced).unwrap();
        let k = engine.k_coefficients(&random_orthonormal(21, 3, 9));
        for mu in 0..4 {
            for g in 0..k.d[mu].len() / 9 {
                let d = k.d_at(mu, g);
                assert!((&d - d.transpose()).amax() < 1e-15);
                assert!(d.symmetric_eigenvalues().iter().all(|&v| v > -1e-14));
            }
        }
    }

    #[test]
    fn swapped_partitions_mirror_tables() {
        let net = parse_model(builtin::TOGGLE).unwrap();
        let a = TruncatedStateSpace::new(&[0, 0], &[12, 12], &[0]).unwrap();
        let b = TruncatedStateSpace::new(&[0, 0], &[12, 12], &[1]).unwrap();
        let ea = CoefficientEngine::new(&net, &a, CoefficientMode::Reduced).unwrap();
        let eb = CoefficientEngine::new(&net, &b, CoefficientMode::Reduced).unwrap();
        let x = random_orthonormal(13, 3, 21);
        let ka = ea.k_coefficients(&x);
        let lb = eb.l_coefficients(&x, &mut MomentCache::default());
        // in `b` the second partition holds S1, so its L-step tables are the
        // K-step tables of `a`
        let (fa, fb) = (expand(&ea, &ka), expand(&eb, &lb));
        for mu in 0..4 {
            assert!(max_diff(&fa.c[mu], &fb.c[mu]) < 1e-14);
            assert!(max_diff(&fa.d[mu], &fb.d[mu]) < 1e-14);
        }
    }

    #[test]
    fn reduced_cost_ignores_partition_without_reagents() {
        // propensity reads only x2, so K-step cost must not grow with n1
        let net = parse_model(
            r#"{"species": ["A", "B"], "reactions": [
                {"nu": [1, 0], "propensity": "1/(1+x2)"},
                {"nu": [0, -1], "propensity": "0.1*x2"}]}"#,
        )
        .unwrap();
        let x2 = random_orthonormal(30, 4, 7);
        let mut costs = Vec::new();
        for n1 in [20, 40, 80] {
            let space = TruncatedStateSpace::new(&[0, 0], &[n1 - 1, 29], &[0]).unwrap();
            let engine = CoefficientEngine::new(&net, &space, CoefficientMode::Reduced).unwrap();
            engine.k_coefficients(&x2);
            costs.push(engine.ops());
        }
        assert_eq!(costs[0], costs[1]);
        assert_eq!(costs[1], costs[2]);
    }
}
