//! Gillespie direct-method simulation in free space, with seeded ensembles.
//!
//! Run `i` of an ensemble with seed `s` draws from the ChaCha20 stream `i`
//! of the key derived from `s`, so counts never depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::initial::InitialSampler;
use crate::model::ReactionNetwork;
use crate::observe::{GridSlice, SliceSpec};
use crate::statespace::TruncatedStateSpace;

/// Identifier written to run metadata.
pub const RNG_ALGORITHM: &str = "chacha20 (rand_chacha seed_from_u64(seed), stream = run index)";

/// The generator of run `run` in an ensemble seeded with `seed`.
pub fn run_rng(seed: u64, run: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

/// Propensity bookkeeping with a reaction dependency graph.
struct Simulator<'a> {
    network: &'a ReactionNetwork,
    /// Channels whose propensity reads a species changed by channel `mu`.
    affected: Vec<Vec<usize>>,
}

impl<'a> Simulator<'a> {
    fn new(network: &'a ReactionNetwork) -> Self {
        let affected = network
            .channels
            .iter()
            .map(|fired| {
                network
                    .channels
                    .iter()
                    .enumerate()
                    .filter(|(_, ch)| ch.reagents.iter().any(|&s| fired.nu[s] != 0))
                    .map(|(nu, _)| nu)
                    .collect()
            })
            .collect();
        Simulator { network, affected }
    }

    fn propensity(&self, mu: usize, xf: &[f64]) -> Result<f64> {
        let a = self.network.channels[mu].evaluate(xf);
        if !a.is_finite() || a < 0.0 {
            return Err(Error::Domain(format!(
                "propensity of reaction {} is {a} at {xf:?}",
                mu + 1
            )));
        }
        Ok(a)
    }

    /// Advances `x` through the sorted `times`, recording the state at each.
    fn path<R: Rng + ?Sized>(&self, x0: &[i64], times: &[f64], rng: &mut R) -> Result<Vec<Vec<i64>>> {
        if let Some(i) = x0.iter().position(|&v| v < 0) {
            return Err(Error::Domain(format!("initial population of x{} is negative", i + 1)));
        }
        let mut x = x0.to_vec();
        let mut xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut a = (0..self.network.n_channels())
            .map(|mu| self.propensity(mu, &xf))
            .collect::<Result<Vec<f64>>>()?;
        let mut out = Vec::with_capacity(times.len());
        let mut t = 0.0;
        let mut next = 0;
        while next < times.len() {
            let a0: f64 = a.iter().sum();
            let dt = if a0 > 0.0 {
                -(1.0 - rng.gen::<f64>()).ln() / a0
            } else {
                f64::INFINITY
            };
            while next < times.len() && t + dt > times[next] {
                out.push(x.clone());
                next += 1;
            }
            if next == times.len() {
                break;
            }
            t += dt;
            let target = rng.gen::<f64>() * a0;
            let mut acc = 0.0;
            let mut mu = a.iter().rposition(|&v| v > 0.0).expect("a0 > 0");
            for (j, &aj) in a.iter().enumerate() {
                acc += aj;
                if target < acc {
                    mu = j;
                    break;
                }
            }
            for (s, &d) in self.network.channels[mu].nu.iter().enumerate() {
                if d != 0 {
                    x[s] += d;
                    if x[s] < 0 {
                        return Err(Error::Domain(format!(
                            "reaction {} drove x{} negative; its propensity must vanish there",
                            mu + 1,
                            s + 1
                        )));
                    }
                    xf[s] = x[s] as f64;
                }
            }
            for &nu in &self.affected[mu] {
                a[nu] = self.propensity(nu, &xf)?;
            }
        }
        Ok(out)
    }
}

/// One trajectory from `x0` to `t_end`; returns the final state.
pub fn ssa_trajectory<R: Rng + ?Sized>(
    network: &ReactionNetwork,
    x0: &[i64],
    t_end: f64,
    rng: &mut R,
) -> Result<Vec<i64>> {
    check_times(&[t_end])?;
    Ok(Simulator::new(network).path(x0, &[t_end], rng)?.remove(0))
}

/// States of one trajectory at each of the sorted `times`.
pub fn ssa_sample_path<R: Rng + ?Sized>(
    network: &ReactionNetwork,
    x0: &[i64],
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<Vec<i64>>> {
    check_times(times)?;
    Simulator::new(network).path(x0, times, rng)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(
            "sample times must be finite, nonnegative and sorted".into(),
        ));
    }
    Ok(())
}

/// Counts of one slice request over its query box.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCounts {
    pub spec: SliceSpec,
    pub counts: Vec<u64>,
}

/// Ensemble statistics at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct SsaEnsembleResult {
    pub time: f64,
    pub n_runs: u64,
    pub seed: u64,
    pub lower: Vec<i64>,
    pub upper: Vec<i64>,
    /// Per species, counts over `lower..=upper`.
    pub marginals: Vec<Vec<u64>>,
    /// Per species, runs that ended outside that species' bounds.
    pub marginal_outside: Vec<u64>,
    pub slices: Vec<SliceCounts>,
    /// Runs that ended outside the truncated space.
    pub outside: u64,
}

impl SsaEnsembleResult {
    fn empty(time: f64, n_runs: u64, seed: u64, space: &TruncatedStateSpace, slices: &[SliceSpec]) -> Self {
        SsaEnsembleResult {
            time,
            n_runs,
            seed,
            lower: space.lower().to_vec(),
            upper: space.upper().to_vec(),
            marginals: space
                .lower()
                .iter()
                .zip(space.upper())
                .map(|(lo, hi)| vec![0; (hi - lo + 1) as usize])
                .collect(),
            marginal_outside: vec![0; space.n_species()],
            slices: slices
                .iter()
                .map(|spec| SliceCounts {
                    counts: vec![0; GridSlice::zeros(space, spec).values.len()],
                    spec: spec.clone(),
                })
                .collect(),
            outside: 0,
        }
    }

    fn record(&mut self, x: &[i64], slice_grids: &[GridSlice]) {
        let mut inside = true;
        for (i, &v) in x.iter().enumerate() {
            if v < self.lower[i] || v > self.upper[i] {
                self.marginal_outside[i] += 1;
                inside = false;
            } else {
                self.marginals[i][(v - self.lower[i]) as usize] += 1;
            }
        }
        if !inside {
            self.outside += 1;
            return;
        }
        for (sc, grid) in self.slices.iter_mut().zip(slice_grids) {
            if sc.spec.matches(x) {
                let q: Vec<i64> = grid.species.iter().map(|&s| x[s]).collect();
                sc.counts[grid.index_of(&q)] += 1;
            }
        }
    }

    fn merge(mut self, other: &SsaEnsembleResult) -> Self {
        let add = |a: &mut [u64], b: &[u64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        for (a, b) in self.marginals.iter_mut().zip(&other.marginals) {
            add(a, b);
        }
        add(&mut self.marginal_outside, &other.marginal_outside);
        for (a, b) in self.slices.iter_mut().zip(&other.slices) {
            add(&mut a.counts, &b.counts);
        }
        self.outside += other.outside;
        self
    }

    /// Empirical marginal of species `i` over its bounds.
    pub fn marginal_probabilities(&self, i: usize) -> Vec<f64> {
        self.marginals[i]
            .iter()
            .map(|&c| c as f64 / self.n_runs as f64)
            .collect()
    }

    /// Empirical slice `j` as probabilities.
    pub fn slice_probabilities(&self, space: &TruncatedStateSpace, j: usize) -> GridSlice {
        let sc = &self.slices[j];
        let mut g = GridSlice::zeros(space, &sc.spec);
        for (v, &c) in g.values.iter_mut().zip(&sc.counts) {
            *v = c as f64 / self.n_runs as f64;
        }
        g
    }
}

/// Ensemble settings.
#[derive(Debug, Clone)]
pub struct EnsembleSpec<'a> {
    pub times: &'a [f64],
    pub n_runs: u64,
    pub seed: u64,
    pub slices: &'a [SliceSpec],
}

/// Runs `n_runs` independent trajectories and histograms them at each time.
/// Each run first draws its initial state from `init` on its own stream.
pub fn ssa_ensemble(
    network: &ReactionNetwork,
    init: &InitialSampler,
    space: &TruncatedStateSpace,
    spec: &EnsembleSpec,
) -> Result<Vec<SsaEnsembleResult>> {
    if spec.n_runs == 0 {
        return Err(Error::Config("ensemble needs at least one run".into()));
    }
    if network.n_species() != space.n_species() {
        return Err(Error::Dimension("state space does not match the network".into()));
    }
    check_times(spec.times)?;
    for s in spec.slices {
        s.validate(space)?;
    }
    let sim = Simulator::new(network);
    let grids: Vec<GridSlice> = spec.slices.iter().map(|s| GridSlice::zeros(space, s)).collect();
    let empty = || -> Vec<SsaEnsembleResult> {
        spec.times
            .iter()
            .map(|&t| SsaEnsembleResult::empty(t, spec.n_runs, spec.seed, space, spec.slices))
            .collect()
    };
    let merge = |a: Vec<SsaEnsembleResult>, b: Vec<SsaEnsembleResult>| {
        a.into_iter().zip(&b).map(|(x, y)| x.merge(y)).collect::<Vec<_>>()
    };
    (0..spec.n_runs)
        .into_par_iter()
        .try_fold(empty, |mut acc, run| -> Result<_> {
            let mut rng = run_rng(spec.seed, run);
            let x0 = init.sample(&mut rng);
            for (res, x) in acc.iter_mut().zip(sim.path(&x0, spec.times, &mut rng)?) {
                res.record(&x, &grids);
            }
            Ok(acc)
        })
        .try_reduce(empty, |a, b| Ok(merge(a, b)))
}

/// Total-variation distance `sum |p - q| / 2` between two distributions on
/// the same bins.
pub fn total_variation_counts(counts: &[u64], n_runs: u64, exact: &[f64]) -> f64 {
    counts
        .iter()
        .zip(exact)
        .map(|(&c, &q)| (c as f64 / n_runs as f64 - q).abs())
        .sum::<f64>()
        / 2.0
}
