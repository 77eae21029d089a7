#![allow(dead_code)]

use lowrank_cme::coefficients::CoefficientMode;
use lowrank_cme::initial::{Covariance, InitialCondition};
use lowrank_cme::integrator::{SolverConfig, SplittingOrder, StepRule, SubstepScheme, Substeps};
use lowrank_cme::lowrank::{orthonormalize, DEFAULT_DENSE_BUDGET};
use lowrank_cme::model::{builtin, parse_model, ReactionNetwork};
use lowrank_cme::reference::DenseDistribution;
use lowrank_cme::statespace::TruncatedStateSpace;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BUDGET: usize = DEFAULT_DENSE_BUDGET;

pub fn toggle() -> ReactionNetwork {
    parse_model(builtin::TOGGLE).unwrap()
}

pub fn lambda_phage() -> ReactionNetwork {
    parse_model(builtin::LAMBDA_PHAGE).unwrap()
}

pub fn bax() -> ReactionNetwork {
    parse_model(builtin::BAX).unwrap()
}

pub fn square(upper: i64) -> TruncatedStateSpace {
    TruncatedStateSpace::new(&[0, 0], &[upper, upper], &[0]).unwrap()
}

/// The correlated Gaussian used as the toggle switch initial value.
pub fn toggle_gaussian() -> InitialCondition {
    InitialCondition::Gaussian {
        mean: vec![30.0, 5.0],
        covariance: Covariance::Matrix(vec![vec![37.5, -7.5], vec![-7.5, 37.5]]),
    }
}

pub fn dense_initial(ic: &InitialCondition, space: &TruncatedStateSpace) -> DenseDistribution {
    ic.materialize(space, BUDGET).unwrap().to_dense(space, BUDGET).unwrap()
}

pub fn fixed_config(
    order: SplittingOrder,
    tau: f64,
    k: usize,
    rank: usize,
    t_end: f64,
    outputs: Vec<f64>,
) -> SolverConfig {
    SolverConfig {
        order,
        step: StepRule::Fixed { tau },
        substeps: Substeps::uniform(k),
        scheme: SubstepScheme::Euler,
        t_end,
        rank,
        output_times: outputs,
        coefficient_mode: CoefficientMode::Reduced,
    }
}

pub fn random_orthonormal(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-0.5..0.5));
    orthonormalize(&m).0
}

/// Two-species network (`X`, inert `D`) with a single linear death channel.
pub fn linear_death(c: f64) -> ReactionNetwork {
    parse_model(&format!(
        r#"{{"species": ["X", "D"], "parameters": {{"c": {c}}},
            "reactions": [{{"nu": [-1, 0], "propensity": "c*x1"}}]}}"#
    ))
    .unwrap()
}

/// Birth at rate `lambda`, death at rate `mu*x`; inert second species.
pub fn birth_death(lambda: f64, mu: f64) -> ReactionNetwork {
    parse_model(&format!(
        r#"{{"species": ["X", "D"], "parameters": {{"l": {lambda}, "m": {mu}}},
            "reactions": [{{"nu": [1, 0], "propensity": "l"}},
                          {{"nu": [-1, 0], "propensity": "m*x1"}}]}}"#
    ))
    .unwrap()
}

pub fn ln_binomial(n: u64, k: u64) -> f64 {
    let lg = |m: u64| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    lg(n) - lg(k) - lg(n - k)
}

/// `Binomial(n, p)` probabilities for `k = 0..=n`.
pub fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    (0..=n)
        .map(|k| (ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp())
        .collect()
}

/// `Poisson(lambda)` probabilities for `k = 0..len`.
pub fn poisson_pmf(lambda: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut p = (-lambda).exp();
    for k in 0..len {
        out.push(p);
        p *= lambda / (k + 1) as f64;
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
