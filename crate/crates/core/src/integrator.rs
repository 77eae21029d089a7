//! Projector-splitting time integration of the factored state.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientEngine, CoefficientMode, MomentCache, PartitionCoefficients};
use crate::error::{Error, Result};
use crate::lowrank::{orthonormalize, LowRankState};
use crate::model::ReactionNetwork;
use crate::statespace::{TruncatedStateSpace, OUTSIDE};

/// First-order Lie–Trotter or second-order Strang splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SplittingOrder {
    Lie,
    Strang,
}

impl TryFrom<u8> for SplittingOrder {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(SplittingOrder::Lie),
            2 => Ok(SplittingOrder::Strang),
            _ => Err(format!("splitting order must be 1 or 2, got {v}")),
        }
    }
}

impl From<SplittingOrder> for u8 {
    fn from(o: SplittingOrder) -> u8 {
        match o {
            SplittingOrder::Lie => 1,
            SplittingOrder::Strang => 2,
        }
    }
}

/// Integrator used inside each splitting phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubstepScheme {
    #[default]
    Euler,
    Rk4,
}

/// Substep counts per phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substeps {
    pub k: usize,
    pub s: usize,
    pub l: usize,
}

impl Substeps {
    pub fn uniform(k: usize) -> Self {
        Substeps { k, s: k, l: k }
    }
}

/// How the step size is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    Fixed {
        tau: f64,
    },
    Variable {
        tau_min: f64,
        #[serde(default = "unit_cfl")]
        c_cfl: f64,
    },
}

fn unit_cfl() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub order: SplittingOrder,
    pub step: StepRule,
    pub substeps: Substeps,
    pub scheme: SubstepScheme,
    pub t_end: f64,
    pub rank: usize,
    pub output_times: Vec<f64>,
    pub coefficient_mode: CoefficientMode,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be finite and >= 0, got {}", self.t_end));
        }
        match self.step {
            StepRule::Fixed { tau } if !(tau > 0.0 && tau.is_finite()) => {
                return bad(format!("tau must be positive, got {tau}"));
            }
            StepRule::Variable { tau_min, c_cfl } if !(tau_min > 0.0 && c_cfl > 0.0) => {
                return bad("tau_min and c_cfl must be positive".into());
            }
            _ => {}
        }
        if self.substeps.k == 0 || self.substeps.s == 0 || self.substeps.l == 0 {
            return bad("substep counts must be >= 1".into());
        }
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if self.output_times.windows(2).any(|w| w[1] < w[0])
            || self.output_times.iter().any(|&t| t < 0.0 || t > self.t_end)
        {
            return bad("output times must be sorted and lie in [0, t_end]".into());
        }
        Ok(())
    }
}

/// One entry of the call sequence of a splitting step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    KCoefficients,
    SCoefficients,
    LCoefficients,
    K(f64),
    S(f64),
    L(f64),
    QrX1,
    QrX2,
}

/// Advances `y' = rhs(y)` by `tau` with `k` substeps of size `tau / k`.
pub fn substep_integrate<F>(
    rhs: F,
    y0: &DMatrix<f64>,
    tau: f64,
    k: usize,
    scheme: SubstepScheme,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    if k == 0 {
        return Err(Error::Config("substep count must be >= 1".into()));
    }
    let h = tau / k as f64;
    let mut y = y0.clone();
    for i in 0..k {
        match scheme {
            SubstepScheme::Euler => {
                let f = rhs(&y);
                y += f * h;
            }
            SubstepScheme::Rk4 => {
                let k1 = rhs(&y);
                let k2 = rhs(&(&y + &k1 * (h / 2.0)));
                let k3 = rhs(&(&y + &k2 * (h / 2.0)));
                let k4 = rhs(&(&y + &k3 * h));
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Instability(format!(
                "non-finite values after substep {} of {k}; increase the number of substeps",
                i + 1
            )));
        }
    }
    Ok(y)
}

/// `-(E - F) vec(S)` reshaped to `r x r`, given `g = E - F`.
pub fn s_rhs(s: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let r = s.nrows();
    let v = DVector::from_column_slice(s.as_slice());
    let out = -(g * v);
    DMatrix::from_column_slice(r, r, out.as_slice())
}

/// Projector-splitting solver bound to one network and state space.
#[derive(Debug)]
pub struct DlrSolver {
    engine: CoefficientEngine,
    order: SplittingOrder,
    substeps: Substeps,
    scheme: SubstepScheme,
}

impl DlrSolver {
    pub fn new(
        network: &ReactionNetwork,
        space: &TruncatedStateSpace,
        order: SplittingOrder,
        substeps: Substeps,
        scheme: SubstepScheme,
        mode: CoefficientMode,
    ) -> Result<Self> {
        if substeps.k == 0 || substeps.s == 0 || substeps.l == 0 {
            return Err(Error::Config("substep counts must be >= 1".into()));
        }
        Ok(DlrSolver {
            engine: CoefficientEngine::new(network, space, mode)?,
            order,
            substeps,
            scheme,
        })
    }

    pub fn engine(&self) -> &CoefficientEngine {
        &self.engine
    }

    pub fn order(&self) -> SplittingOrder {
        self.order
    }

    /// Shared K/L right-hand side: per channel, the gain term reads the
    /// source row `x - nu` through the table at that source, the loss term
    /// the row `x` itself.
    pub fn partition_rhs(&self, y: &DMatrix<f64>, coeffs: &PartitionCoefficients) -> DMatrix<f64> {
        const CHUNK: usize = 256;
        let (n, r) = y.shape();
        let r2 = r * r;
        let k = coeffs.target.index();
        let data = y.as_slice();
        let plans = self.engine.plans();
        let mut rows = vec![0.0; n * r];
        rows.par_chunks_mut(CHUNK * r).enumerate().for_each(|(c, block)| {
            for (off, out) in block.chunks_mut(r).enumerate() {
                let x = c * CHUNK + off;
                for (mu, plan) in plans.iter().enumerate() {
                    let s = plan.backward[k][x];
                    if s != OUTSIDE {
                        let g = self.engine.table_index(coeffs, mu, s) * r2;
                        let m = &coeffs.c[mu][g..g + r2];
                        for l in 0..r {
                            let yl = data[s + n * l];
                            for j in 0..r {
                                out[j] += m[j + r * l] * yl;
                            }
                        }
                    }
                    let g = self.engine.table_index(coeffs, mu, x) * r2;
                    let m = &coeffs.d[mu][g..g + r2];
                    for l in 0..r {
                        let yl = data[x + n * l];
                        for j in 0..r {
                            out[j] -= m[j + r * l] * yl;
                        }
                    }
                }
            }
        });
        DMatrix::from_row_slice(n, r, &rows)
    }

    fn integrate<F>(&self, phase: &str, rhs: F, y0: &DMatrix<f64>, tau: f64, k: usize) -> Result<DMatrix<f64>>
    where
        F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
    {
        substep_integrate(rhs, y0, tau, k, self.scheme).map_err(|e| match e {
            Error::Instability(m) => Error::Instability(format!("{phase} step: {m}")),
            other => other,
        })
    }

    pub fn step(&self, state: &LowRankState, tau: f64) -> Result<LowRankState> {
        match self.order {
            SplittingOrder::Lie => self.lie_step_traced(state, tau, &mut Vec::new()),
            SplittingOrder::Strang => self.strang_step_traced(state, tau, &mut Vec::new()),
        }
    }

    pub fn lie_step(&self, state: &LowRankState, tau: f64) -> Result<LowRankState> {
        self.lie_step_traced(state, tau, &mut Vec::new())
    }

    pub fn strang_step(&self, state: &LowRankState, tau: f64) -> Result<LowRankState> {
        self.strang_step_traced(state, tau, &mut Vec::new())
    }

    pub fn lie_step_traced(&self, state: &LowRankState, tau: f64, trace: &mut Vec<Phase>) -> Result<LowRankState> {
        let sub = self.substeps;
        let kc = self.engine.k_coefficients(&state.x2);
        trace.push(Phase::KCoefficients);
        let k = self.integrate("K", |y| self.partition_rhs(y, &kc), &(&state.x1 * &state.s), tau, sub.k)?;
        trace.push(Phase::K(tau));
        let (x1, s_hat) = orthonormalize(&k);
        trace.push(Phase::QrX1);

        let mut cache = MomentCache::default();
        let st = self.engine.s_coefficients(&x1, &kc, &mut cache)?;
        trace.push(Phase::SCoefficients);
        let g = &st.e - &st.f;
        let s_tilde = self.integrate("S", |s| s_rhs(s, &g), &s_hat, tau, sub.s)?;
        trace.push(Phase::S(tau));

        let lc = self.engine.l_coefficients(&x1, &mut cache);
        trace.push(Phase::LCoefficients);
        let l = self.integrate(
            "L",
            |y| self.partition_rhs(y, &lc),
            &(&state.x2 * s_tilde.transpose()),
            tau,
            sub.l,
        )?;
        trace.push(Phase::L(tau));
        let (x2, r) = orthonormalize(&l);
        trace.push(Phase::QrX2);
        Ok(LowRankState {
            x1,
            s: r.transpose(),
            x2,
        })
    }

    pub fn strang_step_traced(&self, state: &LowRankState, tau: f64, trace: &mut Vec<Phase>) -> Result<LowRankState> {
        let sub = self.substeps;
        let half = tau / 2.0;
        let kc = self.engine.k_coefficients(&state.x2);
        trace.push(Phase::KCoefficients);
        let k = self.integrate(
            "K",
            |y| self.partition_rhs(y, &kc),
            &(&state.x1 * &state.s),
            half,
            sub.k,
        )?;
        trace.push(Phase::K(half));
        let (x1, s1) = orthonormalize(&k);
        trace.push(Phase::QrX1);

        let mut cache = MomentCache::default();
        let st = self.engine.s_coefficients(&x1, &kc, &mut cache)?;
        trace.push(Phase::SCoefficients);
        let g = &st.e - &st.f;
        let s2 = self.integrate("S", |s| s_rhs(s, &g), &s1, half, sub.s)?;
        trace.push(Phase::S(half));

        let lc = self.engine.l_coefficients(&x1, &mut cache);
        trace.push(Phase::LCoefficients);
        let l = self.integrate(
            "L",
            |y| self.partition_rhs(y, &lc),
            &(&state.x2 * s2.transpose()),
            tau,
            sub.l,
        )?;
        trace.push(Phase::L(tau));
        let (x2, r) = orthonormalize(&l);
        trace.push(Phase::QrX2);
        let s3 = r.transpose();

        let kc = self.engine.k_coefficients(&x2);
        trace.push(Phase::KCoefficients);
        let st = self.engine.s_coefficients(&x1, &kc, &mut cache)?;
        trace.push(Phase::SCoefficients);
        let g = &st.e - &st.f;
        let s4 = self.integrate("S", |s| s_rhs(s, &g), &s3, half, sub.s)?;
        trace.push(Phase::S(half));

        let k = self.integrate("K", |y| self.partition_rhs(y, &kc), &(&x1 * &s4), half, sub.k)?;
        trace.push(Phase::K(half));
        let (x1, s5) = orthonormalize(&k);
        trace.push(Phase::QrX1);
        Ok(LowRankState { x1, s: s5, x2 })
    }
}

/// One row of the diagnostics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub t: f64,
    pub mass: f64,
    pub steps: usize,
    pub ms_per_step: f64,
}

/// Summary of a completed run.
#[derive(Debug, Clone)]
pub struct DlrRun {
    pub final_state: LowRankState,
    pub diagnostics: Vec<Diagnostic>,
    pub steps: usize,
    /// Largest `max |X^T X - I|` seen after any step.
    pub max_orthonormality_defect: f64,
}

/// What `run_dlr` reports to its observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunEvent {
    /// The state at a requested output time.
    Output { t: f64, step: usize },
    /// After every completed step, including those that land on outputs.
    Step { t: f64, step: usize },
}

/// Integrates from `t = 0` to `config.t_end`, landing exactly on every output
/// time.
pub fn run_dlr<F>(
    network: &ReactionNetwork,
    space: &TruncatedStateSpace,
    config: &SolverConfig,
    initial: LowRankState,
    mut observe: F,
) -> Result<DlrRun>
where
    F: FnMut(RunEvent, &LowRankState) -> Result<()>,
{
    config.validate()?;
    if initial.rank() != config.rank {
        return Err(Error::Config(format!(
            "initial state has rank {}, config asks for {}",
            initial.rank(),
            config.rank
        )));
    }
    let solver = DlrSolver::new(
        network,
        space,
        config.order,
        config.substeps,
        config.scheme,
        config.coefficient_mode,
    )?;
    let schedule = match &config.step {
        StepRule::Fixed { .. } => None,
        StepRule::Variable { tau_min, c_cfl } => {
            let y0 = mean_populations(&initial, space)?;
            Some(variable_step_schedule(network, &y0, config.t_end, *tau_min, *c_cfl)?)
        }
    };
    let mut state = initial;
    let mut diagnostics = Vec::new();
    let mut outputs = config.output_times.iter().copied().peekable();
    let mut t = 0.0;
    let mut steps = 0usize;
    let mut steps_since = 0usize;
    let mut clock = Instant::now();
    let mut defect: f64 = state.max_orthonormality_defect();
    while outputs.peek().is_some_and(|&o| o <= 0.0) {
        outputs.next();
        diagnostics.push(diagnostic(0.0, &state, 0, &mut steps_since, &mut clock));
        observe(RunEvent::Output { t: 0.0, step: 0 }, &state)?;
    }
    // fixed steps are counted from the last landing point so that t does not
    // accumulate rounding drift
    let mut seg_start = 0.0;
    let mut seg_steps = 0usize;
    let mut sched_idx = 0usize;
    while t < config.t_end {
        let tau = match (&config.step, &schedule) {
            (StepRule::Fixed { tau }, _) => *tau,
            (_, Some(s)) => {
                while sched_idx + 1 < s.len() && s[sched_idx + 1].0 <= t + 1e-12 {
                    sched_idx += 1;
                }
                s[sched_idx].1
            }
            _ => unreachable!(),
        };
        let target = outputs.peek().copied().unwrap_or(config.t_end).min(config.t_end);
        let nominal = seg_start + (seg_steps + 1) as f64 * tau;
        let (h, t_next, landed) = if nominal >= target - 1e-6 * tau {
            (target - t, target, true)
        } else {
            (nominal - t, nominal, false)
        };
        state = solver.step(&state, h)?;
        if !state.is_finite() {
            return Err(Error::Instability(format!(
                "non-finite factors at t={t_next}; reduce tau or increase substeps"
            )));
        }
        defect = defect.max(state.max_orthonormality_defect());
        steps += 1;
        steps_since += 1;
        t = t_next;
        observe(RunEvent::Step { t, step: steps }, &state)?;
        if landed || schedule.is_some() {
            seg_start = t;
            seg_steps = 0;
        } else {
            seg_steps += 1;
        }
        while outputs.peek().is_some_and(|&o| o <= t) {
            outputs.next();
            diagnostics.push(diagnostic(t, &state, steps, &mut steps_since, &mut clock));
            observe(RunEvent::Output { t, step: steps }, &state)?;
        }
    }
    Ok(DlrRun {
        final_state: state,
        diagnostics,
        steps,
        max_orthonormality_defect: defect,
    })
}

fn diagnostic(t: f64, state: &LowRankState, steps: usize, since: &mut usize, clock: &mut Instant) -> Diagnostic {
    let ms_per_step = if *since > 0 {
        clock.elapsed().as_secs_f64() * 1e3 / *since as f64
    } else {
        0.0
    };
    *since = 0;
    *clock = Instant::now();
    Diagnostic {
        t,
        mass: state.mass(),
        steps,
        ms_per_step,
    }
}

/// Expected populations under the (normalized) low-rank distribution.
pub fn mean_populations(state: &LowRankState, space: &TruncatedStateSpace) -> Result<Vec<f64>> {
    let mass = state.mass();
    (0..space.n_species())
        .map(|i| {
            let m = state.marginal(space, i)?;
            Ok(m.iter()
                .enumerate()
                .map(|(k, p)| (space.lower()[i] + k as i64) as f64 * p)
                .sum::<f64>()
                / mass)
        })
        .collect()
}

fn rk4_rate(network: &ReactionNetwork, y: &[f64], h: f64) -> Result<Vec<f64>> {
    let add = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, d)| x + s * d).collect() };
    let k1 = network.rate_equation_rhs(y)?;
    let k2 = network.rate_equation_rhs(&add(y, &k1, h / 2.0))?;
    let k3 = network.rate_equation_rhs(&add(y, &k2, h / 2.0))?;
    let k4 = network.rate_equation_rhs(&add(y, &k3, h))?;
    Ok((0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Advances the rate equations over `[0, span]` with step-doubling RK4.
fn advance_rate_equations(network: &ReactionNetwork, y: &[f64], span: f64) -> Result<Vec<f64>> {
    let mut y = y.to_vec();
    let mut t = 0.0;
    let mut h = span;
    while t < span {
        h = h.min(span - t);
        let full = rk4_rate(network, &y, h)?;
        let half = rk4_rate(network, &rk4_rate(network, &y, h / 2.0)?, h / 2.0)?;
        let err = full
            .iter()
            .zip(&half)
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max);
        if !err.is_finite() || half.iter().any(|v| !v.is_finite() || v.abs() > 1e15) {
            if h < 1e-12 * span.max(1.0) {
                return Err(Error::Instability(format!("rate equations blew up near t={t}")));
            }
            h /= 4.0;
            continue;
        }
        if err <= 1e-8 {
            y = half;
            t += h;
            h *= 2.0;
        } else {
            if h < 1e-12 * span.max(1.0) {
                return Err(Error::Instability(format!("rate equations blew up near t={t}")));
            }
            h /= 2.0;
        }
    }
    Ok(y)
}

/// Step sizes `tau(t) = max(tau_min, c_cfl / max_mu a_mu(y(t)))` along the
/// deterministic rate-equation trajectory from `y0`; the last step is clamped
/// to land on `t_end`.
pub fn variable_step_schedule(
    network: &ReactionNetwork,
    y0: &[f64],
    t_end: f64,
    tau_min: f64,
    c_cfl: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(tau_min > 0.0 && c_cfl > 0.0) {
        return Err(Error::Config("tau_min and c_cfl must be positive".into()));
    }
    let mut out = Vec::new();
    let mut y = y0.to_vec();
    let mut t = 0.0;
    while t < t_end {
        let a_max = network.channels.iter().map(|c| c.evaluate(&y)).fold(0.0, f64::max);
        if !a_max.is_finite() {
            return Err(Error::Instability(format!("rate equations blew up near t={t}")));
        }
        let mut tau = if a_max > 0.0 {
            (c_cfl / a_max).max(tau_min)
        } else {
            t_end - t
        };
        if t + tau > t_end - 1e-9 * tau {
            tau = t_end - t;
        }
        out.push((t, tau));
        y = advance_rate_equations(network, &y, tau)?;
        t += tau;
    }
    Ok(out)
}
