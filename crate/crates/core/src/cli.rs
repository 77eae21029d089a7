//! Command-line front end: run configurations, solver orchestration, CSV
//! artifacts and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coefficients::CoefficientMode;
use crate::error::{Error, Result};
use crate::initial::InitialCondition;
use crate::integrator::{run_dlr, RunEvent, SolverConfig, SplittingOrder, StepRule, SubstepScheme, Substeps};
use crate::lowrank::{best_approximation_error, lowrank_dof, read_snapshot, write_snapshot, DEFAULT_DENSE_BUDGET};
use crate::model::{builtin, parse_model, ReactionNetwork, TruncationSpec};
use crate::observe::{GridSlice, SliceSpec};
use crate::reference::{dense_solve_with, DenseDistribution, DenseOperator, DenseTolerances, DEFAULT_DENSE_STATES};
use crate::ssa::{ssa_ensemble, EnsembleSpec, RNG_ALGORITHM};
use crate::statespace::{Partition, TruncatedStateSpace};

#[derive(Debug, Parser)]
#[command(
    name = "lrcme",
    version,
    about = "Dynamical low-rank solver for the chemical master equation"
)]
pub struct Cli {
    /// Worker threads; 1 is the deterministic reference mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one configured solver and write its artifacts.
    Run {
        /// Model document, or one of the bundled names (toggle, lambda_phage, bax).
        #[arg(long)]
        model: String,
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the SSA seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write a factor snapshot every this many DLR steps.
        #[arg(long)]
        snapshot_every: Option<usize>,
    },
    /// Compare run directories against a reference run.
    Compare {
        #[arg(long)]
        reference: PathBuf,
        /// Candidate run directories.
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print sizes and degrees of freedom of a model.
    Info {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 5)]
        rank: usize,
        /// Run configuration whose `space` overrides the model's truncation.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: thread pool already configured: {e}");
        }
    }
    let result = match cli.command {
        Command::Run {
            model,
            config,
            out,
            seed,
            snapshot_every,
        } => cmd_run(
            &model,
            &config,
            out.as_deref(),
            &RunOverrides {
                seed,
                snapshot_every,
                threads: cli.threads,
            },
        )
        .map(|s| println!("{}", s.summary_line())),
        Command::Compare {
            reference,
            candidates,
            out,
        } => cmd_compare(&reference, &candidates, &out).map(|rows| {
            for r in rows {
                println!("{}", r.summary_line());
            }
        }),
        Command::Info { model, rank, config } => cmd_info(&model, rank, config.as_deref()).map(|info| print!("{info}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Dlr,
    Dense,
    Ssa,
}

/// Substep counts: one number for all phases or one per phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubstepSpec {
    Uniform(usize),
    PerPhase(Substeps),
}

impl SubstepSpec {
    pub fn resolve(self) -> Substeps {
        match self {
            SubstepSpec::Uniform(k) => Substeps::uniform(k),
            SubstepSpec::PerPhase(s) => s,
        }
    }
}

fn default_order() -> SplittingOrder {
    SplittingOrder::Strang
}

fn default_substeps() -> SubstepSpec {
    SubstepSpec::Uniform(10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DlrParams {
    pub rank: usize,
    #[serde(default = "default_order")]
    pub order: SplittingOrder,
    pub step: StepRule,
    #[serde(default = "default_substeps")]
    pub substeps: SubstepSpec,
    #[serde(default)]
    pub scheme: SubstepScheme,
    #[serde(default)]
    pub coefficients: CoefficientMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
}

fn default_atol() -> f64 {
    DenseTolerances::default().atol
}

fn default_rtol() -> f64 {
    DenseTolerances::default().rtol
}

fn default_max_states() -> usize {
    DEFAULT_DENSE_STATES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseParams {
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_max_states")]
    pub max_states: usize,
    /// Write the full grid at every output time.
    #[serde(default = "default_true")]
    pub write_distributions: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DenseParams {
    fn default() -> Self {
        DenseParams {
            atol: default_atol(),
            rtol: default_rtol(),
            max_states: default_max_states(),
            write_distributions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsaParams {
    pub runs: u64,
    #[serde(default)]
    pub seed: u64,
}

/// A run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub solver: SolverKind,
    /// Overrides the model's default truncation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<TruncationSpec>,
    pub t_end: f64,
    /// Defaults to `[0, t_end]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_times: Option<Vec<f64>>,
    pub initial: InitialCondition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dlr: Option<DlrParams>,
    #[serde(default)]
    pub dense: DenseParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssa: Option<SsaParams>,
    /// Species whose marginals are written; defaults to all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginals: Option<Vec<usize>>,
    #[serde(default)]
    pub slices: Vec<SliceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run configuration: {e}")))
    }

    pub fn output_times(&self) -> Vec<f64> {
        self.output_times.clone().unwrap_or_else(|| {
            if self.t_end > 0.0 {
                vec![0.0, self.t_end]
            } else {
                vec![0.0]
            }
        })
    }

    pub fn space(&self, network: &ReactionNetwork) -> Result<TruncatedStateSpace> {
        match (&self.space, &network.truncation) {
            (Some(s), _) | (None, Some(s)) => s.build(),
            (None, None) => Err(Error::Config(
                "no state space: the config has no `space` and the model no `truncation`".into(),
            )),
        }
    }

    pub fn marginal_species(&self, n: usize) -> Vec<usize> {
        self.marginals.clone().unwrap_or_else(|| (0..n).collect())
    }

    pub fn validate(&self, network: &ReactionNetwork, space: &TruncatedStateSpace) -> Result<()> {
        if space.n_species() != network.n_species() {
            return Err(Error::Dimension(format!(
                "space has {} species, model has {}",
                space.n_species(),
                network.n_species()
            )));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(Error::Config(format!(
                "t_end must be finite and >= 0, got {}",
                self.t_end
            )));
        }
        let times = self.output_times();
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|&t| !(0.0..=self.t_end).contains(&t)) {
            return Err(Error::Config(
                "output times must be strictly increasing and lie in [0, t_end]".into(),
            ));
        }
        if let Some(&bad) = self
            .marginal_species(network.n_species())
            .iter()
            .find(|&&i| i >= network.n_species())
        {
            return Err(Error::OutOfRange(format!("marginal species index {bad}")));
        }
        for s in &self.slices {
            s.validate(space)?;
        }
        let mut labels: Vec<String> = self.slices.iter().enumerate().map(|(i, s)| s.label(i)).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("slice names must be unique".into()));
        }
        self.initial.validate(space)?;
        match self.solver {
            SolverKind::Dlr if self.dlr.is_none() => {
                return Err(Error::Config("solver \"dlr\" needs a `dlr` section".into()))
            }
            SolverKind::Ssa if self.ssa.is_none() => {
                return Err(Error::Config("solver \"ssa\" needs an `ssa` section".into()))
            }
            _ => {}
        }
        if let Some(d) = &self.dlr {
            self.solver_config(d).validate()?;
        }
        if let Some(s) = &self.ssa {
            if s.runs == 0 {
                return Err(Error::Config("ssa.runs must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn solver_config(&self, d: &DlrParams) -> SolverConfig {
        SolverConfig {
            order: d.order,
            step: d.step.clone(),
            substeps: d.substeps.resolve(),
            scheme: d.scheme,
            t_end: self.t_end,
            rank: d.rank,
            output_times: self.output_times(),
            coefficient_mode: d.coefficients,
        }
    }
}

/// Command-line overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub snapshot_every: Option<usize>,
    pub threads: Option<usize>,
}

/// Loads a model from a path, falling back to the bundled documents.
pub fn load_model(arg: &str) -> Result<(ReactionNetwork, Vec<u8>)> {
    let path = Path::new(arg);
    if path.exists() {
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read model {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Config(format!("model {} is not UTF-8", path.display())))?;
        return Ok((parse_model(&text)?, bytes));
    }
    match builtin::by_name(arg) {
        Some(text) => Ok((parse_model(text)?, text.as_bytes().to_vec())),
        None => Err(Error::Config(format!("cannot read model {arg}: no such file"))),
    }
}

fn read_input(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Tracks files written to a run directory.
struct ArtifactDir {
    root: PathBuf,
    files: Vec<String>,
}

impl ArtifactDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(ArtifactDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write_with<F>(&mut self, rel: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn hashes(&self) -> Result<BTreeMap<String, String>> {
        self.files
            .iter()
            .map(|f| {
                let path = self.root.join(f);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Ok((f.clone(), sha256_hex(&bytes)))
            })
            .collect()
    }
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn slice_file(label: &str) -> String {
    format!("slice_{}.csv", file_label(label))
}

/// Observables recorded at one output time.
#[derive(Debug, Clone)]
struct Observed {
    t: f64,
    marginals: Vec<Vec<f64>>,
    slices: Vec<GridSlice>,
    counts: Option<(Counts, Counts)>,
}

/// Per-species histogram counts.
type Counts = Vec<Vec<u64>>;

/// Outcome of `cmd_run`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub solver: SolverKind,
    pub out: PathBuf,
    pub wall_seconds: f64,
    pub details: Value,
}

impl RunSummary {
    pub fn summary_line(&self) -> String {
        format!(
            "{:?} run finished in {:.2} s, artifacts in {}",
            self.solver,
            self.wall_seconds,
            self.out.display()
        )
        .to_lowercase()
    }
}

/// Runs the configured solver and writes artifacts plus `manifest.json`.
pub fn cmd_run(model: &str, config_path: &Path, out: Option<&Path>, overrides: &RunOverrides) -> Result<RunSummary> {
    let started = Instant::now();
    let (network, model_bytes) = load_model(model)?;
    let config_bytes = read_input(config_path, "run configuration")?;
    let text = String::from_utf8(config_bytes.clone())
        .map_err(|_| Error::Config(format!("{} is not UTF-8", config_path.display())))?;
    let mut config = RunConfig::parse(&text)?;
    if let (Some(seed), Some(ssa)) = (overrides.seed, config.ssa.as_mut()) {
        ssa.seed = seed;
    }
    if let (Some(every), Some(dlr)) = (overrides.snapshot_every, config.dlr.as_mut()) {
        dlr.snapshot_every = Some(every);
    }
    let space = config.space(&network)?;
    config.validate(&network, &space)?;
    network.validate_domain(&space)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| config.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
    // The dense guard fires before any allocation or output.
    if config.solver == SolverKind::Dense && space.n_states_wide() > config.dense.max_states as u128 {
        return Err(Error::Budget(format!(
            "dense budget exceeded: {} states, budget is {}",
            space.n_states_wide(),
            config.dense.max_states
        )));
    }
    let mut dir = ArtifactDir::create(&out_dir)?;
    let times = config.output_times();
    let (observed, details) = match config.solver {
        SolverKind::Dlr => run_dlr_artifacts(&network, &space, &config, &mut dir)?,
        SolverKind::Dense => run_dense_artifacts(&network, &space, &config, &mut dir)?,
        SolverKind::Ssa => run_ssa_artifacts(&network, &space, &config, &mut dir)?,
    };
    write_observables(&mut dir, &network, &space, &config, &observed)?;
    let wall = started.elapsed().as_secs_f64();
    let manifest = json!({
        "tool": {"name": "lrcme", "version": env!("CARGO_PKG_VERSION")},
        "command": "run",
        "solver": config.solver,
        "inputs": {
            "model": {"source": model, "sha256": sha256_hex(&model_bytes)},
            "config": {"path": config_path.display().to_string(), "sha256": sha256_hex(&config_bytes)},
        },
        "model_document": serde_json::from_str::<Value>(&network.to_json()).unwrap_or(Value::Null),
        "resolved_config": config,
        "space": {
            "lower": space.lower(),
            "upper": space.upper(),
            "partition1": space.part(Partition::First).species(),
            "species": network.species.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
        },
        "times": times,
        "threads": overrides.threads.unwrap_or_else(rayon::current_num_threads),
        "wall_seconds": wall,
        "details": details,
        "outputs": dir.hashes()?,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = out_dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(RunSummary {
        solver: config.solver,
        out: out_dir,
        wall_seconds: wall,
        details,
    })
}

fn observe_state(
    t: f64,
    marginal: impl Fn(usize) -> Result<Vec<f64>>,
    slice: impl Fn(&SliceSpec) -> Result<GridSlice>,
    species: &[usize],
    slices: &[SliceSpec],
) -> Result<Observed> {
    Ok(Observed {
        t,
        marginals: species.iter().map(|&i| marginal(i)).collect::<Result<_>>()?,
        slices: slices.iter().map(slice).collect::<Result<_>>()?,
        counts: None,
    })
}

fn run_dlr_artifacts(
    network: &ReactionNetwork,
    space: &TruncatedStateSpace,
    config: &RunConfig,
    dir: &mut ArtifactDir,
) -> Result<(Vec<Observed>, Value)> {
    let params = config.dlr.as_ref().expect("validated");
    let solver_config = config.solver_config(params);
    let initial = config.initial.materialize(space, DEFAULT_DENSE_BUDGET)?.to_lowrank(
        space,
        params.rank,
        DEFAULT_DENSE_BUDGET,
    )?;
    let species = config.marginal_species(space.n_species());
    let mut observed = Vec::new();
    let mut snapshots = Vec::new();
    let mut slice_ranges = Vec::new();
    let run = run_dlr(network, space, &solver_config, initial, |ev, state| {
        match ev {
            RunEvent::Output { t, .. } => {
                let obs = observe_state(
                    t,
                    |i| state.marginal(space, i),
                    |s| state.slice(space, s),
                    &species,
                    &config.slices,
                )?;
                slice_ranges.push(
                    obs.slices
                        .iter()
                        .map(|g| {
                            let lo = g.values.iter().copied().fold(f64::INFINITY, f64::min);
                            let hi = g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            (lo, hi)
                        })
                        .collect::<Vec<_>>(),
                );
                observed.push(obs);
                let rel = format!("snapshots/snapshot_{:04}.lrs", snapshots.len());
                dir.write_with(&rel, |w| {
                    write_snapshot(w, space, state, t).map_err(std::io::Error::other)
                })?;
                snapshots.push(json!({"t": t, "file": rel}));
            }
            RunEvent::Step { t, step } => {
                if let Some(every) = params.snapshot_every.filter(|&e| e > 0) {
                    if step % every == 0 {
                        let rel = format!("checkpoints/step_{step:08}.lrs");
                        dir.write_with(&rel, |w| {
                            write_snapshot(w, space, state, t).map_err(std::io::Error::other)
                        })?;
                    }
                }
            }
        }
        Ok(())
    })?;
    let labels: Vec<String> = config.slices.iter().enumerate().map(|(i, s)| s.label(i)).collect();
    dir.write_with("diagnostics.csv", |w| {
        write!(w, "t,mass,mass_error,steps,ms_per_step")?;
        for l in &labels {
            write!(w, ",{l}_min,{l}_max")?;
        }
        writeln!(w)?;
        for (d, ranges) in run.diagnostics.iter().zip(&slice_ranges) {
            write!(
                w,
                "{},{},{:e},{},{:.4}",
                d.t,
                d.mass,
                d.mass - 1.0,
                d.steps,
                d.ms_per_step
            )?;
            for (lo, hi) in ranges {
                write!(w, ",{lo:e},{hi:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    let details = json!({
        "rank": params.rank,
        "steps": run.steps,
        "dof": lowrank_dof(space, params.rank).to_string(),
        "full_states": space.n_states_wide().to_string(),
        "max_orthonormality_defect": run.max_orthonormality_defect,
        "final_mass": run.final_state.mass(),
        "snapshots": snapshots,
    });
    Ok((observed, details))
}

fn run_dense_artifacts(
    network: &ReactionNetwork,
    space: &TruncatedStateSpace,
    config: &RunConfig,
    dir: &mut ArtifactDir,
) -> Result<(Vec<Observed>, Value)> {
    let op = DenseOperator::new(network, space, config.dense.max_states)?;
    let p0 = config
        .initial
        .materialize(space, config.dense.max_states)?
        .to_dense(space, config.dense.max_states)?;
    let tol = DenseTolerances {
        atol: config.dense.atol,
        rtol: config.dense.rtol,
        ..DenseTolerances::default()
    };
    let times = config.output_times();
    let (dists, stats) = dense_solve_with(&op, &p0, 0.0, &times, tol)?;
    let species = config.marginal_species(space.n_species());
    let mut observed = Vec::new();
    let mut files = Vec::new();
    for (i, (p, &t)) in dists.iter().zip(&times).enumerate() {
        observed.push(observe_state(
            t,
            |s| p.marginal(space, s),
            |s| p.slice(space, s),
            &species,
            &config.slices,
        )?);
        if config.dense.write_distributions {
            let rel = format!("distributions/dense_{i:04}.csv");
            dir.write_with(&rel, |w| write_distribution(w, network, space, p))?;
            files.push(json!({"t": t, "file": rel}));
        }
    }
    dir.write_with("diagnostics.csv", |w| {
        writeln!(w, "t,mass,mass_error,min_value")?;
        for (p, t) in dists.iter().zip(&times) {
            let min = p.values.iter().copied().fold(f64::INFINITY, f64::min);
            writeln!(w, "{t},{},{:e},{min:e}", p.mass(), p.mass() - 1.0)?;
        }
        Ok(())
    })?;
    let details = json!({
        "states": op.len(),
        "accepted_steps": stats.accepted,
        "rejected_steps": stats.rejected,
        "atol": tol.atol,
        "rtol": tol.rtol,
        "distributions": files,
    });
    Ok((observed, details))
}

fn write_distribution(
    w: &mut dyn Write,
    network: &ReactionNetwork,
    space: &TruncatedStateSpace,
    p: &DenseDistribution,
) -> std::io::Result<()> {
    for s in &network.species {
        write!(w, "{},", s.name)?;
    }
    writeln!(w, "p")?;
    for (x, v) in p.rows(space) {
        for c in &x {
            write!(w, "{c},")?;
        }
        writeln!(w, "{v:e}")?;
    }
    Ok(())
}

fn run_ssa_artifacts(
    network: &ReactionNetwork,
    space: &TruncatedStateSpace,
    config: &RunConfig,
    dir: &mut ArtifactDir,
) -> Result<(Vec<Observed>, Value)> {
    let params = config.ssa.as_ref().expect("validated");
    let sampler = config.initial.sampler(space, DEFAULT_DENSE_STATES)?;
    let times = config.output_times();
    let started = Instant::now();
    let results = ssa_ensemble(
        network,
        &sampler,
        space,
        &EnsembleSpec {
            times: &times,
            n_runs: params.runs,
            seed: params.seed,
            slices: &config.slices,
        },
    )?;
    let wall = started.elapsed().as_secs_f64();
    let species = config.marginal_species(space.n_species());
    let observed = results
        .iter()
        .map(|r| Observed {
            t: r.time,
            marginals: species.iter().map(|&i| r.marginal_probabilities(i)).collect(),
            slices: (0..config.slices.len())
                .map(|j| r.slice_probabilities(space, j))
                .collect(),
            counts: Some((
                species.iter().map(|&i| r.marginals[i].clone()).collect(),
                r.slices.iter().map(|s| s.counts.clone()).collect(),
            )),
        })
        .collect();
    dir.write_with("diagnostics.csv", |w| {
        writeln!(w, "t,runs,outside,outside_fraction")?;
        for r in &results {
            writeln!(
                w,
                "{},{},{},{}",
                r.time,
                r.n_runs,
                r.outside,
                r.outside as f64 / r.n_runs as f64
            )?;
        }
        Ok(())
    })?;
    let details = json!({
        "runs": params.runs,
        "seed": params.seed,
        "rng": RNG_ALGORITHM,
        "simulation_seconds": wall,
        "outside": results.iter().map(|r| r.outside).collect::<Vec<_>>(),
    });
    Ok((observed, details))
}

fn write_observables(
    dir: &mut ArtifactDir,
    network: &ReactionNetwork,
    space: &TruncatedStateSpace,
    config: &RunConfig,
    observed: &[Observed],
) -> Result<()> {
    let species = config.marginal_species(space.n_species());
    let counted = observed.first().is_some_and(|o| o.counts.is_some());
    dir.write_with("marginals.csv", |w| {
        writeln!(w, "t,species,x,{}p", if counted { "count," } else { "" })?;
        for o in observed {
            for (j, (&s, m)) in species.iter().zip(&o.marginals).enumerate() {
                for (k, v) in m.iter().enumerate() {
                    let x = space.lower()[s] + k as i64;
                    write!(w, "{},{},{x},", o.t, network.species[s].name)?;
                    if let Some((mc, _)) = &o.counts {
                        write!(w, "{},", mc[j][k])?;
                    }
                    writeln!(w, "{v:e}")?;
                }
            }
        }
        Ok(())
    })?;
    for (j, spec) in config.slices.iter().enumerate() {
        let label = spec.label(j);
        dir.write_with(&slice_file(&label), |w| {
            write!(w, "t,")?;
            for &s in &spec.query_species() {
                write!(w, "{},", network.species[s].name)?;
            }
            writeln!(w, "{}p", if counted { "count," } else { "" })?;
            for o in observed {
                let g = &o.slices[j];
                for (k, q) in g.points().enumerate() {
                    write!(w, "{},", o.t)?;
                    for c in &q {
                        write!(w, "{c},")?;
                    }
                    if let Some((_, sc)) = &o.counts {
                        write!(w, "{},", sc[j][k])?;
                    }
                    writeln!(w, "{:e}", g.values[k])?;
                }
            }
            Ok(())
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------- compare

/// A run directory read back through its manifest.
struct RunArtifacts {
    dir: PathBuf,
    solver: SolverKind,
    space: TruncatedStateSpace,
    rank: Option<usize>,
    /// `(t, relative path)` of full-grid artifacts (snapshots or CSV grids).
    grids: Vec<(f64, String)>,
    slices: Vec<String>,
    times: Vec<f64>,
}

fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
    let m: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let bad = |what: &str| Error::Config(format!("manifest {}: missing or invalid {what}", path.display()));
    let solver: SolverKind = serde_json::from_value(m["solver"].clone()).map_err(|_| bad("solver"))?;
    let ints = |v: &Value| -> Option<Vec<i64>> { v.as_array()?.iter().map(Value::as_i64).collect() };
    let sp = &m["space"];
    let lower = ints(&sp["lower"]).ok_or_else(|| bad("space.lower"))?;
    let upper = ints(&sp["upper"]).ok_or_else(|| bad("space.upper"))?;
    let p1: Vec<usize> = ints(&sp["partition1"])
        .ok_or_else(|| bad("space.partition1"))?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    let space = TruncatedStateSpace::new(&lower, &upper, &p1)?;
    let list = |key: &str| -> Vec<(f64, String)> {
        m["details"][key]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|e| Some((e["t"].as_f64()?, e["file"].as_str()?.to_string())))
                    .collect()
            })
            .unwrap_or_default()
    };
    let grids = match solver {
        SolverKind::Dlr => list("snapshots"),
        SolverKind::Dense => list("distributions"),
        SolverKind::Ssa => Vec::new(),
    };
    let config: RunConfig = serde_json::from_value(m["resolved_config"].clone()).map_err(|_| bad("resolved_config"))?;
    let times = m["times"]
        .as_array()
        .and_then(|a| a.iter().map(Value::as_f64).collect())
        .ok_or_else(|| bad("times"))?;
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        solver,
        space,
        rank: config.dlr.as_ref().map(|d| d.rank),
        grids,
        slices: config.slices.iter().enumerate().map(|(i, s)| s.label(i)).collect(),
        times,
    })
}

fn read_grid(run: &RunArtifacts, rel: &str) -> Result<DenseDistribution> {
    let path = run.dir.join(rel);
    match run.solver {
        SolverKind::Dlr => {
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let snap = read_snapshot(&mut std::io::BufReader::new(file))?;
            snap.state.reconstruct(&snap.space, DEFAULT_DENSE_STATES)
        }
        _ => {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut values = Vec::with_capacity(run.space.n_states_wide() as usize);
            for line in text.lines().skip(1) {
                let v = line
                    .rsplit(',')
                    .next()
                    .and_then(|f| f.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("{}: malformed row {line:?}", path.display())))?;
                values.push(v);
            }
            DenseDistribution::from_values(&run.space, values)
        }
    }
}

/// Rows `t -> values` of a long-format CSV whose value sits in the last
/// column; `key_cols` leading columns after `t` identify the row.
/// Long-format rows keyed by the bit pattern of their time.
type LongCsv = BTreeMap<u64, Vec<(String, f64)>>;

fn read_long_csv(path: &Path) -> Result<LongCsv> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<u64, Vec<(String, f64)>> = BTreeMap::new();
    let header = text.lines().next().unwrap_or_default();
    let counted = header.split(',').any(|h| h == "count");
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let parse = || -> Option<(f64, String, f64)> {
            let t: f64 = fields.first()?.parse().ok()?;
            let v: f64 = fields.last()?.parse().ok()?;
            let keep = fields.len() - 1 - counted as usize;
            Some((t, fields[1..keep].join(","), v))
        };
        let (t, key, v) =
            parse().ok_or_else(|| Error::Config(format!("{}: malformed row {line:?}", path.display())))?;
        out.entry(t.to_bits()).or_default().push((key, v));
    }
    Ok(out)
}

fn max_keyed_diff(a: &[(String, f64)], b: &[(String, f64)]) -> Option<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.0 != y.0) {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| (x.1 - y.1).abs()).fold(0.0, f64::max))
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub candidate: String,
    pub t: f64,
    pub error_2norm: Option<f64>,
    pub best_approximation_error: Option<f64>,
    pub marginal_max_error: Option<f64>,
    pub slice_max_errors: Vec<(String, Option<f64>)>,
}

impl ComparisonRow {
    pub fn summary_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
        let mut s = format!(
            "{} t={} error={} best={} marginal={}",
            self.candidate,
            self.t,
            f(self.error_2norm),
            f(self.best_approximation_error),
            f(self.marginal_max_error)
        );
        for (l, v) in &self.slice_max_errors {
            s.push_str(&format!(" {l}={}", f(*v)));
        }
        s
    }
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Aligned-time errors of each candidate against the reference.
pub fn cmd_compare(reference: &Path, candidates: &[PathBuf], out: &Path) -> Result<Vec<ComparisonRow>> {
    let started = Instant::now();
    let reference_run = load_run(reference)?;
    let ref_marg = read_long_csv(&reference.join("marginals.csv"))?;
    let ref_slices: Vec<(String, LongCsv)> = reference_run
        .slices
        .iter()
        .map(|l| Ok((l.clone(), read_long_csv(&reference.join(slice_file(l)))?)))
        .collect::<Result<_>>()?;
    let mut ref_grids: BTreeMap<u64, DenseDistribution> = BTreeMap::new();
    let mut rows = Vec::new();
    for cand_dir in candidates {
        let cand = load_run(cand_dir)?;
        if cand.space != reference_run.space {
            return Err(Error::Dimension(format!(
                "{} uses a different state space than the reference",
                cand_dir.display()
            )));
        }
        let cand_marg = read_long_csv(&cand_dir.join("marginals.csv"))?;
        let cand_slices: BTreeMap<String, BTreeMap<u64, Vec<(String, f64)>>> = cand
            .slices
            .iter()
            .map(|l| Ok((l.clone(), read_long_csv(&cand_dir.join(slice_file(l)))?)))
            .collect::<Result<_>>()?;
        let mut matched = 0;
        for &t in &cand.times {
            let Some(&tr) = reference_run.times.iter().find(|&&r| same_time(r, t)) else {
                continue;
            };
            matched += 1;
            let ref_grid = match reference_run.grids.iter().find(|g| same_time(g.0, tr)) {
                Some((_, rel)) => {
                    if let std::collections::btree_map::Entry::Vacant(e) = ref_grids.entry(tr.to_bits()) {
                        e.insert(read_grid(&reference_run, rel)?);
                    }
                    ref_grids.get(&tr.to_bits())
                }
                None => None,
            };
            let cand_grid = match cand.grids.iter().find(|g| same_time(g.0, t)) {
                Some((_, rel)) => Some(read_grid(&cand, rel)?),
                None => None,
            };
            let error_2norm = match (ref_grid, &cand_grid) {
                (Some(a), Some(b)) => Some(a.error_2norm(b)),
                _ => None,
            };
            let best = match (ref_grid, cand.rank) {
                (Some(a), Some(r)) => Some(best_approximation_error(a, r)),
                _ => None,
            };
            let marginal = match (ref_marg.get(&tr.to_bits()), cand_marg.get(&t.to_bits())) {
                (Some(a), Some(b)) => max_keyed_diff(a, b),
                _ => None,
            };
            let slice_max_errors = ref_slices
                .iter()
                .map(|(label, table)| {
                    let v = match (
                        table.get(&tr.to_bits()),
                        cand_slices.get(label).and_then(|c| c.get(&t.to_bits())),
                    ) {
                        (Some(a), Some(b)) => max_keyed_diff(a, b),
                        _ => None,
                    };
                    (label.clone(), v)
                })
                .collect();
            rows.push(ComparisonRow {
                candidate: cand_dir.display().to_string(),
                t,
                error_2norm,
                best_approximation_error: best,
                marginal_max_error: marginal,
                slice_max_errors,
            });
        }
        if matched == 0 {
            return Err(Error::Dimension(format!(
                "{} shares no output time with the reference",
                cand_dir.display()
            )));
        }
    }
    let mut dir = ArtifactDir::create(out)?;
    dir.write_with("comparison.csv", |w| {
        write!(w, "candidate,t,error_2norm,best_approximation_error,marginal_max_error")?;
        for (l, _) in &ref_slices {
            write!(w, ",{}_max_error", file_label(l))?;
        }
        writeln!(w)?;
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &rows {
            write!(
                w,
                "{},{},{},{},{}",
                r.candidate,
                r.t,
                f(r.error_2norm),
                f(r.best_approximation_error),
                f(r.marginal_max_error)
            )?;
            for (_, v) in &r.slice_max_errors {
                write!(w, ",{}", f(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    let manifest = json!({
        "tool": {"name": "lrcme", "version": env!("CARGO_PKG_VERSION")},
        "command": "compare",
        "reference": reference.display().to_string(),
        "candidates": candidates.iter().map(|c| c.display().to_string()).collect::<Vec<_>>(),
        "wall_seconds": started.elapsed().as_secs_f64(),
        "outputs": dir.hashes()?,
    });
    let path = out.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

// ---------------------------------------------------------------- info

/// Sizes and degrees of freedom of a model on its truncated space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInfo {
    pub name: Option<String>,
    pub species: Vec<String>,
    pub channels: usize,
    pub partition1: Vec<String>,
    pub partition2: Vec<String>,
    pub n1: usize,
    pub n2: usize,
    pub full_states: u128,
    pub rank: usize,
    pub dof: u128,
}

impl ModelInfo {
    /// `dof / full` in percent.
    pub fn percentage(&self) -> f64 {
        100.0 * self.dof as f64 / self.full_states as f64
    }

    pub fn reduction_factor(&self) -> f64 {
        self.full_states as f64 / self.dof as f64
    }
}

impl std::fmt::Display for ModelInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "model: {}", self.name.as_deref().unwrap_or("(unnamed)"))?;
        writeln!(f, "species: {} ({})", self.species.len(), self.species.join(", "))?;
        writeln!(f, "reactions: {}", self.channels)?;
        writeln!(f, "partition 1: {} (n1 = {})", self.partition1.join(", "), self.n1)?;
        writeln!(f, "partition 2: {} (n2 = {})", self.partition2.join(", "), self.n2)?;
        writeln!(f, "full system: {} states", self.full_states)?;
        writeln!(
            f,
            "rank {}: {} degrees of freedom ({:.1}% of the full system, reduction factor {:.3e})",
            self.rank,
            self.dof,
            self.percentage(),
            self.reduction_factor()
        )
    }
}

pub fn model_info(network: &ReactionNetwork, space: &TruncatedStateSpace, rank: usize) -> ModelInfo {
    let names = |k: Partition| {
        space
            .part(k)
            .species()
            .iter()
            .map(|&s| network.species[s].name.clone())
            .collect()
    };
    ModelInfo {
        name: network.name.clone(),
        species: network.species.iter().map(|s| s.name.clone()).collect(),
        channels: network.n_channels(),
        partition1: names(Partition::First),
        partition2: names(Partition::Second),
        n1: space.n1(),
        n2: space.n2(),
        full_states: space.n_states_wide(),
        rank,
        dof: lowrank_dof(space, rank),
    }
}

pub fn cmd_info(model: &str, rank: usize, config: Option<&Path>) -> Result<ModelInfo> {
    let (network, _) = load_model(model)?;
    let space = match config {
        Some(path) => {
            let bytes = read_input(path, "run configuration")?;
            let text =
                String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
            RunConfig::parse(&text)?.space(&network)?
        }
        None => network
            .truncation
            .as_ref()
            .ok_or_else(|| Error::Config("model has no default truncation; pass --config".into()))?
            .build()?,
    };
    if space.n_species() != network.n_species() {
        return Err(Error::Dimension("space does not match the model".into()));
    }
    if rank == 0 {
        return Err(Error::Config("rank must be >= 1".into()));
    }
    Ok(model_info(&network, &space, rank))
}
