//! Decentralized strategies, Monte Carlo simulation of the finite
//! population, social cost and optimality diagnostics.
//!
//! Each agent runs its own auxiliary system driven by its own noise and the
//! deterministic mean-field inputs; its control drives the real system, in
//! which the population mean enters the drift. Paths are independent and
//! each `(path, agent)` pair owns a counter-seeded generator, so results do
//! not depend on the thread count.

pub(crate) mod sim;
pub(crate) mod strategy;

#[cfg(test)]
mod tests;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::assembly::AssemblyError;
use crate::engine::EngineError;
use crate::meanfield::MeanFieldProfile;
use crate::model::{Grid, ModelSpec};
use crate::riccati::RiccatiError;

pub use sim::{path_agent_seed, Variant};
pub use strategy::{synthesize, StrategyField, TypeStrategy};

use sim::Simulator;

/// Errors raised by the population layer.
#[derive(Debug, Error)]
pub enum PopulationError {
    /// Assembly of an auxiliary system failed.
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    /// The decoupling field of a type could not be computed.
    #[error("type {k}: {source}")]
    Riccati {
        /// One-based type.
        k: usize,
        /// Underlying failure.
        source: RiccatiError,
    },
    /// Offset or closed-loop failure.
    #[error(transparent)]
    Engine(#[from] EngineError),
    /// The feedback law of a type could not be formed.
    #[error("strategy of type {k}: {message}")]
    Strategy {
        /// One-based type.
        k: usize,
        /// Description.
        message: String,
    },
    /// A simulated state became non-finite.
    #[error("non-finite state for agent {agent} on path {} at grid node {node}", path + 1)]
    NonFinite {
        /// One-based agent.
        agent: usize,
        /// Zero-based path, displayed one-based.
        path: usize,
        /// Grid node.
        node: usize,
    },
    /// Inconsistent request.
    #[error("invalid input: {0}")]
    Input(String),
}

/// Cost split into its running state, running control and initial parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostParts {
    /// `½ ∫ ⟨Q(X - S X̄), X - S X̄⟩ dt`.
    pub state: f64,
    /// `½ ∫ ⟨R u, u⟩ dt`.
    pub control: f64,
    /// `½ ⟨Γ Y(0), Y(0)⟩`.
    pub initial: f64,
}

impl CostParts {
    /// Sum of the three parts.
    pub fn total(&self) -> f64 {
        self.state + self.control + self.initial
    }

    fn add(&mut self, o: &CostParts) {
        self.state += o.state;
        self.control += o.control;
        self.initial += o.initial;
    }

    fn scaled(&self, s: f64) -> CostParts {
        CostParts { state: self.state * s, control: self.control * s, initial: self.initial * s }
    }
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    /// Sample mean.
    pub mean: f64,
    /// Standard error of the mean (zero for a single sample).
    pub stderr: f64,
}

impl Estimate {
    /// Mean and standard error of `samples`.
    pub fn from_samples(samples: &[f64]) -> Self {
        let p = samples.len() as f64;
        if let Some(&first) = samples.first() {
            if samples.iter().all(|&x| x == first) {
                return Self { mean: first, stderr: 0.0 };
            }
        }
        let mean = samples.iter().sum::<f64>() / p;
        if samples.len() < 2 {
            return Self { mean, stderr: 0.0 };
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (p - 1.0);
        Self { mean, stderr: (var / p).sqrt() }
    }
}

/// Trajectories of one agent along one path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordedPath {
    /// Zero-based agent.
    pub agent: usize,
    /// Zero-based path.
    pub path: usize,
    /// State of the auxiliary system.
    pub aux_state: Vec<DVector<f64>>,
    /// Transformed auxiliary state, the argument of the feedback law.
    pub aux_transformed: Vec<DVector<f64>>,
    /// State in the real population.
    pub real_state: Vec<DVector<f64>>,
    /// Applied control.
    pub control: Vec<DVector<f64>>,
}

/// Monte Carlo settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationOptions {
    /// Number of independent paths.
    pub paths: usize,
    /// Run seed.
    pub seed: u64,
    /// `(agent, path)` to record, zero-based.
    pub record: Option<(usize, usize)>,
    /// Per-agent keys of the noise generators; defaults to the agent index.
    pub noise_keys: Option<Vec<u64>>,
}

impl SimulationOptions {
    /// `paths` paths under `seed`, nothing recorded.
    pub fn new(paths: usize, seed: u64) -> Self {
        Self { paths, seed, record: None, noise_keys: None }
    }
}

/// Outcome of [`simulate_population`].
#[derive(Clone, Debug)]
pub struct PopulationRun {
    /// Time grid.
    pub grid: Grid,
    /// Population size.
    pub agents: usize,
    /// Run seed.
    pub seed: u64,
    /// Social cost parts of every path.
    pub path_costs: Vec<CostParts>,
    /// Cost parts of every agent, averaged over paths.
    pub agent_costs: Vec<CostParts>,
    /// Population mean on every node of every path.
    pub xbar: Vec<Vec<DVector<f64>>>,
    /// Backward state at time zero of every agent: the conditional mean
    /// given the initial states, averaged over paths.
    pub y0: Vec<DVector<f64>>,
    /// Plain Monte Carlo estimate of the same quantity.
    pub y0_mc: Vec<DVector<f64>>,
    /// Standard error of [`PopulationRun::y0_mc`].
    pub y0_stderr: Vec<DVector<f64>>,
    /// Recorded trajectories, if requested.
    pub recorded: Option<RecordedPath>,
}

/// Per-path output of the variant sweep.
struct PathOutcome {
    /// Social cost of every variant.
    totals: Vec<CostParts>,
    /// Cost of every agent under the unperturbed strategy.
    agents: Vec<CostParts>,
    y0_cond: Vec<DVector<f64>>,
    y0_mc: Vec<DVector<f64>>,
    xbar: Vec<DVector<f64>>,
    recorded: Option<RecordedPath>,
}

fn sweep(
    spec: &ModelSpec,
    strategy: &StrategyField,
    directions: &[Direction],
    variants: &[Variant],
    opts: &SimulationOptions,
) -> Result<Vec<PathOutcome>, PopulationError> {
    if opts.paths == 0 {
        return Err(PopulationError::Input("at least one path is required".into()));
    }
    if variants.first() != Some(&Variant::BASE) {
        return Err(PopulationError::Input("the first variant must be the unperturbed strategy".into()));
    }
    if let Some(dir) = variants.iter().filter_map(|v| v.direction).find(|&d| d >= directions.len()) {
        return Err(PopulationError::Input(format!("variant refers to missing direction {dir}")));
    }
    if let Some((agent, path)) = opts.record {
        if agent >= spec.dims.agents || path >= opts.paths {
            return Err(PopulationError::Input(format!("cannot record agent {agent} on path {path}")));
        }
    }
    let sim = Simulator::new(spec, strategy, directions, opts.noise_keys.as_deref())?;
    let shared_shadow = if sim.is_random() { None } else { Some(sim.integrate(variants, &[], None, 0, None)?.y0) };
    (0..opts.paths)
        .into_par_iter()
        .map(|path| {
            let (dev, inc) = sim.draw(opts.seed, path);
            let record = opts.record.filter(|r| r.1 == path).map(|r| r.0);
            let noisy = sim.integrate(variants, &dev, Some(&inc), path, record)?;
            let shadow = match &shared_shadow {
                Some(y0) => y0.clone(),
                None => sim.integrate(variants, &dev, None, path, None)?.y0,
            };
            let mut totals = Vec::with_capacity(variants.len());
            let mut base_agents = Vec::new();
            for (v, parts) in noisy.parts.iter().enumerate() {
                let mut total = CostParts::default();
                let per_agent: Vec<CostParts> = parts
                    .iter()
                    .zip(&shadow[v])
                    .map(|(p, y)| CostParts { initial: sim.initial_cost(y), ..*p })
                    .collect();
                per_agent.iter().for_each(|p| total.add(p));
                totals.push(total);
                if v == 0 {
                    base_agents = per_agent;
                }
            }
            let mut shadow = shadow;
            Ok(PathOutcome {
                totals,
                agents: base_agents,
                y0_cond: shadow.swap_remove(0),
                y0_mc: noisy.y0.into_iter().next().unwrap_or_default(),
                xbar: noisy.xbar,
                recorded: noisy.recorded,
            })
        })
        .collect()
}

/// Simulates `opts.paths` independent paths of the population under the
/// decentralized strategies.
pub fn simulate_population(spec: &ModelSpec, strategy: &StrategyField, opts: &SimulationOptions) -> Result<PopulationRun, PopulationError> {
    let outcomes = sweep(spec, strategy, &[], &[Variant::BASE], opts)?;
    let agents = spec.dims.agents;
    let n = spec.dims.state;
    let inv_p = 1.0 / outcomes.len() as f64;
    let mut agent_costs = vec![CostParts::default(); agents];
    let mut y0 = vec![DVector::zeros(n); agents];
    for o in &outcomes {
        for i in 0..agents {
            agent_costs[i].add(&o.agents[i]);
            y0[i] += &o.y0_cond[i];
        }
    }
    let agent_costs = agent_costs.iter().map(|c| c.scaled(inv_p)).collect();
    let y0 = y0.into_iter().map(|v| v * inv_p).collect();
    let (y0_mc, y0_stderr) = (0..agents)
        .map(|i| {
            let est: Vec<Estimate> =
                (0..n).map(|j| Estimate::from_samples(&outcomes.iter().map(|o| o.y0_mc[i][j]).collect::<Vec<_>>())).collect();
            (DVector::from_iterator(n, est.iter().map(|e| e.mean)), DVector::from_iterator(n, est.iter().map(|e| e.stderr)))
        })
        .unzip();
    let mut recorded = None;
    let mut path_costs = Vec::with_capacity(outcomes.len());
    let mut xbar = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        path_costs.push(o.totals[0]);
        xbar.push(o.xbar);
        if o.recorded.is_some() {
            recorded = o.recorded;
        }
    }
    Ok(PopulationRun { grid: spec.grid, agents, seed: opts.seed, path_costs, agent_costs, xbar, y0, y0_mc, y0_stderr, recorded })
}

/// Social cost estimate of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialCost {
    /// Sum of all agents' costs.
    pub total: Estimate,
    /// Mean running state part.
    pub state: f64,
    /// Mean running control part.
    pub control: f64,
    /// Mean initial part.
    pub initial: f64,
    /// Mean cost of every agent.
    pub per_agent: Vec<f64>,
}

/// Social cost of a run with its standard error.
pub fn social_cost(run: &PopulationRun) -> SocialCost {
    let totals: Vec<f64> = run.path_costs.iter().map(CostParts::total).collect();
    let p = run.path_costs.len() as f64;
    let mean_of = |f: fn(&CostParts) -> f64| run.path_costs.iter().map(f).sum::<f64>() / p;
    SocialCost {
        total: Estimate::from_samples(&totals),
        state: mean_of(|c| c.state),
        control: mean_of(|c| c.control),
        initial: mean_of(|c| c.initial),
        per_agent: run.agent_costs.iter().map(CostParts::total).collect(),
    }
}

/// `E sup_m |X̄_m - X̂_m|²` over the grid nodes.
pub fn meanfield_error(run: &PopulationRun, mf: &MeanFieldProfile) -> Result<Estimate, PopulationError> {
    if mf.grid != run.grid {
        return Err(PopulationError::Input("mean-field profile and run use different grids".into()));
    }
    let sups: Vec<f64> = run
        .xbar
        .iter()
        .map(|path| path.iter().zip(&mf.xhat.values).map(|(a, b)| (a - b).norm_squared()).fold(0.0, f64::max))
        .collect();
    Ok(Estimate::from_samples(&sups))
}

/// A deterministic open-loop control perturbation of every agent,
/// piecewise constant on the grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    /// Label used in reports.
    pub name: String,
    /// `values[(agent · steps + m) · d + j]`.
    pub values: Vec<f64>,
}

impl Direction {
    /// `Σ_i ∫ |δu_i|² dt`.
    pub fn energy(&self, dt: f64) -> f64 {
        dt * self.values.iter().map(|v| v * v).sum::<f64>()
    }

    fn normalized(mut self, target: f64, dt: f64) -> Self {
        let e = self.energy(dt);
        if e > 0.0 {
            let s = (target / e).sqrt();
            self.values.iter_mut().for_each(|v| *v *= s);
        }
        self
    }
}

/// Number of random directions in [`direction_library`].
pub const RANDOM_DIRECTIONS: usize = 5;

/// Default finite-difference step of [`optimality_gap`].
pub const FD_STEP: f64 = 1e-3;

/// Probe directions, each scaled to `Σ_i ∫ |δu_i|² dt = N T`.
///
/// One constant unit direction per type and control coordinate, carried by
/// the first agent of that type (agents of a type are exchangeable), then
/// [`RANDOM_DIRECTIONS`] directions drawn per agent on ten equal time
/// segments.
pub fn direction_library(spec: &ModelSpec, seed: u64) -> Vec<Direction> {
    let agents = spec.dims.agents;
    let steps = spec.grid.steps();
    let d = spec.dims.control;
    let dt = spec.grid.dt();
    let target = agents as f64 * spec.grid.horizon();
    let mut out = Vec::new();
    for k in 0..spec.dims.types {
        let Some(i) = spec.population.theta.iter().position(|&t| t == k) else { continue };
        for j in 0..d {
            let mut values = vec![0.0; agents * steps * d];
            for m in 0..steps {
                values[(i * steps + m) * d + j] = 1.0;
            }
            out.push(Direction { name: format!("unit_type{}_u{}", k + 1, j + 1), values }.normalized(target, dt));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1ec);
    let segments = steps.min(10);
    for r in 0..RANDOM_DIRECTIONS {
        let draws: Vec<f64> = (0..agents * segments * d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g
            })
            .collect();
        let mut values = vec![0.0; agents * steps * d];
        for i in 0..agents {
            for m in 0..steps {
                let seg = m * segments / steps;
                for j in 0..d {
                    values[(i * steps + m) * d + j] = draws[(i * segments + seg) * d + j];
                }
            }
        }
        out.push(Direction { name: format!("random{}", r + 1), values }.normalized(target, dt));
    }
    out
}

/// Social cost of every variant on every path, `[variant][path]`, with
/// common random numbers across variants.
pub fn evaluate_variants(
    spec: &ModelSpec,
    strategy: &StrategyField,
    directions: &[Direction],
    variants: &[Variant],
    opts: &SimulationOptions,
) -> Result<Vec<Vec<f64>>, PopulationError> {
    let mut all = vec![Variant::BASE];
    all.extend_from_slice(variants);
    let outcomes = sweep(spec, strategy, directions, &all, opts)?;
    Ok((1..all.len()).map(|v| outcomes.iter().map(|o| o.totals[v].total()).collect()).collect())
}

/// Directional derivatives of the per-agent social cost.
#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    /// Direction labels.
    pub names: Vec<String>,
    /// `N⁻¹ dJ_soc/dε` along every direction.
    pub derivatives: Vec<Estimate>,
    /// Largest absolute mean derivative.
    pub proxy: f64,
    /// Standard error of the derivative attaining [`GapReport::proxy`].
    pub proxy_stderr: f64,
}

/// Central finite-difference derivatives of `J_soc / N` along each
/// direction, with common random numbers for the two sides.
pub fn optimality_gap(
    spec: &ModelSpec,
    strategy: &StrategyField,
    directions: &[Direction],
    eps: f64,
    opts: &SimulationOptions,
) -> Result<GapReport, PopulationError> {
    if directions.is_empty() || !(eps > 0.0) {
        return Err(PopulationError::Input("optimality gap needs directions and a positive step".into()));
    }
    let variants: Vec<Variant> = (0..directions.len())
        .flat_map(|j| [Variant { direction: Some(j), scale: eps }, Variant { direction: Some(j), scale: -eps }])
        .collect();
    let costs = evaluate_variants(spec, strategy, directions, &variants, opts)?;
    let scale = 1.0 / (2.0 * eps * spec.dims.agents as f64);
    let derivatives: Vec<Estimate> = (0..directions.len())
        .map(|j| {
            let diffs: Vec<f64> = costs[2 * j].iter().zip(&costs[2 * j + 1]).map(|(p, m)| (p - m) * scale).collect();
            Estimate::from_samples(&diffs)
        })
        .collect();
    let best = derivatives
        .iter()
        .copied()
        .max_by(|a, b| a.mean.abs().total_cmp(&b.mean.abs()))
        .unwrap_or(Estimate { mean: 0.0, stderr: 0.0 });
    Ok(GapReport {
        names: directions.iter().map(|d| d.name.clone()).collect(),
        derivatives,
        proxy: best.mean.abs(),
        proxy_stderr: best.stderr,
    })
}
