//! Independent reference solvers for small instances: the exact social
//! optimum on a scenario tree, a fundamental-matrix solve of the
//! expectation system and the classical regulator of decoupled instances.

mod bvp;
mod lq;
mod tree;


use thiserror::Error;

use crate::meanfield::{solve_consistency_with, MeanFieldError};
use crate::model::{ModelError, ModelSpec};
use crate::numkit::NumError;
use crate::population::{simulate_population, social_cost, synthesize, Estimate, PopulationError, SimulationOptions};
use crate::riccati::Method;

pub use bvp::{shoot_bvp, ExpectationPaths};
pub use lq::{classical_lq, ClassicalLq};
pub use tree::{ScenarioTree, TreeOptimum, MAX_TREE_AGENTS, MAX_TREE_LEAVES, MAX_TREE_STEPS};

/// Errors raised by the reference solvers.
#[derive(Debug, Error)]
pub enum OracleError {
    /// The scenario tree would exceed its size bounds.
    #[error("scenario tree with {agents} agents and {steps} steps exceeds the bound of {limit} leaves, {MAX_TREE_AGENTS} agents and {MAX_TREE_STEPS} steps")]
    TooLarge {
        /// Requested agents.
        agents: usize,
        /// Requested steps.
        steps: usize,
        /// Leaf bound.
        limit: usize,
    },
    /// The instance does not satisfy the solver's structural restriction.
    #[error("restriction violated: {0}")]
    Restriction(String),
    /// The tree quadratic form lost positive definiteness.
    #[error("tree quadratic form is not positive definite (curvature {curvature:.3e})")]
    NotPositiveDefinite {
        /// Normalized curvature found.
        curvature: f64,
    },
    /// Conjugate gradients did not reach the residual tolerance.
    #[error("normal equations not solved after {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence {
        /// Iterations performed.
        iterations: usize,
        /// Relative residual reached.
        residual: f64,
    },
    /// The boundary matrix of the expectation system is singular.
    #[error("singular boundary matrix: {0}")]
    SingularBoundary(NumError),
    /// Numerical failure.
    #[error(transparent)]
    Num(#[from] NumError),
    /// Model resampling failure.
    #[error(transparent)]
    Model(#[from] ModelError),
    /// Mean-field failure while building the strategy.
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    /// Strategy or simulation failure.
    #[error(transparent)]
    Population(#[from] PopulationError),
}

/// Settings of [`compare_with_tree`].
#[derive(Clone, Debug, PartialEq)]
pub struct CompareOptions {
    /// Monte Carlo paths of the simulated cost.
    pub paths: usize,
    /// Monte Carlo seed.
    pub seed: u64,
    /// The strategy is built on a grid this many times finer than the tree
    /// grid and sampled at the tree nodes.
    pub refine: usize,
    /// Riccati method forced on every decoupling field.
    pub method: Option<Method>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { paths: 4000, seed: 1, refine: 20, method: None }
    }
}

/// Decentralized strategy against the tree optimum at matched
/// discretization.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeComparison {
    /// Population size.
    pub agents: usize,
    /// Grid cells.
    pub steps: usize,
    /// Tree optimum.
    pub optimum: TreeOptimum,
    /// Controls of the decentralized strategy on the tree nodes, laid out
    /// as [`ScenarioTree::index`].
    pub strategy_controls: Vec<f64>,
    /// Exact tree cost of the decentralized strategy.
    pub strategy_cost: f64,
    /// Monte Carlo cost of the decentralized strategy with Gaussian
    /// increments.
    pub simulated_cost: Estimate,
}

impl TreeComparison {
    /// `(J(ũ) − J*) / N` on the tree.
    pub fn gap_per_agent(&self) -> f64 {
        (self.strategy_cost - self.optimum.cost) / self.agents as f64
    }

    /// `(J_sim(ũ) − J*) / N` with its standard error.
    pub fn simulated_gap_per_agent(&self) -> Estimate {
        let n = self.agents as f64;
        Estimate { mean: (self.simulated_cost.mean - self.optimum.cost) / n, stderr: self.simulated_cost.stderr / n }
    }

    /// `(J(ũ) − J*) / J*`.
    pub fn relative_gap(&self) -> f64 {
        (self.strategy_cost - self.optimum.cost) / self.optimum.cost.abs()
    }
}

/// Solves the tree optimum of `spec` and evaluates the decentralized
/// strategy on the same grid, both exactly on the tree and by simulation.
pub fn compare_with_tree(spec: &ModelSpec, opts: &CompareOptions) -> Result<TreeComparison, OracleError> {
    let tree = ScenarioTree::new(spec)?;
    let optimum = tree.solve()?;
    let steps = spec.grid.steps();
    let fine = spec.with_steps(steps * opts.refine.max(1))?;
    let mf = solve_consistency_with(&fine, opts.method)?;
    let strategy = synthesize(&fine, &mf, opts.method)?.coarsen(opts.refine.max(1))?;
    let controls = tree.strategy_controls(&strategy)?;
    let strategy_cost = tree.cost(&controls);
    let run = simulate_population(spec, &strategy, &SimulationOptions::new(opts.paths, opts.seed))?;
    Ok(TreeComparison {
        agents: spec.dims.agents,
        steps,
        optimum,
        strategy_controls: controls,
        strategy_cost,
        simulated_cost: social_cost(&run).total,
    })
}
